mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use headlink::actv::{read_actv, read_weights, write_actv, write_weights, ModelMeta, SourceKind, Stream};
use headlink::kvcache::{calibrate, mode_comparison, read_bundle, simulate, write_bundle, Mode, Source};
use headlink::linalg::Matrix;
use headlink::predictor::sweep_n;
use headlink::probe::{graph_stats, probe_all_with, EdgeConstraint, EvalMode, FitSpec, ProximityWindow, R2Graph};
use headlink::selection::{select_targets, verify_selection, SelectionParams};
use headlink::subspace::{od_sweep, overlap_dimension, DEFAULT_OD_RTOL};
use headlink::synth::{derive_seed, gen_exact_linear, gen_gaussian_activations};
use headlink::theory::{run_experiment_with, EntryDist};
use headlink::toy::{build_aligned, build_random, forward, gaussian_inputs, ToyConfig, ToyWeights};
use headlink::Error;

use report::{csv_field, manifest_path, write_text, Format, Output, RunManifest, MANIFEST_SCHEMA_VERSION};

const EXIT_INTERNAL: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_INFEASIBLE: i32 = 3;

#[derive(Parser)]
#[command(name = "headlink", version, about = "Attention-head predictability and KV-cache reconstruction toolkit")]
struct Cli {
    /// Root seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Report destination (a directory for `calibrate`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads for probing and fitting; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Manifest destination; defaults to `<out>.run.json`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Build a toy attention stack, run it on Gaussian tokens and dump Q/K/V.
    GenToy(GenToy),
    /// Write synthetic activations.
    GenSynth(GenSynth),
    /// Pairwise R² graph for one stream.
    Probe(Probe),
    /// Mean R² against the number of reference heads.
    SweepN(SweepN),
    /// Choose target heads on an R² graph.
    Select(Select),
    /// Overlap dimension of a weight dump, or a sweep over toy alignments.
    Overlap(Overlap),
    /// Monte Carlo check of the random-projection error bound.
    TheoryCheck(TheoryCheck),
    /// Build a compression plan bundle from calibration activations.
    Calibrate(Calibrate),
    /// Replay activations or a toy model against a plan.
    Simulate(Simulate),
    /// Calibrate and simulate K-only, V-only and KV plans side by side.
    CompareModes(CompareModes),
    /// Summary statistics of an R² graph.
    Stats(Stats),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::GenSynth(_) => "gen-synth",
            Command::Probe(_) => "probe",
            Command::SweepN(_) => "sweep-n",
            Command::Select(_) => "select",
            Command::Overlap(_) => "overlap",
            Command::TheoryCheck(_) => "theory-check",
            Command::Calibrate(_) => "calibrate",
            Command::Simulate(_) => "simulate",
            Command::CompareModes(_) => "compare-modes",
            Command::Stats(_) => "stats",
        }
    }
}

#[derive(Args, Serialize, Clone)]
struct Dims {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 256)]
    embed_dim: usize,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
}

#[derive(Args, Serialize)]
struct GenToy {
    #[command(flatten)]
    dims: Dims,
    /// Subspace alignment in [0, 1]; omit for i.i.d. Gaussian weights.
    #[arg(long)]
    align: Option<f64>,
    /// Alignment of the V projections; defaults to `--align`.
    #[arg(long)]
    value_align: Option<f64>,
    /// Rank of the shared basis; defaults to the head dimension.
    #[arg(long)]
    shared_dim: Option<usize>,
    /// Record Q/K after the rotary embedding.
    #[arg(long)]
    rope: bool,
    /// Also dump W_K/W_Q/W_V in the weight container.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    /// Also write the toy description used by `simulate --toy`.
    #[arg(long)]
    toy_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SynthKind {
    Gaussian,
    ExactLinear,
}

#[derive(Args, Serialize)]
struct GenSynth {
    #[arg(long, value_enum, default_value_t = SynthKind::Gaussian)]
    kind: SynthKind,
    #[command(flatten)]
    dims: Dims,
    #[arg(long, value_delimiter = ',', default_value = "K,V")]
    streams: Vec<Stream>,
}

#[derive(Args, Serialize, Clone, Copy)]
struct FitArgs {
    /// Fit without an intercept column.
    #[arg(long)]
    no_intercept: bool,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Score on this held-out share of tokens instead of in-sample.
    #[arg(long)]
    holdout: Option<f64>,
}

impl FitArgs {
    fn spec(&self, seed: u64) -> FitSpec {
        FitSpec {
            intercept: !self.no_intercept,
            ridge: self.ridge,
            eval: match self.holdout {
                Some(frac) => EvalMode::Holdout { frac, seed },
                None => EvalMode::InSample,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Constraint {
    /// Targets never read from later layers.
    Layered,
    All,
}

#[derive(Args, Serialize)]
struct Probe {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "K")]
    stream: Stream,
    #[arg(long, value_enum, default_value_t = Constraint::Layered)]
    constraint: Constraint,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Serialize)]
struct SweepN {
    #[arg(long)]
    input: PathBuf,
    /// Probe graph to rank references; probed on the fly when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value = "K")]
    stream: Stream,
    #[arg(long, default_value_t = 5)]
    max_n: usize,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Serialize, Clone, Copy)]
struct SelectArgs {
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 3)]
    min_refs: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps_tau: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
}

impl SelectArgs {
    fn params(&self) -> SelectionParams {
        SelectionParams {
            fraction: self.fraction,
            min_refs: self.min_refs,
            eps_tau: self.eps_tau,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Args, Serialize)]
struct Select {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Args, Serialize)]
struct Overlap {
    /// Weight container (W_K/W_Q/W_V). Without it, sweeps toy alignments.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "K")]
    stream: Stream,
    #[arg(long, default_value_t = DEFAULT_OD_RTOL)]
    rtol: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    aligns: Vec<f64>,
    /// Toy seeds per alignment in sweep mode.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    shared_dim: Option<usize>,
    #[command(flatten)]
    dims: Dims,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DistArg {
    Gaussian,
    XavierNormal,
    XavierUniform,
}

#[derive(Args, Serialize)]
struct TheoryCheck {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = DistArg::Gaussian)]
    dist: DistArg,
}

#[derive(Args, Serialize)]
struct Calibrate {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "KV")]
    mode: Mode,
    #[command(flatten)]
    select: SelectArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Serialize)]
struct SourceArgs {
    /// Activations to replay.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Toy description from `gen-toy --toy-out`; replays the toy model.
    #[arg(long)]
    toy: Option<PathBuf>,
    /// Fresh token inputs for the toy replay; defaults to the calibration inputs.
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Horizon for memory accounting; defaults to the replayed token count.
    #[arg(long)]
    t_eval: Option<usize>,
}

#[derive(Args, Serialize)]
struct Simulate {
    /// Plan bundle directory from `calibrate`.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args, Serialize)]
struct CompareModes {
    #[command(flatten)]
    source: SourceArgs,
    /// Calibration activations; defaults to `--input`.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[command(flatten)]
    select: SelectArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Serialize)]
struct Stats {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9")]
    thresholds: Vec<f64>,
    /// Layer spans counted as near, one proximity summary each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    near_max: Vec<usize>,
}

/// A toy model that can be rebuilt bit for bit.
#[derive(Serialize, Deserialize)]
struct ToySpec {
    schema_version: u32,
    config: ToyConfig,
    aligned: bool,
    input_seed: u64,
}

impl ToySpec {
    fn weights(&self) -> headlink::Result<ToyWeights> {
        if self.aligned {
            build_aligned(&self.config)
        } else {
            build_random(&self.config)
        }
    }
}

fn read_graph(path: &Path) -> Result<R2Graph> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(R2Graph::from_json(&s)?)
}

fn read_toy(path: &Path) -> Result<ToySpec> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&s).map_err(Error::from)?)
}

fn require_out<'a>(out: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    out.ok_or_else(|| Error::InvalidArgument(format!("{what} needs --out")).into())
}

#[derive(Serialize)]
struct Written<'a> {
    schema_version: u32,
    meta: &'a ModelMeta,
    streams: Vec<Stream>,
}

fn run_gen_toy(a: &GenToy, seed: u64, out: Option<&Path>) -> Result<Output> {
    let out = require_out(out, "gen-toy")?;
    let d = &a.dims;
    let mut cfg = ToyConfig::new(d.layers, d.heads, d.head_dim, d.embed_dim, d.tokens).with_seed(derive_seed(seed, 0));
    cfg.rope = a.rope;
    cfg.value_align = a.value_align;
    if let Some(align) = a.align {
        cfg = cfg.with_align(align, a.shared_dim.unwrap_or(d.head_dim));
    }
    let spec = ToySpec {
        schema_version: 1,
        config: cfg,
        aligned: a.align.is_some(),
        input_seed: derive_seed(seed, 1),
    };
    let weights = spec.weights()?;
    let acts = forward(&weights, &spec.config, &gaussian_inputs(d.tokens, d.embed_dim, spec.input_seed))?;
    write_actv(&acts, out)?;
    let mut o = Output::json(Written {
        schema_version: 1,
        meta: acts.meta(),
        streams: acts.streams().collect(),
    })?
    .with_artifact(out);
    if let Some(w) = &a.weights_out {
        write_weights(&weights.to_weight_set(&spec.config)?, w)?;
        o = o.with_artifact(w);
    }
    if let Some(t) = &a.toy_out {
        write_text(t, &(serde_json::to_string_pretty(&spec)? + "\n"))?;
        o = o.with_artifact(t);
    }
    Ok(o)
}

fn run_gen_synth(a: &GenSynth, seed: u64, out: Option<&Path>) -> Result<Output> {
    let out = require_out(out, "gen-synth")?;
    let d = &a.dims;
    let meta = ModelMeta::new("synthetic", d.layers, d.heads, d.head_dim, d.embed_dim, d.tokens, SourceKind::Synthetic);
    let acts = match a.kind {
        SynthKind::Gaussian => gen_gaussian_activations(&meta, &a.streams, seed)?,
        SynthKind::ExactLinear => gen_exact_linear(&meta, &a.streams, seed)?,
    };
    write_actv(&acts, out)?;
    Ok(Output::json(Written {
        schema_version: 1,
        meta: acts.meta(),
        streams: acts.streams().collect(),
    })?
    .with_artifact(out))
}

fn graph_csv(g: &R2Graph) -> String {
    let mut s = String::from("ref,target,r2\n");
    for (r, t, v) in g.edges() {
        s.push_str(&format!("{r},{t},{v}\n"));
    }
    s
}

fn run_probe(a: &Probe, seed: u64) -> Result<Output> {
    let acts = read_actv(&a.input)?;
    let constraint = match a.constraint {
        Constraint::Layered => EdgeConstraint::TargetLayerGeRef,
        Constraint::All => EdgeConstraint::Unrestricted,
    };
    let g = probe_all_with(&acts, a.stream, &a.fit.spec(seed), constraint)?;
    let json: serde_json::Value = serde_json::from_str(&g.to_json()?)?;
    Ok(Output::json(json)?.with_csv(graph_csv(&g)))
}

fn run_sweep_n(a: &SweepN, seed: u64) -> Result<Output> {
    let acts = read_actv(&a.input)?;
    let spec = a.fit.spec(seed);
    let g = match &a.graph {
        Some(p) => read_graph(p)?,
        None => probe_all_with(&acts, a.stream, &spec, EdgeConstraint::TargetLayerGeRef)?,
    };
    if g.stream() != a.stream {
        bail!(Error::InvalidArgument(format!("graph is for stream {}, not {}", g.stream(), a.stream)));
    }
    let ns: Vec<usize> = (1..=a.max_n).collect();
    let curve = sweep_n(&acts, a.stream, &g, &ns, &spec)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        #[serde(flatten)]
        curve: &'a headlink::predictor::R2Curve,
    }
    Ok(Output::json(Doc { schema_version: 1, curve: &curve })?.with_csv(curve.to_csv()))
}

fn run_select(a: &Select) -> Result<Output> {
    let g = read_graph(&a.graph)?;
    let p = a.select.params();
    let res = select_targets(&g, &p)?;
    let violations = verify_selection(&g, &res, &p);
    if !violations.is_empty() {
        return Err(anyhow!("selection failed its own verification: {violations:?}"));
    }
    let mut csv = String::from("target,refs\n");
    for e in &res.refs_per_target {
        let refs: Vec<String> = e.refs.iter().map(ToString::to_string).collect();
        csv.push_str(&format!("{},{}\n", e.target, csv_field(&refs.join(" "))));
    }
    let json: serde_json::Value = serde_json::from_str(&res.to_json()?)?;
    let mut o = Output::json(json)?.with_csv(csv);
    if !res.feasible {
        eprintln!(
            "selection infeasible: achieved fraction {:.4} of requested {}",
            res.achieved_fraction, p.fraction
        );
        o.exit_code = EXIT_INFEASIBLE;
    }
    Ok(o)
}

fn run_overlap(a: &Overlap, seed: u64) -> Result<Output> {
    if let Some(path) = &a.weights {
        let ws = read_weights(path)?;
        let mut rep = serde_json::to_value(overlap_dimension(&ws, a.stream, a.rtol)?)?;
        rep["schema_version"] = 1.into();
        let mut csv = String::from("layer,od,concat_rank,head_ranks\n");
        for l in rep["layers"].as_array().into_iter().flatten() {
            let ranks: Vec<String> = l["head_ranks"].as_array().into_iter().flatten().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{},{},{},{}\n", l["layer"], l["od"], l["concat_rank"], ranks.join(" ")));
        }
        return Ok(Output::json(rep)?.with_csv(csv));
    }
    let d = &a.dims;
    let s = a.shared_dim.unwrap_or(d.head_dim);
    let mut cfgs = Vec::new();
    for &align in &a.aligns {
        for i in 0..a.seeds {
            cfgs.push(ToyConfig::new(d.layers, d.heads, d.head_dim, d.embed_dim, d.tokens).with_align(align, s).with_seed(derive_seed(seed, i)));
        }
    }
    let pts = od_sweep(&cfgs, a.stream, a.rtol)?;
    let grouped = headlink::subspace::mean_by_align(&pts);
    let (xs, ys): (Vec<f64>, Vec<f64>) = grouped.iter().copied().unzip();
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        stream: Stream,
        rtol: f64,
        note: &'static str,
        points: &'a [headlink::subspace::SweepPoint],
        mean_by_align: Vec<(f64, f64)>,
        spearman: Option<f64>,
    }
    let mut csv = String::from("align,seed,mean_od\n");
    for p in &pts {
        csv.push_str(&format!("{},{},{}\n", p.align, p.seed, p.mean_od));
    }
    Ok(Output::json(Doc {
        schema_version: 1,
        stream: a.stream.weight_stream(),
        rtol: a.rtol,
        note: "toy alignment sweep; absolute OD depends on rtol, compare trends only",
        points: &pts,
        mean_by_align: grouped.clone(),
        spearman: headlink::subspace::spearman(&xs, &ys),
    })?
    .with_csv(csv))
}

fn run_theory(a: &TheoryCheck, seed: u64) -> Result<Output> {
    let dist = match a.dist {
        DistArg::Gaussian => EntryDist::Gaussian,
        DistArg::XavierNormal => EntryDist::XavierNormal,
        DistArg::XavierUniform => EntryDist::XavierUniform,
    };
    let rep = run_experiment_with(a.m, a.k, a.trials, seed, dist)?;
    eprintln!(
        "{}: {} of {} trials below {} (mean {:.2}, expected {})",
        if rep.passed() { "PASS" } else { "FAIL" },
        rep.violations,
        rep.trials,
        rep.threshold,
        rep.values.mean,
        rep.expected_mean
    );
    Output::json(rep)
}

fn run_calibrate(a: &Calibrate, seed: u64, out: Option<&Path>) -> Result<Output> {
    let out = require_out(out, "calibrate")?;
    let acts = read_actv(&a.input)?;
    let plan = calibrate(&acts, &a.select.params(), a.mode, &a.fit.spec(seed))?;
    write_bundle(&plan, out)?;
    #[derive(Serialize)]
    struct Doc {
        schema_version: u32,
        mode: Mode,
        targets: BTreeMap<String, usize>,
        tau: BTreeMap<String, f64>,
        predictor_overhead_bytes: usize,
    }
    let doc = Doc {
        schema_version: 1,
        mode: plan.mode,
        targets: plan.streams.iter().map(|s| (s.stream.to_string(), s.selection.targets.len())).collect(),
        tau: plan.streams.iter().map(|s| (s.stream.to_string(), s.selection.tau)).collect(),
        predictor_overhead_bytes: plan.accounting.predictor_overhead_bytes,
    };
    Ok(Output::json(doc)?.with_artifact(out))
}

struct Replay {
    acts: Option<headlink::actv::ActivationSet>,
    toy: Option<(ToyWeights, ToyConfig, Matrix)>,
}

impl Replay {
    fn load(a: &SourceArgs) -> Result<Self> {
        let acts = a.input.as_deref().map(read_actv).transpose()?;
        let toy = match &a.toy {
            Some(p) => {
                let spec = read_toy(p)?;
                let w = spec.weights()?;
                let inputs = gaussian_inputs(spec.config.tokens, spec.config.embed_dim, a.eval_seed.unwrap_or(spec.input_seed));
                Some((w, spec.config, inputs))
            }
            None => None,
        };
        if acts.is_none() && toy.is_none() {
            bail!(Error::InvalidArgument("need --input or --toy".into()));
        }
        Ok(Self { acts, toy })
    }

    fn source(&self) -> Source<'_> {
        match (&self.toy, &self.acts) {
            (Some((weights, cfg, inputs)), _) => Source::Toy { weights, cfg, inputs },
            (None, Some(acts)) => Source::Activations(acts),
            (None, None) => unreachable!("checked in load"),
        }
    }
}

fn run_simulate(a: &Simulate) -> Result<Output> {
    let plan = read_bundle(&a.plan)?;
    let replay = Replay::load(&a.source)?;
    Output::json(simulate(&plan, &replay.source(), a.source.t_eval)?)
}

fn run_compare(a: &CompareModes, seed: u64) -> Result<Output> {
    let replay = Replay::load(&a.source)?;
    let calib = match (&a.calib, &replay.acts) {
        (Some(p), _) => read_actv(p)?,
        (None, Some(acts)) => acts.clone(),
        (None, None) => bail!(Error::InvalidArgument("need --calib or --input for calibration".into())),
    };
    let reps = mode_comparison(&calib, &replay.source(), &a.select.params(), &a.fit.spec(seed), a.source.t_eval)?;
    let mut csv = String::from("mode,memory_ratio,mean_mse,max_mse,attention_output_mse,attention_rel_err\n");
    for (mode, r) in &reps {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!(
            "{mode},{},{},{},{},{}\n",
            r.memory_ratio,
            r.mean_mse,
            r.max_mse,
            opt(r.attention_output_mse),
            opt(r.attention_rel_err)
        ));
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        modes: BTreeMap<String, &'a headlink::kvcache::CompressionReport>,
    }
    Ok(Output::json(Doc {
        schema_version: 1,
        modes: reps.iter().map(|(m, r)| (m.to_string(), r)).collect(),
    })?
    .with_csv(csv))
}

fn run_stats(a: &Stats) -> Result<Output> {
    let g = read_graph(&a.graph)?;
    let windows: Vec<ProximityWindow> = a.near_max.iter().map(|&near_max| ProximityWindow { near_max }).collect();
    let mut v = serde_json::to_value(graph_stats(&g, &a.thresholds, &windows)?)?;
    v["schema_version"] = 1.into();
    v["stream"] = serde_json::to_value(g.stream())?;
    Output::json(v)
}

fn inputs_of(cmd: &Command) -> Vec<PathBuf> {
    let mut v: Vec<Option<&PathBuf>> = match cmd {
        Command::Probe(a) => vec![Some(&a.input)],
        Command::SweepN(a) => vec![Some(&a.input), a.graph.as_ref()],
        Command::Select(a) => vec![Some(&a.graph)],
        Command::Overlap(a) => vec![a.weights.as_ref()],
        Command::Calibrate(a) => vec![Some(&a.input)],
        Command::Simulate(a) => vec![Some(&a.plan), a.source.input.as_ref(), a.source.toy.as_ref()],
        Command::CompareModes(a) => vec![a.source.input.as_ref(), a.source.toy.as_ref(), a.calib.as_ref()],
        Command::Stats(a) => vec![Some(&a.graph)],
        Command::GenToy(_) | Command::GenSynth(_) | Command::TheoryCheck(_) => vec![],
    };
    v.retain(Option::is_some);
    v.into_iter().flatten().cloned().collect()
}

fn dispatch(cli: &Cli) -> Result<Output> {
    let out = cli.out.as_deref();
    let seed = cli.seed;
    match &cli.command {
        Command::GenToy(a) => run_gen_toy(a, seed, out),
        Command::GenSynth(a) => run_gen_synth(a, seed, out),
        Command::Probe(a) => run_probe(a, seed),
        Command::SweepN(a) => run_sweep_n(a, seed),
        Command::Select(a) => run_select(a),
        Command::Overlap(a) => run_overlap(a, seed),
        Command::TheoryCheck(a) => run_theory(a, seed),
        Command::Calibrate(a) => run_calibrate(a, seed, out),
        Command::Simulate(a) => run_simulate(a),
        Command::CompareModes(a) => run_compare(a, seed),
        Command::Stats(a) => run_stats(a),
    }
}

/// Subcommands whose `--out` is the artifact itself rather than the report.
fn writes_own_artifact(cmd: &Command) -> bool {
    matches!(cmd, Command::GenToy(_) | Command::GenSynth(_) | Command::Calibrate(_))
}

fn run(cli: &Cli) -> Result<i32> {
    let start = Instant::now();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!(Error::InvalidArgument("--workers must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;

    let output = dispatch(cli)?;
    let mut outputs = output.artifacts.clone();
    let text = output.render(cli.format)?;
    match &cli.out {
        Some(p) if !writes_own_artifact(&cli.command) => {
            write_text(p, &text)?;
            outputs.push(p.clone());
        }
        // Artifact writers keep --out for the artifact; the summary goes to stdout.
        _ => print!("{text}"),
    }

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cli.command.name(),
        parameters: serde_json::to_value(&cli.command)?,
        seed: cli.seed,
        workers,
        format: cli.format,
        inputs: inputs_of(&cli.command),
        outputs,
        exit_code: output.exit_code,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    match manifest_path(cli.out.as_deref(), cli.manifest.as_deref()) {
        Some(p) => write_text(&p, &text)?,
        None => eprint!("{text}"),
    }
    Ok(output.exit_code)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::SelectionInfeasible { .. }) => EXIT_INFEASIBLE as u8,
        Some(Error::Io(e)) if e.kind() != std::io::ErrorKind::NotFound => EXIT_INTERNAL,
        Some(_) => EXIT_INVALID,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_INVALID,
        None => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
