//! Reference-only KV caching with linear reconstruction of target heads.
//!
//! [`calibrate`] probes each compressed stream, selects targets and fits one
//! predictor per target. [`simulate`] replays a source with only the
//! reference heads cached and reports memory and reconstruction error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{ActivationSet, HeadId, ModelMeta, Stream};
use crate::error::{Error, Result};
use crate::linalg::{r2_score, Matrix};
use crate::predictor::{fit_predictor, LinearPredictor};
use crate::probe::{probe_all, FitSpec};
use crate::selection::{select_targets, SelectionParams, SelectionResult};
use crate::toy::{forward_traced, LayerStates, ToyConfig, ToyWeights};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Streams a KV cache holds; memory ratios are taken over both.
pub const CACHED_STREAMS: [Stream; 2] = [Stream::K, Stream::V];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "K_only")]
    KOnly,
    #[serde(rename = "V_only")]
    VOnly,
    #[serde(rename = "KV")]
    KV,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::KOnly, Mode::VOnly, Mode::KV];

    /// Streams whose targets are reconstructed.
    pub fn streams(self) -> &'static [Stream] {
        match self {
            Mode::KOnly => &[Stream::K],
            Mode::VOnly => &[Stream::V],
            Mode::KV => &[Stream::K, Stream::V],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::KOnly => "K_only",
            Mode::VOnly => "V_only",
            Mode::KV => "KV",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K_only" | "k" | "k_only" => Ok(Mode::KOnly),
            "V_only" | "v" | "v_only" => Ok(Mode::VOnly),
            "KV" | "kv" => Ok(Mode::KV),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?}; expected K_only, V_only or KV"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub bytes_per_element: usize,
    /// Bytes of all predictor weights.
    pub predictor_overhead_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub stream: Stream,
    pub selection: SelectionResult,
    /// One per target, in `selection.targets` order.
    pub predictors: Vec<LinearPredictor>,
}

impl StreamPlan {
    pub fn predictor(&self, target: HeadId) -> Option<&LinearPredictor> {
        self.predictors.iter().find(|p| p.target == target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub mode: Mode,
    pub meta: ModelMeta,
    pub params: SelectionParams,
    pub fit: FitSpec,
    pub streams: Vec<StreamPlan>,
    pub accounting: Accounting,
}

impl CompressionPlan {
    pub fn stream(&self, stream: Stream) -> Option<&StreamPlan> {
        self.streams.iter().find(|s| s.stream == stream)
    }

    pub fn num_targets(&self) -> usize {
        self.streams.iter().map(|s| s.selection.targets.len()).sum()
    }

    /// Checks the structural invariants tying selections to predictors.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PlanMismatch(m));
        let planned: Vec<Stream> = self.streams.iter().map(|s| s.stream).collect();
        if planned != self.mode.streams() {
            return bad(format!("mode {} but plan covers {planned:?}", self.mode));
        }
        let mut overhead = 0;
        for sp in &self.streams {
            if sp.predictors.len() != sp.selection.targets.len() {
                return bad(format!("{}: {} predictors for {} targets", sp.stream, sp.predictors.len(), sp.selection.targets.len()));
            }
            for (p, &t) in sp.predictors.iter().zip(&sp.selection.targets) {
                if p.target != t || p.stream != sp.stream {
                    return bad(format!("{}: predictor for {} out of order (expected {t})", sp.stream, p.target));
                }
                if Some(p.refs.as_slice()) != sp.selection.refs_of(t) {
                    return bad(format!("{}: predictor refs of {t} differ from the selection", sp.stream));
                }
                if let Some(r) = p.refs.iter().find(|r| r.layer > t.layer || sp.selection.is_target(**r)) {
                    return bad(format!("{}: {t} reads from {r}, which is a later layer or a target", sp.stream));
                }
                let rows = p.refs.len() * self.meta.head_dim + usize::from(p.intercept);
                if p.weights.shape() != (rows, self.meta.head_dim) {
                    return bad(format!("{}: weights of {t} are {:?}, expected ({rows}, {})", sp.stream, p.weights.shape(), self.meta.head_dim));
                }
                overhead += rows * self.meta.head_dim * self.accounting.bytes_per_element;
            }
        }
        if overhead != self.accounting.predictor_overhead_bytes {
            return bad(format!(
                "predictor_overhead_bytes {} but weights take {overhead}",
                self.accounting.predictor_overhead_bytes
            ));
        }
        Ok(())
    }

    /// `(stored, full)` cache bytes at horizon `t_eval`.
    pub fn cache_bytes(&self, t_eval: usize) -> (usize, usize) {
        let per_head = t_eval * self.meta.head_dim * self.accounting.bytes_per_element;
        let heads = self.meta.num_heads();
        let full = CACHED_STREAMS.len() * heads * per_head;
        let dropped: usize = self.streams.iter().map(|s| s.selection.targets.len()).sum();
        let stored = full - dropped * per_head + self.accounting.predictor_overhead_bytes;
        (stored, full)
    }

    pub fn memory_ratio(&self, t_eval: usize) -> f64 {
        let (stored, full) = self.cache_bytes(t_eval);
        stored as f64 / full as f64
    }
}

/// Probes, selects and fits predictors for every stream of `mode`; streams
/// are handled independently.
pub fn calibrate(acts: &ActivationSet, p: &SelectionParams, mode: Mode, fit: &FitSpec) -> Result<CompressionPlan> {
    p.validate()?;
    let meta = acts.meta().clone();
    let mut streams = Vec::new();
    for &stream in mode.streams() {
        if !acts.has_stream(stream) {
            return Err(Error::MissingStream(stream));
        }
        let graph = probe_all(acts, stream, fit)?;
        let selection = select_targets(&graph, p)?;
        if !selection.feasible {
            return Err(Error::SelectionInfeasible {
                stream,
                achieved_fraction: selection.achieved_fraction,
            });
        }
        let predictors = selection
            .refs_per_target
            .par_iter()
            .map(|e| fit_predictor(acts, stream, e.target, &e.refs, fit))
            .collect::<Result<Vec<_>>>()?;
        streams.push(StreamPlan {
            stream,
            selection,
            predictors,
        });
    }
    let bytes_per_element = 4;
    let predictor_overhead_bytes = streams
        .iter()
        .flat_map(|s| &s.predictors)
        .map(|p| p.weights.rows() * p.weights.cols() * bytes_per_element)
        .sum();
    let plan = CompressionPlan {
        mode,
        meta,
        params: *p,
        fit: *fit,
        streams,
        accounting: Accounting {
            bytes_per_element,
            predictor_overhead_bytes,
        },
    };
    plan.validate()?;
    Ok(plan)
}

/// What [`simulate`] replays.
pub enum Source<'a> {
    Activations(&'a ActivationSet),
    Toy {
        weights: &'a ToyWeights,
        cfg: &'a ToyConfig,
        inputs: &'a Matrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadError {
    pub stream: Stream,
    pub head: HeadId,
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub t_eval: usize,
    pub stored_bytes: usize,
    pub full_bytes: usize,
    pub memory_ratio: f64,
    pub targets: usize,
    /// Mean over reconstructed heads; 0 when nothing is reconstructed.
    pub mean_mse: f64,
    pub max_mse: f64,
    pub heads: Vec<HeadError>,
    /// Toy sources only: mean squared difference of per-layer attention
    /// outputs between the compressed and the full-cache run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_output_mse: Option<f64>,
    /// Toy sources only: `||out_compressed - out_full||_F / ||out_full||_F`
    /// over all layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_rel_err: Option<f64>,
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    let n = (a.rows() * a.cols()).max(1) as f64;
    Ok(a.sub(b)?.frobenius_sq() / n)
}

fn head_error(stream: Stream, head: HeadId, truth: &Matrix, recon: &Matrix) -> Result<HeadError> {
    Ok(HeadError {
        stream,
        head,
        mse: mse(truth, recon)?,
        r2: r2_score(truth, recon)?,
    })
}

fn check_meta(plan: &ModelMeta, src: &ModelMeta) -> Result<()> {
    let key = |m: &ModelMeta| (m.num_layers, m.heads_per_layer, m.head_dim, m.embed_dim, m.post_rope);
    if key(plan) != key(src) {
        return Err(Error::PlanMismatch(format!(
            "plan is (L, H, d_h, m, post_rope) = {:?}, source is {:?}",
            key(plan),
            key(src)
        )));
    }
    Ok(())
}

fn report(plan: &CompressionPlan, t_eval: usize, heads: Vec<HeadError>) -> CompressionReport {
    let (stored_bytes, full_bytes) = plan.cache_bytes(t_eval);
    let n = heads.len();
    CompressionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: plan.mode,
        t_eval,
        stored_bytes,
        full_bytes,
        memory_ratio: stored_bytes as f64 / full_bytes as f64,
        targets: n,
        mean_mse: if n == 0 { 0.0 } else { heads.iter().map(|h| h.mse).sum::<f64>() / n as f64 },
        max_mse: heads.iter().map(|h| h.mse).fold(0.0, f64::max),
        heads,
        attention_output_mse: None,
        attention_rel_err: None,
    }
}

/// Replays `source` with only reference heads cached. `t_eval` sets the
/// horizon for memory accounting and defaults to the source's token count.
pub fn simulate(plan: &CompressionPlan, source: &Source<'_>, t_eval: Option<usize>) -> Result<CompressionReport> {
    plan.validate()?;
    match source {
        Source::Activations(acts) => simulate_activations(plan, acts, t_eval),
        Source::Toy { weights, cfg, inputs } => simulate_toy(plan, weights, cfg, inputs, t_eval),
    }
}

fn simulate_activations(plan: &CompressionPlan, acts: &ActivationSet, t_eval: Option<usize>) -> Result<CompressionReport> {
    check_meta(&plan.meta, acts.meta())?;
    let mut heads = Vec::new();
    for sp in &plan.streams {
        if !acts.has_stream(sp.stream) {
            return Err(Error::MissingStream(sp.stream));
        }
        // The cache only ever holds reference heads, so reading the source
        // for references is reading the cache.
        let errs = sp
            .predictors
            .par_iter()
            .map(|p| {
                debug_assert!(p.refs.iter().all(|r| !sp.selection.is_target(*r)));
                let recon = p.apply(&acts.concat_heads(sp.stream, &p.refs)?)?;
                head_error(sp.stream, p.target, &acts.head_matrix(sp.stream, p.target)?, &recon)
            })
            .collect::<Result<Vec<_>>>()?;
        heads.extend(errs);
    }
    Ok(report(plan, t_eval.unwrap_or(acts.meta().token_count), heads))
}

fn poisoned(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| f64::NAN)
}

fn simulate_toy(
    plan: &CompressionPlan,
    weights: &ToyWeights,
    cfg: &ToyConfig,
    inputs: &Matrix,
    t_eval: Option<usize>,
) -> Result<CompressionReport> {
    check_meta(&plan.meta, &cfg.meta())?;
    let full = forward_traced(weights, cfg, inputs, |_, _| Ok(()))?;

    let h = cfg.heads;
    // Per stream, the cached states of every layer processed so far.
    let mut cache: BTreeMap<Stream, Vec<Vec<Matrix>>> = BTreeMap::new();
    let mut heads = Vec::new();
    let compressed = forward_traced(weights, cfg, inputs, |layer, states: &mut LayerStates| {
        for sp in &plan.streams {
            let layer_targets: Vec<&LinearPredictor> =
                sp.predictors.iter().filter(|p| p.target.layer == layer).collect();
            let current = states.stream_mut(sp.stream);
            let truth: Vec<Matrix> = layer_targets.iter().map(|p| current[p.target.head].clone()).collect();
            if cfg!(debug_assertions) {
                // Taint: a reconstruction that reads a target state hits NaN.
                for p in &layer_targets {
                    let (r, c) = current[p.target.head].shape();
                    current[p.target.head] = poisoned(r, c);
                }
            }
            let past = cache.entry(sp.stream).or_default();
            let recon = layer_targets
                .par_iter()
                .map(|p| {
                    let blocks: Vec<&Matrix> = p
                        .refs
                        .iter()
                        .map(|r| if r.layer == layer { &current[r.head] } else { &past[r.layer][r.head] })
                        .collect();
                    let x = Matrix::hcat(&blocks)?;
                    if !x.is_finite() {
                        return Err(Error::PlanMismatch(format!(
                            "reconstruction of {} read a target state",
                            p.target
                        )));
                    }
                    p.apply(&x)
                })
                .collect::<Result<Vec<_>>>()?;
            for ((p, t), r) in layer_targets.iter().zip(&truth).zip(recon) {
                heads.push(head_error(sp.stream, p.target, t, &r)?);
                current[p.target.head] = r;
            }
            debug_assert_eq!(current.len(), h);
            past.push(current.clone());
        }
        Ok(())
    })?;

    let mut diff_sq = 0.0;
    let mut base_sq = 0.0;
    let mut count = 0usize;
    for (a, b) in compressed.attention_out.iter().zip(&full.attention_out) {
        diff_sq += a.sub(b)?.frobenius_sq();
        base_sq += b.frobenius_sq();
        count += a.rows() * a.cols();
    }
    heads.sort_by_key(|h| (h.stream, h.head));
    let mut rep = report(plan, t_eval.unwrap_or(cfg.tokens), heads);
    rep.attention_output_mse = Some(diff_sq / count.max(1) as f64);
    rep.attention_rel_err = Some(if base_sq > 0.0 { (diff_sq / base_sq).sqrt() } else { 0.0 });
    Ok(rep)
}

/// Calibrates and simulates every mode with shared parameters.
pub fn mode_comparison(
    calib: &ActivationSet,
    source: &Source<'_>,
    p: &SelectionParams,
    fit: &FitSpec,
    t_eval: Option<usize>,
) -> Result<BTreeMap<Mode, CompressionReport>> {
    for s in CACHED_STREAMS {
        if !calib.has_stream(s) {
            return Err(Error::MissingStream(s));
        }
    }
    let mut out = BTreeMap::new();
    for mode in Mode::ALL {
        let plan = calibrate(calib, p, mode, fit)?;
        out.insert(mode, simulate(&plan, source, t_eval)?);
    }
    Ok(out)
}

pub const BUNDLE_MANIFEST: &str = "manifest.json";
pub const BUNDLE_WEIGHTS: &str = "weights.bin";

#[derive(Serialize, Deserialize)]
struct BundlePredictor {
    target: HeadId,
    refs: Vec<HeadId>,
    intercept: bool,
    rows: usize,
    cols: usize,
    /// Byte offset into the weights file.
    offset: usize,
    fit_r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eval_r2: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleStream {
    stream: Stream,
    selection: SelectionResult,
    predictors: Vec<BundlePredictor>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    schema_version: u32,
    mode: Mode,
    meta: ModelMeta,
    params: SelectionParams,
    fit: FitSpec,
    accounting: Accounting,
    weights_file: String,
    weights_nbytes: usize,
    streams: Vec<BundleStream>,
}

/// Writes `manifest.json` and `weights.bin` (little-endian f32, row-major
/// per predictor) into `dir`, creating it if needed.
pub fn write_bundle(plan: &CompressionPlan, dir: &Path) -> Result<()> {
    plan.validate()?;
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let streams = plan
        .streams
        .iter()
        .map(|sp| BundleStream {
            stream: sp.stream,
            selection: sp.selection.clone(),
            predictors: sp
                .predictors
                .iter()
                .map(|p| {
                    let offset = payload.len();
                    for &v in p.weights.data() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                    BundlePredictor {
                        target: p.target,
                        refs: p.refs.clone(),
                        intercept: p.intercept,
                        rows: p.weights.rows(),
                        cols: p.weights.cols(),
                        offset,
                        fit_r2: p.fit_r2,
                        eval_r2: p.eval_r2,
                    }
                })
                .collect(),
        })
        .collect();
    let manifest = BundleManifest {
        schema_version: PLAN_SCHEMA_VERSION,
        mode: plan.mode,
        meta: plan.meta.clone(),
        params: plan.params,
        fit: plan.fit,
        accounting: plan.accounting,
        weights_file: BUNDLE_WEIGHTS.into(),
        weights_nbytes: payload.len(),
        streams,
    };
    fs::write(dir.join(BUNDLE_WEIGHTS), &payload)?;
    fs::write(dir.join(BUNDLE_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<CompressionPlan> {
    let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join(BUNDLE_MANIFEST))?)?;
    if manifest.schema_version != PLAN_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported plan schema_version {}",
            manifest.schema_version
        )));
    }
    let payload = fs::read(dir.join(&manifest.weights_file))?;
    if payload.len() != manifest.weights_nbytes {
        return Err(Error::Format(format!(
            "weights file has {} bytes, manifest declares {}",
            payload.len(),
            manifest.weights_nbytes
        )));
    }
    let streams = manifest
        .streams
        .into_iter()
        .map(|bs| {
            let predictors = bs
                .predictors
                .into_iter()
                .map(|bp| {
                    let end = bp.offset + bp.rows * bp.cols * 4;
                    let bytes = payload.get(bp.offset..end).ok_or_else(|| {
                        Error::Format(format!("weights of {} run past the end of the payload", bp.target))
                    })?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    Ok(LinearPredictor {
                        stream: bs.stream,
                        target: bp.target,
                        refs: bp.refs,
                        intercept: bp.intercept,
                        weights: Matrix::new(bp.rows, bp.cols, data)?,
                        fit_r2: bp.fit_r2,
                        eval_r2: bp.eval_r2,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StreamPlan {
                stream: bs.stream,
                selection: bs.selection,
                predictors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = CompressionPlan {
        mode: manifest.mode,
        meta: manifest.meta,
        params: manifest.params,
        fit: manifest.fit,
        streams,
        accounting: manifest.accounting,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actv::SourceKind;
    use crate::synth::{gen_exact_linear, gen_gaussian_activations};

    fn exact(t: usize) -> ActivationSet {
        let meta = ModelMeta::new("exact", 2, 8, 4, 32, t, SourceKind::Synthetic);
        gen_exact_linear(&meta, &[Stream::K, Stream::V], 5).unwrap()
    }

    #[test]
    fn exact_linear_k_only() {
        let acts = exact(64);
        let plan = calibrate(&acts, &SelectionParams::new(0.5, 3), Mode::KOnly, &FitSpec::default()).unwrap();
        assert_eq!(plan.num_targets(), 8);
        assert!(plan.streams[0].predictors.iter().all(|p| p.fit_r2 > 1.0 - 1e-9));
        let rep = simulate(&plan, &Source::Activations(&acts), None).unwrap();
        assert!(rep.max_mse < 1e-12, "{}", rep.max_mse);
        // 24 of 32 cached heads plus 8 predictors of 13 x 4 weights.
        let expected = (24.0 * 64.0 * 4.0 + 8.0 * 13.0 * 4.0) / (32.0 * 64.0 * 4.0);
        assert!((rep.memory_ratio - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_plan_is_lossless() {
        let acts = exact(32);
        let plan = calibrate(&acts, &SelectionParams::new(0.0, 3), Mode::KV, &FitSpec::default()).unwrap();
        let rep = simulate(&plan, &Source::Activations(&acts), Some(4096)).unwrap();
        assert_eq!(rep.memory_ratio, 1.0);
        assert_eq!((rep.mean_mse, rep.max_mse, rep.targets), (0.0, 0.0, 0));
    }

    #[test]
    fn in_sample_r2_matches_fit() {
        let meta = ModelMeta::new("g", 2, 4, 4, 16, 200, SourceKind::Synthetic);
        let acts = gen_gaussian_activations(&meta, &[Stream::K, Stream::V], 1).unwrap();
        let plan = calibrate(&acts, &SelectionParams::new(0.25, 2), Mode::KOnly, &FitSpec::default()).unwrap();
        let rep = simulate(&plan, &Source::Activations(&acts), None).unwrap();
        for h in &rep.heads {
            let p = plan.streams[0].predictor(h.head).unwrap();
            assert!((h.r2 - p.fit_r2).abs() < 1e-9, "{} vs {}", h.r2, p.fit_r2);
        }
    }

    #[test]
    fn infeasible_and_mismatch() {
        let meta = ModelMeta::new("tiny", 1, 3, 4, 16, 64, SourceKind::Synthetic);
        let acts = gen_gaussian_activations(&meta, &[Stream::K, Stream::V], 1).unwrap();
        let r = calibrate(&acts, &SelectionParams::new(0.5, 3), Mode::KOnly, &FitSpec::default());
        assert!(matches!(r, Err(Error::SelectionInfeasible { stream: Stream::K, .. })));

        let plan = calibrate(&exact(32), &SelectionParams::new(0.5, 3), Mode::KOnly, &FitSpec::default()).unwrap();
        assert!(matches!(
            simulate(&plan, &Source::Activations(&acts), None),
            Err(Error::PlanMismatch(_))
        ));
        assert!(calibrate(&acts, &SelectionParams::new(0.5, 1), Mode::KOnly, &FitSpec::default())
            .map(|p| p.validate())
            .is_ok());
    }

    #[test]
    fn tampered_plan_fails_validation() {
        let mut plan = calibrate(&exact(32), &SelectionParams::new(0.5, 3), Mode::KOnly, &FitSpec::default()).unwrap();
        let t = plan.streams[0].selection.targets[1];
        plan.streams[0].predictors[0].refs[0] = t;
        assert!(matches!(plan.validate(), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let plan = calibrate(&exact(32), &SelectionParams::new(0.5, 3), Mode::KV, &FitSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&plan, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.streams.len(), 2);
        assert_eq!(back.accounting, plan.accounting);
        for (a, b) in back.streams.iter().zip(&plan.streams) {
            assert_eq!(a.selection, b.selection);
            for (pa, pb) in a.predictors.iter().zip(&b.predictors) {
                let expect: Vec<f64> = pb.weights.data().iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(pa.weights.data(), expect.as_slice());
            }
        }
        // Writing the re-read plan reproduces the same bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_bundle(&back, dir2.path()).unwrap();
        for f in [BUNDLE_MANIFEST, BUNDLE_WEIGHTS] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("K_only".parse::<Mode>().unwrap(), Mode::KOnly);
        assert_eq!("kv".parse::<Mode>().unwrap(), Mode::KV);
        assert!("x".parse::<Mode>().is_err());
        assert_eq!(serde_json::to_string(&Mode::VOnly).unwrap(), "\"V_only\"");
    }
}
