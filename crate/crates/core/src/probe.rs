//! Pairwise linear probes between heads and the resulting R² graph.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{ActivationSet, HeadId, ModelMeta, Stream};
use crate::error::{Error, Result};
use crate::linalg::{predict, r2_from_sse, r2_score, LstsqFactor, Matrix};
use crate::synth::rng_from_seed;

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeConstraint {
    /// Only edges whose target sits in the same or a later layer than the
    /// reference, so a predictor never needs future layers.
    TargetLayerGeRef,
    Unrestricted,
}

impl EdgeConstraint {
    pub fn admits(self, reference: HeadId, target: HeadId) -> bool {
        reference != target
            && match self {
                EdgeConstraint::TargetLayerGeRef => target.layer >= reference.layer,
                EdgeConstraint::Unrestricted => true,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    InSample,
    /// Fit on a random `1 - frac` share of tokens, score on the rest.
    Holdout { frac: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub intercept: bool,
    pub eval: EvalMode,
    pub ridge: f64,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            intercept: true,
            eval: EvalMode::InSample,
            ridge: 0.0,
        }
    }
}

impl FitSpec {
    /// Train/eval token indices. In-sample evaluation uses all tokens for both.
    pub fn split(&self, t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        match self.eval {
            EvalMode::InSample => {
                let all: Vec<usize> = (0..t).collect();
                Ok((all.clone(), all))
            }
            EvalMode::Holdout { frac, seed } => {
                if !(frac > 0.0 && frac < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "holdout fraction must lie in (0, 1), got {frac}"
                    )));
                }
                let n_eval = ((t as f64) * frac).round() as usize;
                if n_eval < 2 || n_eval >= t {
                    return Err(Error::InsufficientSamples {
                        needed: 3,
                        available: t,
                    });
                }
                let mut perm: Vec<usize> = (0..t).collect();
                perm.shuffle(&mut rng_from_seed(seed));
                let mut eval = perm[..n_eval].to_vec();
                let mut train = perm[n_eval..].to_vec();
                eval.sort_unstable();
                train.sort_unstable();
                Ok((train, eval))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EdgeWeight {
    r2: f64,
    raw: f64,
}

/// Directed graph over heads; edge `ref -> target` carries the R² of
/// predicting `target` from `ref`. Stored weights are clamped to `[0, 1]`;
/// the unclamped value is kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct R2Graph {
    meta: ModelMeta,
    stream: Stream,
    constraint: EdgeConstraint,
    edges: BTreeMap<(HeadId, HeadId), EdgeWeight>,
}

impl R2Graph {
    pub fn new(meta: ModelMeta, stream: Stream, constraint: EdgeConstraint) -> Self {
        Self {
            meta,
            stream,
            constraint,
            edges: BTreeMap::new(),
        }
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn constraint(&self) -> EdgeConstraint {
        self.constraint
    }

    pub fn insert(&mut self, reference: HeadId, target: HeadId, raw_r2: f64) -> Result<()> {
        self.meta.head_index(reference)?;
        self.meta.head_index(target)?;
        if !self.constraint.admits(reference, target) {
            return Err(Error::InvalidArgument(format!(
                "edge {reference} -> {target} violates {:?}",
                self.constraint
            )));
        }
        if !raw_r2.is_finite() {
            return Err(Error::NonFiniteInput("edge weight"));
        }
        self.edges.insert(
            (reference, target),
            EdgeWeight {
                r2: raw_r2.clamp(0.0, 1.0),
                raw: raw_r2,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.meta.num_heads()
    }

    pub fn nodes(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.meta.heads()
    }

    pub fn contains_head(&self, id: HeadId) -> bool {
        self.meta.head_index(id).is_ok()
    }

    pub fn edge(&self, reference: HeadId, target: HeadId) -> Option<f64> {
        self.edges.get(&(reference, target)).map(|w| w.r2)
    }

    pub fn raw_edge(&self, reference: HeadId, target: HeadId) -> Option<f64> {
        self.edges.get(&(reference, target)).map(|w| w.raw)
    }

    /// `(ref, target, r2)` sorted by `(ref, target)`.
    pub fn edges(&self) -> impl Iterator<Item = (HeadId, HeadId, f64)> + '_ {
        self.edges.iter().map(|(&(r, t), w)| (r, t, w.r2))
    }

    /// Incoming edges of `target`, strongest first; ties broken by lower
    /// `(layer, head)` of the reference.
    pub fn ranked_in_edges(&self, target: HeadId) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = self
            .edges
            .iter()
            .filter(|(&(_, t), _)| t == target)
            .map(|(&(r, _), w)| (r, w.r2))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Dense in-neighbour lists indexed by head index.
    pub fn in_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (&(r, t), w) in &self.edges {
            let ri = self.meta.head_index(r).expect("validated on insert");
            let ti = self.meta.head_index(t).expect("validated on insert");
            adj[ti].push((ri, w.r2));
        }
        adj
    }

    pub fn head_at(&self, index: usize) -> HeadId {
        let h = self.meta.heads_per_layer;
        HeadId::new(index / h, index % h)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDoc {
            schema_version: GRAPH_SCHEMA_VERSION,
            meta: self.meta.clone(),
            stream: self.stream,
            constraint: self.constraint,
            edges: self
                .edges
                .iter()
                .map(|(&(reference, target), w)| EdgeDoc {
                    reference,
                    target,
                    r2: w.r2,
                    raw_r2: (w.raw != w.r2).then_some(w.raw),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(s)?;
        if doc.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "graph schema_version {} not supported",
                doc.schema_version
            )));
        }
        doc.meta.validate().map_err(Error::Format)?;
        let mut g = R2Graph::new(doc.meta, doc.stream, doc.constraint);
        for e in doc.edges {
            g.insert(e.reference, e.target, e.raw_r2.unwrap_or(e.r2))?;
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    #[serde(rename = "ref")]
    reference: HeadId,
    target: HeadId,
    r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_r2: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema_version: u32,
    meta: ModelMeta,
    stream: Stream,
    constraint: EdgeConstraint,
    edges: Vec<EdgeDoc>,
}

/// Probes every ordered pair with `layer(target) >= layer(ref)`.
pub fn probe_all(acts: &ActivationSet, stream: Stream, spec: &FitSpec) -> Result<R2Graph> {
    probe_all_with(acts, stream, spec, EdgeConstraint::TargetLayerGeRef)
}

pub fn probe_all_with(
    acts: &ActivationSet,
    stream: Stream,
    spec: &FitSpec,
    constraint: EdgeConstraint,
) -> Result<R2Graph> {
    let meta = acts.meta();
    if !acts.has_stream(stream) {
        return Err(Error::MissingStream(stream));
    }
    let (train, eval) = spec.split(meta.token_count)?;
    let needed = meta.head_dim + 2;
    if train.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            available: train.len(),
        });
    }
    let in_sample = matches!(spec.eval, EvalMode::InSample);
    let heads: Vec<HeadId> = meta.heads().collect();
    let blocks: Vec<(Matrix, Matrix)> = heads
        .iter()
        .map(|&h| {
            let m = acts.head_matrix(stream, h)?;
            let tr = if in_sample { m.clone() } else { m.select_rows(&train) };
            let ev = if in_sample { m } else { m.select_rows(&eval) };
            Ok((tr, ev))
        })
        .collect::<Result<_>>()?;

    let per_ref: Vec<Vec<(HeadId, HeadId, f64)>> = heads
        .par_iter()
        .enumerate()
        .map(|(ri, &reference)| {
            let factor = LstsqFactor::new(&blocks[ri].0, spec.intercept, spec.ridge)?;
            let mut out = Vec::new();
            for (ti, &target) in heads.iter().enumerate() {
                if !constraint.admits(reference, target) {
                    continue;
                }
                let sol = factor.solve(&blocks[ti].0)?;
                let r2 = if in_sample {
                    r2_from_sse(&blocks[ti].0, sol.residual_ss)?
                } else {
                    let pred = predict(&blocks[ri].1, &sol.weights, spec.intercept)?;
                    r2_score(&blocks[ti].1, &pred)?
                };
                out.push((reference, target, r2));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut g = R2Graph::new(meta.clone(), stream, constraint);
    for (r, t, v) in per_ref.into_iter().flatten() {
        g.insert(r, t, v)?;
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityWindow {
    /// Links spanning at most this many layers count as near.
    pub near_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityStats {
    pub near_max: usize,
    pub near_links: usize,
    pub far_links: usize,
    /// Share of total dominant-link R² mass carried by near links.
    pub near_frac: f64,
    pub far_frac: f64,
    pub near_mean_r2: Option<f64>,
    pub far_mean_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub edge_count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub frac_above: Vec<ThresholdFraction>,
    /// Share of heads whose single strongest predictor is in the same layer.
    pub best_predictor_intra_frac: f64,
    /// Share of top-5 predictor slots (pooled over heads) in the same layer.
    pub top5_intra_frac: f64,
    pub proximity: Vec<ProximityStats>,
}

/// Number of strongest incoming links per head treated as dominant.
pub const DOMINANT_LINKS: usize = 5;

pub fn graph_stats(g: &R2Graph, thresholds: &[f64], windows: &[ProximityWindow]) -> Result<GraphStats> {
    if g.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut vals: Vec<f64> = g.edges().map(|(_, _, v)| v).collect();
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    };
    let frac_above = thresholds
        .iter()
        .map(|&t| ThresholdFraction {
            threshold: t,
            fraction: vals.iter().filter(|&&v| v > t).count() as f64 / n as f64,
        })
        .collect();

    let mut best_total = 0usize;
    let mut best_intra = 0usize;
    let mut top_total = 0usize;
    let mut top_intra = 0usize;
    let mut dominant: Vec<(usize, f64)> = Vec::new();
    for target in g.nodes() {
        let ranked = g.ranked_in_edges(target);
        if let Some((best, _)) = ranked.first() {
            best_total += 1;
            best_intra += usize::from(best.layer == target.layer);
        }
        for &(r, v) in ranked.iter().take(DOMINANT_LINKS) {
            top_total += 1;
            top_intra += usize::from(r.layer == target.layer);
            dominant.push((r.layer.abs_diff(target.layer), v));
        }
    }

    let proximity = windows
        .iter()
        .map(|w| {
            let (near, far): (Vec<_>, Vec<_>) = dominant.iter().partition(|(d, _)| *d <= w.near_max);
            let mass = |xs: &[&(usize, f64)]| xs.iter().map(|(_, v)| v).sum::<f64>();
            let mean_of = |xs: &[&(usize, f64)]| (!xs.is_empty()).then(|| mass(xs) / xs.len() as f64);
            let (near_mass, far_mass) = (mass(&near), mass(&far));
            let total = near_mass + far_mass;
            let near_frac = if total > 0.0 {
                near_mass / total
            } else {
                near.len() as f64 / dominant.len() as f64
            };
            ProximityStats {
                near_max: w.near_max,
                near_links: near.len(),
                far_links: far.len(),
                near_frac,
                far_frac: 1.0 - near_frac,
                near_mean_r2: mean_of(&near),
                far_mean_r2: mean_of(&far),
            }
        })
        .collect();

    Ok(GraphStats {
        edge_count: n,
        mean,
        median,
        min: vals[0],
        max: vals[n - 1],
        frac_above,
        best_predictor_intra_frac: best_intra as f64 / best_total as f64,
        top5_intra_frac: top_intra as f64 / top_total as f64,
        proximity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actv::SourceKind;

    fn meta(layers: usize, heads: usize, dh: usize, t: usize) -> ModelMeta {
        ModelMeta::new("probe", layers, heads, dh, dh.max(4), t, SourceKind::Synthetic)
    }

    #[test]
    fn scalar_regression_matches_hand_value() {
        // x = [1,2,3,4], y = [2,1,4,3]: Sxy = 3, Sxx = Syy = 5, slope 0.6,
        // fitted [1.6,2.2,2.8,3.4], SSE = 3.2, R² = 1 - 3.2/5 = 0.36.
        let x = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let y = Matrix::from_rows(&[&[2.0], &[1.0], &[4.0], &[3.0]]);
        let set = ActivationSet::from_head_matrices(meta(1, 2, 1, 4), vec![(Stream::K, vec![x, y])]).unwrap();
        let g = probe_all(&set, Stream::K, &FitSpec::default()).unwrap();
        assert_eq!(g.len(), 2);
        let r2 = g.edge(HeadId::new(0, 0), HeadId::new(0, 1)).unwrap();
        assert!((r2 - 0.36).abs() < 1e-12, "{r2}");
        // Simple regression R² is symmetric.
        let back = g.edge(HeadId::new(0, 1), HeadId::new(0, 0)).unwrap();
        assert!((back - 0.36).abs() < 1e-12);
    }

    #[test]
    fn copy_head_gives_unit_edge() {
        let x = Matrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let set = ActivationSet::from_head_matrices(
            meta(1, 2, 2, 12),
            vec![(Stream::K, vec![x.clone(), x])],
        )
        .unwrap();
        let g = probe_all(&set, Stream::K, &FitSpec::default()).unwrap();
        assert!((g.edge(HeadId::new(0, 0), HeadId::new(0, 1)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_on_missing_stream_and_small_t() {
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let set = ActivationSet::from_head_matrices(meta(1, 2, 2, 3), vec![(Stream::K, vec![x.clone(), x])]).unwrap();
        assert!(matches!(
            probe_all(&set, Stream::V, &FitSpec::default()),
            Err(Error::MissingStream(Stream::V))
        ));
        assert!(matches!(
            probe_all(&set, Stream::K, &FitSpec::default()),
            Err(Error::InsufficientSamples { needed: 4, .. })
        ));
    }

    #[test]
    fn constraint_blocks_future_layers() {
        let mut g = R2Graph::new(meta(2, 1, 1, 4), Stream::K, EdgeConstraint::TargetLayerGeRef);
        assert!(g.insert(HeadId::new(1, 0), HeadId::new(0, 0), 0.5).is_err());
        assert!(g.insert(HeadId::new(0, 0), HeadId::new(0, 0), 0.5).is_err());
        g.insert(HeadId::new(0, 0), HeadId::new(1, 0), -0.3).unwrap();
        assert_eq!(g.edge(HeadId::new(0, 0), HeadId::new(1, 0)), Some(0.0));
        assert_eq!(g.raw_edge(HeadId::new(0, 0), HeadId::new(1, 0)), Some(-0.3));
    }

    #[test]
    fn json_round_trip_keeps_raw_values() {
        let mut g = R2Graph::new(meta(2, 2, 1, 4), Stream::V, EdgeConstraint::TargetLayerGeRef);
        g.insert(HeadId::new(0, 0), HeadId::new(1, 1), 0.25).unwrap();
        g.insert(HeadId::new(0, 1), HeadId::new(0, 0), -0.5).unwrap();
        let s = g.to_json().unwrap();
        let back = R2Graph::from_json(&s).unwrap();
        assert_eq!(back, g);
        assert!(s.find("\"ref\"").is_some());
    }

    #[test]
    fn uniform_graph_stats() {
        let mut g = R2Graph::new(meta(2, 2, 1, 4), Stream::K, EdgeConstraint::TargetLayerGeRef);
        let heads: Vec<HeadId> = g.meta().heads().collect();
        for &r in &heads {
            for &t in &heads {
                if EdgeConstraint::TargetLayerGeRef.admits(r, t) {
                    g.insert(r, t, 0.9).unwrap();
                }
            }
        }
        let s = graph_stats(&g, &[0.5], &[]).unwrap();
        assert_eq!(s.frac_above[0].fraction, 1.0);
        assert_eq!(s.median, 0.9);
        assert!(matches!(
            graph_stats(&R2Graph::new(meta(1, 1, 1, 4), Stream::K, EdgeConstraint::Unrestricted), &[], &[]),
            Err(Error::EmptyGraph)
        ));
    }
}
