//! Multivariate linear predictors from several reference heads to a target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{ActivationSet, HeadId, Stream};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, predict, r2_from_sse, r2_score, Matrix};
use crate::probe::{EvalMode, FitSpec, R2Graph, ThresholdFraction};

/// Default upper end of the reference-count sweep.
pub const DEFAULT_MAX_REFS: usize = 5;

pub const CURVE_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub stream: Stream,
    pub target: HeadId,
    pub refs: Vec<HeadId>,
    pub intercept: bool,
    /// `(n * d_h [+1]) x d_h`; row blocks follow the order of `refs`.
    pub weights: Matrix,
    /// In-sample R² on the fitting tokens.
    pub fit_r2: f64,
    /// R² on held-out tokens, when fitted with a holdout split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_r2: Option<f64>,
}

impl LinearPredictor {
    /// Reconstructs the target from column-concatenated reference states.
    pub fn apply(&self, refs_concat: &Matrix) -> Result<Matrix> {
        predict(refs_concat, &self.weights, self.intercept)
    }

    /// The score a sweep aggregates: held-out R² when available.
    pub fn score(&self) -> f64 {
        self.eval_r2.unwrap_or(self.fit_r2)
    }
}

/// The `n` strongest in-neighbours of `target`, ordered by
/// `(r2 desc, layer asc, head asc)`.
pub fn select_top_n(g: &R2Graph, target: HeadId, n: usize) -> Result<Vec<HeadId>> {
    if !g.contains_head(target) {
        return Err(Error::UnknownHead(target));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("N must be >= 1".into()));
    }
    Ok(g.ranked_in_edges(target)
        .into_iter()
        .take(n)
        .map(|(h, _)| h)
        .collect())
}

pub fn fit_predictor(
    acts: &ActivationSet,
    stream: Stream,
    target: HeadId,
    refs: &[HeadId],
    spec: &FitSpec,
) -> Result<LinearPredictor> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("at least one reference head required".into()));
    }
    for (i, r) in refs.iter().enumerate() {
        if *r == target {
            return Err(Error::InvalidArgument(format!("{target} listed as its own reference")));
        }
        if refs[..i].contains(r) {
            return Err(Error::InvalidArgument(format!("reference {r} listed twice")));
        }
    }
    let meta = acts.meta();
    let (train, eval) = spec.split(meta.token_count)?;
    let needed = refs.len() * meta.head_dim + 2;
    if train.len() < needed && spec.ridge == 0.0 {
        return Err(Error::InsufficientSamples {
            needed,
            available: train.len(),
        });
    }
    let x_all = acts.concat_heads(stream, refs)?;
    let y_all = acts.head_matrix(stream, target)?;
    let holdout = matches!(spec.eval, EvalMode::Holdout { .. });
    let (x, y) = if holdout {
        (x_all.select_rows(&train), y_all.select_rows(&train))
    } else {
        (x_all.clone(), y_all.clone())
    };
    let sol = lstsq(&x, &y, spec.intercept, spec.ridge)?;
    let fit_r2 = r2_from_sse(&y, sol.residual_ss)?.clamp(0.0, 1.0);
    let eval_r2 = if holdout {
        let pred = predict(&x_all.select_rows(&eval), &sol.weights, spec.intercept)?;
        Some(r2_score(&y_all.select_rows(&eval), &pred)?)
    } else {
        None
    };
    Ok(LinearPredictor {
        stream,
        target,
        refs: refs.to_vec(),
        intercept: spec.intercept,
        weights: sol.weights,
        fit_r2,
        eval_r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mean_r2: f64,
    pub median_r2: f64,
    pub frac_above: Vec<ThresholdFraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCurve {
    pub target: HeadId,
    /// Score per entry of the swept `N` list; the reference list may be
    /// shorter than `N` when the target has fewer in-neighbours.
    pub r2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Curve {
    pub stream: Stream,
    pub points: Vec<CurvePoint>,
    pub per_target: Vec<TargetCurve>,
}

impl R2Curve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean_r2,median_r2");
        if let Some(p) = self.points.first() {
            for f in &p.frac_above {
                out.push_str(&format!(",frac_above_{}", f.threshold));
            }
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}", p.n, p.mean_r2, p.median_r2));
            for f in &p.frac_above {
                out.push_str(&format!(",{}", f.fraction));
            }
            out.push('\n');
        }
        out
    }
}

/// Fits every head (with at least one in-neighbour) from its top-`N`
/// references for each `N` in `ns`, and aggregates the scores per `N`.
pub fn sweep_n(acts: &ActivationSet, stream: Stream, g: &R2Graph, ns: &[usize], spec: &FitSpec) -> Result<R2Curve> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidArgument("N list must be nonempty and >= 1".into()));
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("N list must be strictly ascending".into()));
    }
    if !acts.has_stream(stream) {
        return Err(Error::MissingStream(stream));
    }
    let targets: Vec<HeadId> = g.nodes().filter(|&t| !g.ranked_in_edges(t).is_empty()).collect();
    if targets.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let per_target: Vec<TargetCurve> = targets
        .par_iter()
        .map(|&target| {
            let r2 = ns
                .iter()
                .map(|&n| {
                    let refs = select_top_n(g, target, n)?;
                    Ok(fit_predictor(acts, stream, target, &refs, spec)?.score())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(TargetCurve { target, r2 })
        })
        .collect::<Result<_>>()?;

    let points = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut vals: Vec<f64> = per_target.iter().map(|c| c.r2[i]).collect();
            vals.sort_by(f64::total_cmp);
            let k = vals.len();
            let median_r2 = if k % 2 == 1 {
                vals[k / 2]
            } else {
                0.5 * (vals[k / 2 - 1] + vals[k / 2])
            };
            CurvePoint {
                n,
                mean_r2: vals.iter().sum::<f64>() / k as f64,
                median_r2,
                frac_above: CURVE_THRESHOLDS
                    .iter()
                    .map(|&t| ThresholdFraction {
                        threshold: t,
                        fraction: vals.iter().filter(|&&v| v > t).count() as f64 / k as f64,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(R2Curve {
        stream,
        points,
        per_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actv::{ModelMeta, SourceKind};
    use crate::probe::EdgeConstraint;
    use crate::synth::{gaussian_matrix, rng_from_seed};

    fn graph_with(edges: &[((usize, usize), (usize, usize), f64)]) -> R2Graph {
        let meta = ModelMeta::new("g", 3, 4, 2, 4, 8, SourceKind::Synthetic);
        let mut g = R2Graph::new(meta, Stream::K, EdgeConstraint::TargetLayerGeRef);
        for &((rl, rh), (tl, th), v) in edges {
            g.insert(HeadId::new(rl, rh), HeadId::new(tl, th), v).unwrap();
        }
        g
    }

    #[test]
    fn top_n_orders_by_strength() {
        let g = graph_with(&[((0, 0), (1, 0), 0.5), ((0, 1), (1, 0), 0.9), ((1, 1), (1, 0), 0.2)]);
        let top = select_top_n(&g, HeadId::new(1, 0), 2).unwrap();
        assert_eq!(top, vec![HeadId::new(0, 1), HeadId::new(0, 0)]);
        assert_eq!(select_top_n(&g, HeadId::new(1, 0), 10).unwrap().len(), 3);
    }

    #[test]
    fn top_n_tie_prefers_lower_head() {
        let g = graph_with(&[((1, 2), (2, 0), 0.7), ((0, 3), (2, 0), 0.7), ((1, 1), (2, 0), 0.7)]);
        let top = select_top_n(&g, HeadId::new(2, 0), 3).unwrap();
        assert_eq!(top, vec![HeadId::new(0, 3), HeadId::new(1, 1), HeadId::new(1, 2)]);
    }

    #[test]
    fn top_n_unknown_head() {
        let g = graph_with(&[]);
        assert!(matches!(
            select_top_n(&g, HeadId::new(7, 0), 1),
            Err(Error::UnknownHead(_))
        ));
    }

    fn set_from(heads: Vec<Matrix>, dh: usize) -> ActivationSet {
        let t = heads[0].rows();
        let meta = ModelMeta::new("p", 1, heads.len(), dh, dh.max(2), t, SourceKind::Synthetic);
        ActivationSet::from_head_matrices(meta, vec![(Stream::K, heads)]).unwrap()
    }

    #[test]
    fn exact_mix_and_copy_fit_perfectly() {
        let mut rng = rng_from_seed(4);
        let a = gaussian_matrix(&mut rng, 40, 3, 1.0);
        let b = gaussian_matrix(&mut rng, 40, 3, 1.0);
        let ca = gaussian_matrix(&mut rng, 3, 3, 1.0);
        let cb = gaussian_matrix(&mut rng, 3, 3, 1.0);
        let mix = Matrix::hcat(&[&a, &b])
            .unwrap()
            .matmul(&Matrix::from_fn(6, 3, |i, j| if i < 3 { ca.get(i, j) } else { cb.get(i - 3, j) }))
            .unwrap();
        let set = set_from(vec![a.clone(), b, mix, a], 3);
        let spec = FitSpec::default();
        let p = fit_predictor(&set, Stream::K, HeadId::new(0, 2), &[HeadId::new(0, 0), HeadId::new(0, 1)], &spec).unwrap();
        assert!((p.fit_r2 - 1.0).abs() < 1e-6, "{}", p.fit_r2);
        let copy = fit_predictor(&set, Stream::K, HeadId::new(0, 3), &[HeadId::new(0, 0)], &spec).unwrap();
        assert!((copy.fit_r2 - 1.0).abs() < 1e-9);
        assert_eq!(p.weights.shape(), (7, 3));
    }

    #[test]
    fn too_few_tokens_without_ridge() {
        let mut rng = rng_from_seed(1);
        let heads = (0..3).map(|_| gaussian_matrix(&mut rng, 6, 2, 1.0)).collect();
        let set = set_from(heads, 2);
        let refs = [HeadId::new(0, 0), HeadId::new(0, 1)];
        let spec = FitSpec::default();
        // n * d_h + 2 = 6 tokens is exactly enough.
        assert!(fit_predictor(&set, Stream::K, HeadId::new(0, 2), &refs, &spec).is_ok());
        let ridge = FitSpec { ridge: 0.1, ..spec };
        let mut rng = rng_from_seed(2);
        let heads = (0..3).map(|_| gaussian_matrix(&mut rng, 5, 2, 1.0)).collect();
        let small = set_from(heads, 2);
        assert!(matches!(
            fit_predictor(&small, Stream::K, HeadId::new(0, 2), &refs, &spec),
            Err(Error::InsufficientSamples { needed: 6, available: 5 })
        ));
        assert!(fit_predictor(&small, Stream::K, HeadId::new(0, 2), &refs, &ridge).is_ok());
    }

    #[test]
    fn rejects_self_and_duplicate_refs() {
        let mut rng = rng_from_seed(3);
        let heads = (0..2).map(|_| gaussian_matrix(&mut rng, 10, 2, 1.0)).collect();
        let set = set_from(heads, 2);
        let spec = FitSpec::default();
        let t = HeadId::new(0, 1);
        assert!(fit_predictor(&set, Stream::K, t, &[t], &spec).is_err());
        let r = HeadId::new(0, 0);
        assert!(fit_predictor(&set, Stream::K, t, &[r, r], &spec).is_err());
        assert!(fit_predictor(&set, Stream::K, t, &[], &spec).is_err());
    }
}
