//! Overlap dimension of per-head projection matrices.
//!
//! For one layer and stream, `od = sum_i rank(W_i) - rank([W_1 .. W_H])`:
//! the number of column-space directions that heads share.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{HeadId, Stream, WeightSet};
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, Matrix};
use crate::toy::{build_aligned, ToyConfig, ToyWeights};

pub const DEFAULT_OD_RTOL: f64 = 1e-8;

/// Anything that can hand out `m x d_h` projections per head.
pub trait HeadProjections: Sync {
    fn num_layers(&self) -> usize;
    fn heads_per_layer(&self) -> usize;
    fn projection(&self, stream: Stream, layer: usize, head: usize) -> Result<Matrix>;
}

impl HeadProjections for ToyWeights {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn heads_per_layer(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w_k.len())
    }

    fn projection(&self, stream: Stream, layer: usize, head: usize) -> Result<Matrix> {
        Ok(ToyWeights::projection(self, stream, layer, head).clone())
    }
}

impl HeadProjections for WeightSet {
    fn num_layers(&self) -> usize {
        self.meta().num_layers
    }

    fn heads_per_layer(&self) -> usize {
        self.meta().heads_per_layer
    }

    fn projection(&self, stream: Stream, layer: usize, head: usize) -> Result<Matrix> {
        self.head_projection(stream, HeadId::new(layer, head))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: usize,
    pub od: usize,
    pub head_ranks: Vec<usize>,
    pub concat_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub stream: Stream,
    pub rtol: f64,
    pub layers: Vec<LayerOverlap>,
}

impl OverlapReport {
    pub fn mean_od(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.od as f64).sum::<f64>() / self.layers.len() as f64
    }
}

fn layer_overlap(heads: &[Matrix], layer: usize, rtol: f64) -> Result<LayerOverlap> {
    if heads.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFiniteInput("projection weights"));
    }
    let head_ranks = heads
        .iter()
        .map(|h| numerical_rank(h, rtol))
        .collect::<Result<Vec<usize>>>()?;
    let refs: Vec<&Matrix> = heads.iter().collect();
    let concat_rank = numerical_rank(&Matrix::hcat(&refs)?, rtol)?;
    let total: usize = head_ranks.iter().sum();
    Ok(LayerOverlap {
        layer,
        // Never negative in exact arithmetic; saturate against tolerance noise.
        od: total.saturating_sub(concat_rank),
        head_ranks,
        concat_rank,
    })
}

pub fn overlap_dimension<W: HeadProjections + ?Sized>(weights: &W, stream: Stream, rtol: f64) -> Result<OverlapReport> {
    if rtol.is_nan() || rtol <= 0.0 {
        return Err(Error::InvalidArgument(format!("rtol must be > 0, got {rtol}")));
    }
    let stream = stream.weight_stream();
    let layers = (0..weights.num_layers())
        .into_par_iter()
        .map(|l| {
            let heads = (0..weights.heads_per_layer())
                .map(|h| weights.projection(stream, l, h))
                .collect::<Result<Vec<_>>>()?;
            layer_overlap(&heads, l, rtol)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapReport { stream, rtol, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub align: f64,
    pub seed: u64,
    pub mean_od: f64,
}

/// Mean OD over layers for each config, built with [`build_aligned`].
pub fn od_sweep(configs: &[ToyConfig], stream: Stream, rtol: f64) -> Result<Vec<SweepPoint>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("od_sweep needs at least one config".into()));
    }
    configs
        .par_iter()
        .map(|cfg| {
            let w = build_aligned(cfg)?;
            Ok(SweepPoint {
                align: cfg.align_for(stream),
                seed: cfg.seed,
                mean_od: overlap_dimension(&w, stream, rtol)?.mean_od(),
            })
        })
        .collect()
}

/// Averages sweep points that share an `align` value, in first-seen order.
pub fn mean_by_align(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for p in points {
        match groups.iter_mut().find(|g| g.0 == p.align) {
            Some(g) => {
                g.1 += p.mean_od;
                g.2 += 1;
            }
            None => groups.push((p.align, p.mean_od, 1)),
        }
    }
    groups.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation as the Pearson correlation of average ranks.
/// `None` when fewer than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
