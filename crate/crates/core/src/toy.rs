//! A minimal multi-head attention stack for producing Q/K/V activations at
//! desk scale.
//!
//! Each layer computes per-head projections of its input, runs softmax
//! attention (rotary position embedding on Q/K, optional causal mask),
//! mixes the concatenated head outputs through `W_O` and adds the result to
//! the residual stream. There is no MLP and no normalization.
//!
//! The `align` knob interpolates every head projection between a shared
//! rank-`s` basis per layer and an independent Gaussian draw, emulating the
//! subspace alignment seen in trained models.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::actv::{ActivationSet, ModelMeta, SourceKind, Stream, WeightSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::synth::{gaussian_matrix, rng_from_seed};

const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub tokens: usize,
    pub seed: u64,
    pub align: f64,
    /// Alignment for the V projections; `None` uses `align`.
    #[serde(default)]
    pub value_align: Option<f64>,
    pub shared_dim: usize,
    /// Record Q/K after the rotary embedding instead of before it.
    pub rope: bool,
    pub causal: bool,
}

impl ToyConfig {
    pub fn new(layers: usize, heads: usize, head_dim: usize, embed_dim: usize, tokens: usize) -> Self {
        Self {
            layers,
            heads,
            head_dim,
            embed_dim,
            tokens,
            seed: 0,
            align: 0.0,
            value_align: None,
            shared_dim: head_dim.min(embed_dim),
            rope: false,
            causal: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_align(mut self, align: f64, shared_dim: usize) -> Self {
        self.align = align;
        self.shared_dim = shared_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.tokens == 0 {
            return bad("layers, heads, head_dim and tokens must be >= 1".into());
        }
        if self.head_dim > self.embed_dim {
            return bad(format!(
                "head_dim {} exceeds embed_dim {}",
                self.head_dim, self.embed_dim
            ));
        }
        if self.shared_dim == 0 || self.shared_dim > self.embed_dim {
            return bad(format!(
                "shared_dim must lie in [1, {}], got {}",
                self.embed_dim, self.shared_dim
            ));
        }
        for a in [Some(self.align), self.value_align].into_iter().flatten() {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("align must lie in [0, 1], got {a}"));
            }
        }
        Ok(())
    }

    pub fn align_for(&self, stream: Stream) -> f64 {
        match stream.weight_stream() {
            Stream::WV => self.value_align.unwrap_or(self.align),
            _ => self.align,
        }
    }

    pub fn meta(&self) -> ModelMeta {
        let mut meta = ModelMeta::new(
            "toy",
            self.layers,
            self.heads,
            self.head_dim,
            self.embed_dim,
            self.tokens,
            SourceKind::Toy,
        );
        meta.post_rope = self.rope;
        meta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `(H * d_h) x m` output mix.
    pub w_o: Matrix,
}

impl LayerWeights {
    pub fn projections(&self, stream: Stream) -> &[Matrix] {
        match stream.weight_stream() {
            Stream::WQ => &self.w_q,
            Stream::WK => &self.w_k,
            _ => &self.w_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub layers: Vec<LayerWeights>,
}

impl ToyWeights {
    pub fn projection(&self, stream: Stream, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer].projections(stream)[head]
    }

    /// Exports the Q/K/V projections in the ACTV weight layout.
    pub fn to_weight_set(&self, cfg: &ToyConfig) -> Result<WeightSet> {
        let mut tensors = BTreeMap::new();
        for ws in [Stream::WK, Stream::WQ, Stream::WV] {
            let mut data = Vec::new();
            for layer in &self.layers {
                for w in layer.projections(ws) {
                    data.extend(w.data().iter().map(|&v| v as f32));
                }
            }
            tensors.insert(ws, data);
        }
        WeightSet::new(cfg.meta(), tensors)
    }
}

const STREAM_ORDER: [Stream; 3] = [Stream::Q, Stream::K, Stream::V];

/// Every entry i.i.d. `N(0, 1/m)`.
pub fn build_random(cfg: &ToyConfig) -> Result<ToyWeights> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let (m, dh, h) = (cfg.embed_dim, cfg.head_dim, cfg.heads);
    let std = 1.0 / (m as f64).sqrt();
    let layers = (0..cfg.layers)
        .map(|_| {
            let mut per_stream: Vec<Vec<Matrix>> = STREAM_ORDER
                .iter()
                .map(|_| (0..h).map(|_| gaussian_matrix(&mut rng, m, dh, std)).collect())
                .collect();
            let w_o = gaussian_matrix(&mut rng, h * dh, m, std);
            let w_v = per_stream.pop().unwrap();
            let w_k = per_stream.pop().unwrap();
            let w_q = per_stream.pop().unwrap();
            LayerWeights { w_q, w_k, w_v, w_o }
        })
        .collect();
    Ok(ToyWeights { layers })
}

/// `W = align * U M_h + (1 - align) * G_h` per head, with `U` an orthonormal
/// `m x s` basis drawn once per layer and stream, `M_h ~ N(0, 1/s)` and
/// `G_h ~ N(0, 1/m)`. Both terms have unit expected column norm, so
/// `align = 0` is `build_random` in distribution.
///
/// The random draws do not depend on `align`: configs differing only in
/// `align` share `U`, `M_h` and `G_h`.
pub fn build_aligned(cfg: &ToyConfig) -> Result<ToyWeights> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let (m, dh, h, s) = (cfg.embed_dim, cfg.head_dim, cfg.heads, cfg.shared_dim);
    let gstd = 1.0 / (m as f64).sqrt();
    let mstd = 1.0 / (s as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut per_stream = Vec::with_capacity(3);
        for stream in STREAM_ORDER {
            let a = cfg.align_for(stream);
            let basis = gaussian_matrix(&mut rng, m, s, 1.0).to_na().qr().q();
            let heads: Vec<Matrix> = (0..h)
                .map(|_| {
                    let mix = gaussian_matrix(&mut rng, s, dh, mstd).to_na();
                    let noise = gaussian_matrix(&mut rng, m, dh, gstd).to_na();
                    Matrix::from_na(&((&basis * mix) * a + noise * (1.0 - a)))
                })
                .collect();
            per_stream.push(heads);
        }
        let w_o = gaussian_matrix(&mut rng, h * dh, m, gstd);
        let w_v = per_stream.pop().unwrap();
        let w_k = per_stream.pop().unwrap();
        let w_q = per_stream.pop().unwrap();
        layers.push(LayerWeights { w_q, w_k, w_v, w_o });
    }
    Ok(ToyWeights { layers })
}

/// Token embeddings `x ~ N(0, I_m)`.
pub fn gaussian_inputs(tokens: usize, embed_dim: usize, seed: u64) -> Matrix {
    gaussian_matrix(&mut rng_from_seed(seed), tokens, embed_dim, 1.0)
}

/// Rotates consecutive coordinate pairs `(2i, 2i+1)` of every row by
/// `pos * base^(-2i/d)`, with `pos` the row index. An odd trailing
/// coordinate is left untouched.
pub fn apply_rope(x: &Matrix) -> Matrix {
    let d = x.cols();
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        for i in 0..d / 2 {
            let theta = t as f64 * ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
    out
}

/// Per-head Q/K/V states of one layer, in the representation that gets
/// recorded (post-rotary for Q/K when `ToyConfig::rope` is set).
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl LayerStates {
    pub fn stream(&self, stream: Stream) -> &[Matrix] {
        match stream {
            Stream::Q => &self.q,
            Stream::K => &self.k,
            _ => &self.v,
        }
    }

    pub fn stream_mut(&mut self, stream: Stream) -> &mut Vec<Matrix> {
        match stream {
            Stream::Q => &mut self.q,
            Stream::K => &mut self.k,
            _ => &mut self.v,
        }
    }
}

/// Output of a traced forward pass.
#[derive(Debug, Clone)]
pub struct ToyTrace {
    pub activations: ActivationSet,
    /// Per layer, the attention block output `concat(heads) * W_O` (`T x m`).
    pub attention_out: Vec<Matrix>,
}

pub fn forward(weights: &ToyWeights, cfg: &ToyConfig, x0: &Matrix) -> Result<ActivationSet> {
    Ok(forward_traced(weights, cfg, x0, |_, _| Ok(()))?.activations)
}

/// Forward pass that hands each layer's freshly computed states to `hook`
/// before attention runs. The hook may overwrite states; attention and the
/// recorded activations then use the overwritten values.
pub fn forward_traced<F>(weights: &ToyWeights, cfg: &ToyConfig, x0: &Matrix, mut hook: F) -> Result<ToyTrace>
where
    F: FnMut(usize, &mut LayerStates) -> Result<()>,
{
    cfg.validate()?;
    let (t, m, h, dh) = (cfg.tokens, cfg.embed_dim, cfg.heads, cfg.head_dim);
    if x0.shape() != (t, m) {
        return Err(Error::InvalidShape(format!(
            "input is {}x{}, config expects {t}x{m}",
            x0.rows(),
            x0.cols()
        )));
    }
    if weights.layers.len() != cfg.layers {
        return Err(Error::InvalidShape(format!(
            "weights have {} layers, config {}",
            weights.layers.len(),
            cfg.layers
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = x0.to_na();
    let mut recorded: Vec<(Stream, Vec<Matrix>)> =
        STREAM_ORDER.iter().map(|&s| (s, Vec::with_capacity(cfg.layers * h))).collect();
    let mut attention_out = Vec::with_capacity(cfg.layers);

    for (layer_idx, lw) in weights.layers.iter().enumerate() {
        let project = |ws: &[Matrix], rotate: bool| -> Vec<Matrix> {
            ws.iter()
                .map(|w| {
                    let p = Matrix::from_na(&(&x * w.to_na()));
                    if rotate {
                        apply_rope(&p)
                    } else {
                        p
                    }
                })
                .collect()
        };
        let mut states = LayerStates {
            q: project(&lw.w_q, cfg.rope),
            k: project(&lw.w_k, cfg.rope),
            v: project(&lw.w_v, false),
        };
        hook(layer_idx, &mut states)?;

        let mut concat = DMatrix::<f64>::zeros(t, h * dh);
        for head in 0..h {
            let (q, k) = if cfg.rope {
                (states.q[head].to_na(), states.k[head].to_na())
            } else {
                (apply_rope(&states.q[head]).to_na(), apply_rope(&states.k[head]).to_na())
            };
            let mut scores = q * k.transpose() * scale;
            softmax_rows(&mut scores, cfg.causal);
            let out = scores * states.v[head].to_na();
            concat.columns_mut(head * dh, dh).copy_from(&out);
        }
        let attn = concat * lw.w_o.to_na();
        x += &attn;
        attention_out.push(Matrix::from_na(&attn));
        for (s, rec) in recorded.iter_mut() {
            rec.extend(states.stream(*s).iter().cloned());
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("toy forward state"));
    }
    let activations = ActivationSet::from_head_matrices(cfg.meta(), recorded)?;
    Ok(ToyTrace {
        activations,
        attention_out,
    })
}

fn softmax_rows(scores: &mut DMatrix<f64>, causal: bool) {
    let n = scores.ncols();
    for i in 0..scores.nrows() {
        let limit = if causal { (i + 1).min(n) } else { n };
        let mut max = f64::NEG_INFINITY;
        for j in 0..limit {
            max = max.max(scores[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..n {
            let e = if j < limit { (scores[(i, j)] - max).exp() } else { 0.0 };
            scores[(i, j)] = e;
            sum += e;
        }
        for j in 0..limit {
            scores[(i, j)] /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actv::HeadId;
    use crate::linalg::{numerical_rank, DEFAULT_RANK_RTOL};

    #[test]
    fn random_weights_deterministic_with_expected_variance() {
        let cfg = ToyConfig::new(2, 4, 16, 256, 8).with_seed(5);
        let a = build_random(&cfg).unwrap();
        assert_eq!(a, build_random(&cfg).unwrap());
        let all: Vec<f64> = a
            .layers
            .iter()
            .flat_map(|l| {
                l.w_q
                    .iter()
                    .chain(&l.w_k)
                    .chain(&l.w_v)
                    .chain(std::iter::once(&l.w_o))
                    .flat_map(|w| w.data().iter().copied())
            })
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 / 256.0;
        assert!((var - target).abs() < 0.05 * target, "var {var}");
    }

    #[test]
    fn random_k_block_has_no_overlap() {
        let cfg = ToyConfig::new(2, 4, 8, 64, 4).with_seed(1);
        let w = build_random(&cfg).unwrap();
        for layer in &w.layers {
            let blocks: Vec<&Matrix> = layer.w_k.iter().collect();
            let concat = Matrix::hcat(&blocks).unwrap();
            assert_eq!(numerical_rank(&concat, DEFAULT_RANK_RTOL).unwrap(), 32);
        }
    }

    #[test]
    fn aligned_full_alignment_rank() {
        // s >= d_h: each head has rank d_h, all inside a rank-s space.
        let cfg = ToyConfig::new(2, 4, 8, 64, 4).with_seed(2).with_align(1.0, 12);
        let w = build_aligned(&cfg).unwrap();
        for layer in &w.layers {
            let blocks: Vec<&Matrix> = layer.w_k.iter().collect();
            let concat = Matrix::hcat(&blocks).unwrap();
            assert_eq!(numerical_rank(&concat, 1e-8).unwrap(), 12);
            for b in &blocks {
                assert_eq!(numerical_rank(b, 1e-8).unwrap(), 8);
            }
        }
    }

    #[test]
    fn single_layer_k_is_plain_projection() {
        let cfg = ToyConfig::new(1, 3, 4, 12, 6).with_seed(3);
        let w = build_random(&cfg).unwrap();
        let x0 = gaussian_inputs(6, 12, 4);
        let acts = forward(&w, &cfg, &x0).unwrap();
        for head in 0..3 {
            let want = x0.matmul(w.projection(Stream::K, 0, head)).unwrap();
            let got = acts.head_matrix(Stream::K, HeadId::new(0, head)).unwrap();
            for (a, b) in want.data().iter().zip(got.data()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn one_token_attention_routes_value() {
        let cfg = ToyConfig::new(1, 2, 3, 8, 1).with_seed(11);
        let w = build_random(&cfg).unwrap();
        let x0 = gaussian_inputs(1, 8, 12);
        let trace = forward_traced(&w, &cfg, &x0, |_, _| Ok(())).unwrap();
        let l = &w.layers[0];
        let v: Vec<Matrix> = l.w_v.iter().map(|wv| x0.matmul(wv).unwrap()).collect();
        let concat = Matrix::hcat(&v.iter().collect::<Vec<_>>()).unwrap();
        let want = concat.matmul(&l.w_o).unwrap();
        for (a, b) in want.data().iter().zip(trace.attention_out[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_flag_leaves_values_untouched() {
        let mut cfg = ToyConfig::new(2, 2, 4, 16, 5).with_seed(8);
        let w = build_random(&cfg).unwrap();
        let x0 = gaussian_inputs(5, 16, 9);
        let plain = forward(&w, &cfg, &x0).unwrap();
        cfg.rope = true;
        let rotated = forward(&w, &cfg, &x0).unwrap();
        assert_eq!(plain.raw(Stream::V).unwrap(), rotated.raw(Stream::V).unwrap());
        assert_ne!(plain.raw(Stream::K).unwrap(), rotated.raw(Stream::K).unwrap());
        assert!(rotated.meta().post_rope);
    }

    #[test]
    fn rope_preserves_norms_and_position_zero() {
        let x = gaussian_inputs(4, 5, 1);
        let r = apply_rope(&x);
        assert_eq!(r.row(0), x.row(0));
        for t in 0..4 {
            let a: f64 = x.row(t).iter().map(|v| v * v).sum();
            let b: f64 = r.row(t).iter().map(|v| v * v).sum();
            assert!((a - b).abs() < 1e-12);
            assert_eq!(r.get(t, 4), x.get(t, 4));
        }
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let mut cfg = ToyConfig::new(1, 1, 4, 8, 2);
        cfg.align = 1.5;
        assert!(build_aligned(&cfg).is_err());
        let cfg = ToyConfig::new(1, 1, 4, 8, 2);
        let w = build_random(&cfg).unwrap();
        assert!(matches!(
            forward(&w, &cfg, &Matrix::zeros(3, 8)),
            Err(Error::InvalidShape(_))
        ));
    }
}
