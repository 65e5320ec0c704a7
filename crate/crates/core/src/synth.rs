//! Seeded synthetic activation generators and token subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::actv::{ActivationSet, ModelMeta, SourceKind, Stream};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child seed number `index` of `seed`, for splitting one run
/// seed across components or trials.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(index);
    rng.random()
}

/// `rows x cols` matrix of i.i.d. `N(0, std^2)` draws, filled row-major.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn check_streams(streams: &[Stream]) -> Result<()> {
    if streams.is_empty() {
        return Err(Error::InvalidArgument("at least one stream required".into()));
    }
    if let Some(s) = streams.iter().find(|s| s.is_weight()) {
        return Err(Error::InvalidArgument(format!("{s} is not an activation stream")));
    }
    Ok(())
}

/// Random-projection activations: token embeddings `x ~ N(0, I_m)` shared by
/// every head, and an independent `N(0, 1/m)` projection per
/// `(stream, layer, head)`.
pub fn gen_gaussian_activations(meta: &ModelMeta, streams: &[Stream], seed: u64) -> Result<ActivationSet> {
    meta.validate().map_err(Error::InvalidArgument)?;
    check_streams(streams)?;
    let mut meta = meta.clone();
    meta.source = SourceKind::Synthetic;
    let mut rng = rng_from_seed(seed);
    let x = gaussian_matrix(&mut rng, meta.token_count, meta.embed_dim, 1.0);
    let wstd = 1.0 / (meta.embed_dim as f64).sqrt();
    let mut blocks = Vec::new();
    for &s in streams {
        let mut heads = Vec::with_capacity(meta.num_heads());
        for _ in 0..meta.num_heads() {
            let w = gaussian_matrix(&mut rng, meta.embed_dim, meta.head_dim, wstd);
            heads.push(x.matmul(&w)?);
        }
        blocks.push((s, heads));
    }
    ActivationSet::from_head_matrices(meta, blocks)
}

/// Activations in which every head of a layer is an invertible linear image
/// of one shared `T x d_h` latent, so any same-layer head reconstructs any
/// other exactly. Latents are independent across layers and streams.
pub fn gen_exact_linear(meta: &ModelMeta, streams: &[Stream], seed: u64) -> Result<ActivationSet> {
    meta.validate().map_err(Error::InvalidArgument)?;
    check_streams(streams)?;
    let mut meta = meta.clone();
    meta.source = SourceKind::Synthetic;
    let mut rng = rng_from_seed(seed);
    let dh = meta.head_dim;
    let mix_std = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::new();
    for &s in streams {
        let mut heads = Vec::with_capacity(meta.num_heads());
        for _ in 0..meta.num_layers {
            let z = gaussian_matrix(&mut rng, meta.token_count, dh, 1.0);
            for _ in 0..meta.heads_per_layer {
                let mix = gaussian_matrix(&mut rng, dh, dh, mix_std);
                heads.push(z.matmul(&mix)?);
            }
        }
        blocks.push((s, heads));
    }
    ActivationSet::from_head_matrices(meta, blocks)
}

/// Sorted indices of `n` distinct tokens drawn uniformly without replacement.
pub fn sample_token_indices(t: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > t {
        return Err(Error::InvalidArgument(format!(
            "cannot subsample {n} tokens from T={t}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut idx = rand::seq::index::sample(&mut rng, t, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps `n` randomly chosen tokens (same indices for every head and stream),
/// preserving their original order.
pub fn subsample_tokens(set: &ActivationSet, n: usize, seed: u64) -> Result<ActivationSet> {
    let idx = sample_token_indices(set.meta().token_count, n, seed)?;
    set.select_tokens(&idx)
}
