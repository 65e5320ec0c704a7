use std::collections::BTreeMap;

use headlink::actv::{decode_actv, encode_actv, ActivationSet, HeadId, ModelMeta, SourceKind, Stream};
use headlink::linalg::{lstsq, numerical_rank, predict, projector_residual, r2_from_sse, Matrix, DEFAULT_RANK_RTOL};
use headlink::predictor::fit_predictor;
use headlink::probe::{graph_stats, EdgeConstraint, FitSpec, ProximityWindow, R2Graph};
use headlink::selection::{select_targets, verify_selection, SelectionParams};
use headlink::subspace::{overlap_dimension, spearman, HeadProjections, DEFAULT_OD_RTOL};
use headlink::synth::{gaussian_matrix, gen_gaussian_activations, rng_from_seed};
use headlink::theory::{sample_pair, trial, trial_with, TrialOptions};
use headlink::Result;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn gauss(seed: u64, r: usize, c: usize) -> Matrix {
    gaussian_matrix(&mut rng_from_seed(seed), r, c, 1.0)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

struct Heads(Vec<Vec<Matrix>>);

impl HeadProjections for Heads {
    fn num_layers(&self) -> usize {
        self.0.len()
    }

    fn heads_per_layer(&self) -> usize {
        self.0[0].len()
    }

    fn projection(&self, _: Stream, layer: usize, head: usize) -> Result<Matrix> {
        Ok(self.0[layer][head].clone())
    }
}

fn random_graph(seed: u64, layers: usize, heads: usize, density: f64) -> R2Graph {
    let meta = ModelMeta::new("fuzz", layers, heads, 1, 1, 4, SourceKind::Synthetic);
    let mut g = R2Graph::new(meta.clone(), Stream::K, EdgeConstraint::TargetLayerGeRef);
    let mut rng = rng_from_seed(seed);
    for r in meta.heads() {
        for t in meta.heads() {
            if r != t && t.layer >= r.layer && rng.random_bool(density) {
                g.insert(r, t, rng.random::<f64>()).unwrap();
            }
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lstsq_residual_is_consistent(seed: u64, t in 4usize..40, p in 1usize..6, d in 1usize..4, intercept: bool) {
        let x = gauss(seed, t, p);
        let y = gauss(seed ^ 1, t, d);
        let sol = lstsq(&x, &y, intercept, 0.0).unwrap();
        let resid = y.sub(&predict(&x, &sol.weights, intercept).unwrap()).unwrap().frobenius_sq();
        prop_assert!(close(sol.residual_ss, resid, 1e-9));
        if intercept && t >= 2 {
            let r2 = r2_from_sse(&y, sol.residual_ss).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&r2));
        }
    }

    #[test]
    fn projector_residual_equals_lstsq(seed: u64, m in 2usize..24, k in 1usize..6, d in 1usize..5) {
        let a = gauss(seed, m, k);
        let b = gauss(seed ^ 7, m, d);
        let want = lstsq(&a, &b, false, 0.0).unwrap().residual_ss;
        prop_assert!(close(projector_residual(&a, &b).unwrap(), want, 1e-8));
    }

    #[test]
    fn r2_is_affine_invariant(seed: u64, scale in 0.1f64..10.0, neg: bool, shift in -5.0f64..5.0) {
        let x = gauss(seed, 30, 3);
        let y = gauss(seed ^ 3, 30, 2);
        let r2 = |x: &Matrix, y: &Matrix| {
            r2_from_sse(y, lstsq(x, y, true, 0.0).unwrap().residual_ss).unwrap()
        };
        let s = if neg { -scale } else { scale };
        let y2 = Matrix::from_fn(30, 2, |i, j| s * y.get(i, j) + shift);
        let x2 = Matrix::from_fn(30, 3, |i, j| x.get(i, j) * (j + 1) as f64 - shift);
        prop_assert!(close(r2(&x, &y), r2(&x, &y2), 1e-9));
        prop_assert!(close(r2(&x, &y), r2(&x2, &y), 1e-9));
    }

    #[test]
    fn rank_of_transpose_and_products(seed: u64, r in 1usize..20, c in 1usize..20, k in 1usize..8) {
        let m = gauss(seed, r, c);
        prop_assert_eq!(
            numerical_rank(&m, DEFAULT_RANK_RTOL).unwrap(),
            numerical_rank(&m.transpose(), DEFAULT_RANK_RTOL).unwrap()
        );
        let low = gauss(seed, r, k).matmul(&gauss(seed ^ 5, k, c)).unwrap();
        prop_assert_eq!(numerical_rank(&low, DEFAULT_RANK_RTOL).unwrap(), k.min(r).min(c));
    }

    #[test]
    fn nested_refs_never_lower_r2(seed: u64) {
        let meta = ModelMeta::new("n", 1, 6, 3, 8, 40, SourceKind::Synthetic);
        let acts = gen_gaussian_activations(&meta, &[Stream::K], seed).unwrap();
        let mut refs: Vec<HeadId> = (1..6).map(|h| HeadId::new(0, h)).collect();
        refs.shuffle(&mut rng_from_seed(seed));
        let target = HeadId::new(0, 0);
        let spec = FitSpec::default();
        let mut last = 0.0;
        for n in 1..=refs.len() {
            let r2 = fit_predictor(&acts, Stream::K, target, &refs[..n], &spec).unwrap().fit_r2;
            prop_assert!(r2 >= last - 1e-9);
            last = r2;
        }
        let mut perm = refs.clone();
        perm.reverse();
        let a = fit_predictor(&acts, Stream::K, target, &refs, &spec).unwrap().fit_r2;
        let b = fit_predictor(&acts, Stream::K, target, &perm, &spec).unwrap().fit_r2;
        prop_assert!(close(a, b, 1e-9));
    }

    #[test]
    fn od_ignores_head_mixing_and_order(seed: u64, heads in 2usize..5, dh in 1usize..4, shared in 1usize..6) {
        let m = 12;
        let mut rng = rng_from_seed(seed);
        // Heads drawn partly from a shared basis so OD is nontrivial.
        let basis = gaussian_matrix(&mut rng, m, shared, 1.0);
        let layer: Vec<Matrix> = (0..heads)
            .map(|h| {
                if h % 2 == 0 {
                    basis.matmul(&gaussian_matrix(&mut rng, shared, dh, 1.0)).unwrap()
                } else {
                    gaussian_matrix(&mut rng, m, dh, 1.0)
                }
            })
            .collect();
        let mixed: Vec<Matrix> = layer
            .iter()
            .map(|w| w.matmul(&gaussian_matrix(&mut rng, dh, dh, 1.0)).unwrap())
            .collect();
        let mut shuffled = layer.clone();
        shuffled.shuffle(&mut rng);
        let od = |ws: Vec<Matrix>| overlap_dimension(&Heads(vec![ws]), Stream::WK, DEFAULT_OD_RTOL).unwrap().layers[0].od;
        let base = od(layer);
        prop_assert_eq!(base, od(mixed));
        prop_assert_eq!(base, od(shuffled));
    }

    #[test]
    fn trial_scales_quadratically_and_is_bounded(seed: u64, k in 1usize..6, extra in 0usize..10, s in 0.1f64..5.0) {
        let m = 2 * k + extra;
        let base = trial(m, k, seed).unwrap();
        let opts = TrialOptions { b_scale: Some(s), ..Default::default() };
        prop_assert!(close(trial_with(m, k, seed, &opts).unwrap(), s * s * base, 1e-9));
        let (_, b) = sample_pair(m, k, seed, &TrialOptions::default()).unwrap();
        prop_assert!(base >= 0.0 && base <= b.frobenius_sq() * (1.0 + 1e-12));
    }

    #[test]
    fn selection_is_valid_and_deterministic(
        seed: u64,
        layers in 1usize..4,
        heads in 1usize..5,
        density in 0.2f64..1.0,
        fraction in 0.0f64..=1.0,
        m in 1usize..4,
    ) {
        let g = random_graph(seed, layers, heads, density);
        prop_assume!(!g.is_empty());
        let p = SelectionParams::new(fraction, m);
        let a = select_targets(&g, &p).unwrap();
        prop_assert!(verify_selection(&g, &a, &p).is_empty());
        let refs = a.reference_heads();
        prop_assert!(a.targets.iter().all(|t| !refs.contains(t)));
        prop_assert_eq!(a, select_targets(&g, &p).unwrap());
    }

    #[test]
    fn graph_stats_orderings(seed: u64, layers in 1usize..4, heads in 2usize..4, cuts in prop::collection::vec(0.0f64..1.0, 1..5)) {
        let g = random_graph(seed, layers, heads, 1.0);
        let mut cuts = cuts;
        cuts.sort_by(f64::total_cmp);
        let s = graph_stats(&g, &cuts, &[ProximityWindow { near_max: 0 }]).unwrap();
        prop_assert!(s.min <= s.median && s.median <= s.max);
        prop_assert!(s.frac_above.windows(2).all(|w| w[1].fraction <= w[0].fraction));
    }

    #[test]
    fn spearman_is_bounded(xs in prop::collection::vec(-5.0f64..5.0, 2..20), seed: u64) {
        let mut ys = xs.clone();
        ys.shuffle(&mut rng_from_seed(seed));
        if let Some(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        if let Some(r) = spearman(&xs, &xs) {
            prop_assert!(close(r, 1.0, 1e-12));
        }
    }

    #[test]
    fn actv_round_trip(
        layers in 1usize..3,
        heads in 1usize..4,
        dh in 1usize..4,
        tokens in 1usize..6,
        post_rope: bool,
        with_v: bool,
        seed: u64,
    ) {
        let mut meta = ModelMeta::new("rt", layers, heads, dh, dh + 1, tokens, SourceKind::Extracted);
        meta.post_rope = post_rope;
        meta.kv_heads_per_layer = Some(heads);
        let mut rng = rng_from_seed(seed);
        let mut tensors = BTreeMap::new();
        let streams: &[Stream] = if with_v { &[Stream::K, Stream::V] } else { &[Stream::Q] };
        for &s in streams {
            let n = meta.stream_len(s);
            tensors.insert(s, (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect());
        }
        let set = ActivationSet::new(meta, tensors).unwrap();
        prop_assert_eq!(decode_actv(&encode_actv(&set).unwrap()).unwrap(), set);
    }
}
