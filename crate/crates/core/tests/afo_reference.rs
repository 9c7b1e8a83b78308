//! The fusion forward pass against a loop-by-loop reference written from
//! the block definition, plus the identity and gate properties.

use dcfmix_core::afo::{
    attention_fuse, fuse_concat, gate, multimodal_communicate, BlockParams, FeatureMap,
    FusionParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Tokens = Vec<Vec<f64>>;

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|c| (x[c] - mean) / s * gain[c] + bias[c])
        .collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

fn matvec(x: &[f64], w: &ndarray::Array2<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| (0..x.len()).map(|i| x[i] * w[[i, j]]).sum())
        .collect()
}

fn block(x: &Tokens, p: &BlockParams) -> Tokens {
    let t = x.len();
    let d = x[0].len();
    let g = |a: &ndarray::Array1<f64>| a.to_vec();
    let h: Tokens = x
        .iter()
        .map(|r| layer_norm(r, &g(&p.ln1_gain), &g(&p.ln1_bias)))
        .collect();
    let q: Tokens = h.iter().map(|r| matvec(r, &p.w_query)).collect();
    let k: Tokens = h.iter().map(|r| matvec(r, &p.w_key)).collect();
    let v: Tokens = h.iter().map(|r| matvec(r, &p.w_value)).collect();
    let mut x1 = x.clone();
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            x1[i][c] += (0..t).map(|j| e[j] / z * v[j][c]).sum::<f64>();
        }
    }
    x1.iter()
        .map(|r| {
            let h2 = layer_norm(r, &g(&p.ln2_gain), &g(&p.ln2_bias));
            let u: Vec<f64> = matvec(&h2, &p.mlp_w1)
                .iter()
                .zip(p.mlp_b1.iter())
                .map(|(a, b)| gelu(a + b))
                .collect();
            let m = matvec(&u, &p.mlp_w2);
            (0..d).map(|c| r[c] + m[c] + p.mlp_b2[c]).collect()
        })
        .collect()
}

fn to_tokens(f: &FeatureMap) -> Tokens {
    let (h, w) = (f.height(), f.width());
    (0..h * w)
        .map(|p| (0..f.channels()).map(|c| f.get(c, p / w, p % w)).collect())
        .collect()
}

/// Reference for the chained fusion steps; returns token rows.
fn reference(
    vis: &FeatureMap,
    depth: &FeatureMap,
    p: &FusionParams,
    steps: usize,
) -> (Tokens, Tokens) {
    let mut v = to_tokens(vis);
    let mut d = to_tokens(depth);
    for _ in 0..steps {
        let mut x: Tokens = v
            .iter()
            .zip(&d)
            .map(|(a, b)| [a.clone(), b.clone()].concat())
            .collect();
        for b in &p.blocks {
            x = block(&x, b);
        }
        for (i, row) in x.iter().enumerate() {
            let z: f64 = row
                .iter()
                .zip(p.conv_weight.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + p.conv_bias[0];
            let gamma = 1.0 / (1.0 + (-z).exp());
            v[i].iter_mut().for_each(|a| *a *= gamma);
            d[i].iter_mut().for_each(|a| *a *= gamma);
        }
    }
    (v, d)
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(
        c,
        h,
        w,
        (0..c * h * w)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn forward_matches_reference(
        seed in any::<u64>(),
        cv in 1usize..=3,
        cd in 1usize..=3,
        h in 1usize..=4,
        w in 1usize..=4,
        blocks in 1usize..=2,
        steps in 1usize..=3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vis = random_map(&mut rng, cv, h, w);
        let depth = random_map(&mut rng, cd, h, w);
        let p = FusionParams::random(cv + cd, blocks, seed, 0.8);
        let (ov, od) = multimodal_communicate(&vis, &depth, &p, steps).unwrap();
        let (rv, rd) = reference(&vis, &depth, &p, steps);
        for (got, want) in [(to_tokens(&ov), rv), (to_tokens(&od), rd)] {
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn identity_parameters_pass_features_through(seed in any::<u64>(), c in 2usize..=6, h in 1usize..=4, w in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_map(&mut rng, c, h, w);
        let p = FusionParams::identity(c, 2);
        let y = attention_fuse(&x, &p).unwrap();
        for (a, b) in y.array().iter().zip(x.array()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
        let g = gate(&y, &p).unwrap();
        prop_assert!(g.array().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn fused_map_orders_visual_channels_first() {
    let v = FeatureMap::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
    let d = FeatureMap::new(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let f = fuse_concat(&v, &d).unwrap();
    assert_eq!(
        f.array().iter().copied().collect::<Vec<_>>(),
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    );
}
