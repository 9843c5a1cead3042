//! Library results against independent scalar-loop oracles.

mod common;

use common::*;
use rand::Rng;
use zsad::config::{AacmActivation, LossConfig};
use zsad::feature_io::{synth_dataset, SynthSpec};
use zsad::head::{aacm_scores_from_embeddings, baseline_map, fuse_stages};
use zsad::losses::{dice_loss, focal_loss, loss_aacm, loss_cm, MaskRef};
use zsad::metrics::{max_f1, pixel_auroc};
use zsad::numerics::{ScoreGrid, Tensor2};

const LOSS_TOL: f64 = 1e-10;
const TRIALS: u64 = 100;

fn random_loss_params(r: &mut rand_chacha::ChaCha8Rng) -> (LossConfig, LossParams) {
    let cfg = LossConfig {
        focal_gamma: r.random_range(0.0..3.0),
        focal_alpha: r.random_range(0.05..0.95),
        dice_eps: r.random_range(0.1..2.0),
        ..LossConfig::default()
    };
    let p = LossParams {
        gamma: cfg.focal_gamma,
        alpha: cfg.focal_alpha,
        eps: cfg.dice_eps,
    };
    (cfg, p)
}

#[test]
fn focal_and_dice_match_scalar_loops() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let n = r.random_range(1..64);
        // include values beyond the clamp on both sides
        let pred = random_vec(&mut r, n, -0.05, 1.05);
        let target = random_mask(&mut r, n, 0.4);
        let (cfg, p) = random_loss_params(&mut r);
        let f = focal_loss(&pred, &target, cfg.focal_gamma, cfg.focal_alpha).unwrap();
        assert!((f.value - focal_oracle(&pred, &target, p.gamma, p.alpha)).abs() < LOSS_TOL);
        let d = dice_loss(&pred, &target, cfg.dice_eps).unwrap();
        assert!((d.value - dice_oracle(&pred, &target, p.eps)).abs() < LOSS_TOL);
    }
}

#[test]
fn loss_cm_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let (gh, gw) = (r.random_range(1..6), r.random_range(1..6));
        let (ih, iw) = (gh * r.random_range(1..4), gw * r.random_range(1..4));
        let k = r.random_range(1..5);
        let grids: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut r, gh * gw, 0.0, 1.0)).collect();
        let mask = random_mask(&mut r, ih * iw, 0.3);
        let (cfg, p) = random_loss_params(&mut r);
        let lib_grids: Vec<ScoreGrid> = grids
            .iter()
            .map(|g| ScoreGrid::new(gh, gw, g.clone()).unwrap())
            .collect();
        let (v, _) = loss_cm(&lib_grids, MaskRef::new(ih, iw, &mask).unwrap(), &cfg).unwrap();
        let o = loss_cm_oracle(&grids, gh, gw, &mask, ih, iw, &p);
        assert!((v - o).abs() < LOSS_TOL, "seed {seed}: {v} vs {o}");
    }
}

#[test]
fn loss_aacm_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let (gh, gw) = (r.random_range(1..6), r.random_range(1..6));
        let (ih, iw) = (gh * r.random_range(1..4), gw * r.random_range(1..4));
        let scores = random_vec(&mut r, gh * gw, -1.0, 1.0);
        let mask = random_mask(&mut r, ih * iw, 0.3);
        let (cfg, p) = random_loss_params(&mut r);
        let grid = ScoreGrid::new(gh, gw, scores.clone()).unwrap();
        let m = MaskRef::new(ih, iw, &mask).unwrap();
        let (v, _) = loss_aacm(&grid, m, &cfg, AacmActivation::Sigmoid).unwrap();
        let o = loss_aacm_sigmoid_oracle(&scores, gh, gw, &mask, ih, iw, &p);
        assert!((v - o).abs() < LOSS_TOL, "sigmoid seed {seed}");
        let (v, _) = loss_aacm(&grid, m, &cfg, AacmActivation::SoftmaxPatches).unwrap();
        let o = loss_aacm_softmax_oracle(&scores, gh, gw, &mask, ih, iw, &p);
        assert!((v - o).abs() < LOSS_TOL, "softmax seed {seed}");
    }
}

#[test]
fn zero_scores_give_closed_form_aacm_loss() {
    // sigmoid(0) = 1/2 everywhere, so the loss depends only on mask counts.
    let cfg = LossConfig::default();
    let mask: Vec<u8> = (0..16).map(|i| u8::from(i % 5 == 0)).collect();
    let pos = mask.iter().filter(|&&m| m == 1).count() as f64;
    let n = mask.len() as f64;
    let focal = (pos * cfg.focal_alpha + (n - pos) * (1.0 - cfg.focal_alpha))
        * 0.5f64.powf(cfg.focal_gamma)
        * 2f64.ln()
        / n;
    let dice = 1.0 - (2.0 * 0.5 * pos + cfg.dice_eps) / (0.5 * n + pos + cfg.dice_eps);
    let grid = ScoreGrid::filled(4, 4, 0.0);
    let (v, _) = loss_aacm(
        &grid,
        MaskRef::new(4, 4, &mask).unwrap(),
        &cfg,
        AacmActivation::Sigmoid,
    )
    .unwrap();
    assert!((v - (focal + dice)).abs() < 1e-12);
}

#[test]
fn empty_mask_with_strongly_negative_scores() {
    let cfg = LossConfig::default();
    // Dice on an empty mask is n·σ(s) / (n·σ(s) + ε), so "strongly negative"
    // has to beat the pixel count: at s = -10 over 64 pixels it is still 2.9e-3.
    let mask = vec![0u8; 64];
    let grid = ScoreGrid::filled(4, 4, -15.0);
    let (v, _) = loss_aacm(
        &grid,
        MaskRef::new(8, 8, &mask).unwrap(),
        &cfg,
        AacmActivation::Sigmoid,
    )
    .unwrap();
    assert!(v < 1e-3, "{v}");
}

#[test]
fn fuse_matches_mean_oracle() {
    let mut r = rng(7);
    let grids: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 12, 0.0, 1.0)).collect();
    let lib: Vec<ScoreGrid> = grids
        .iter()
        .map(|g| ScoreGrid::new(3, 4, g.clone()).unwrap())
        .collect();
    let fused = fuse_stages(&lib).unwrap();
    for (i, v) in fused.values().iter().enumerate() {
        let mean = (grids[0][i] + grids[1][i] + grids[2][i] + grids[3][i]) / 4.0;
        assert!((v - mean).abs() < 1e-15);
    }
}

#[test]
fn aacm_scores_match_cosine_oracle() {
    let mut r = rng(8);
    let (n, d) = (6, 5);
    let emb = random_tensor(&mut r, n, d);
    let cls = random_tensor(&mut r, 1, d);
    let s = aacm_scores_from_embeddings(&emb, &cls, 2, 3).unwrap();
    let c = cls.row(0);
    for i in 0..n {
        let p = emb.row(i);
        let expect = dot(p, c) / (dot(p, p).sqrt() * dot(c, c).sqrt());
        assert!((s.values()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn baseline_matches_pipeline_oracle() {
    let data = synth_dataset(&SynthSpec {
        n_train: 1,
        n_test: 1,
        grid: 4,
        image_size: 12,
        ..SynthSpec::default()
    })
    .unwrap();
    let b = &data.bundles[0];
    let tokens: &Tensor2 = b.patch_tokens.last().unwrap();
    let means: Vec<f64> = (0..tokens.rows())
        .map(|i| {
            let row = tokens.row(i);
            let norm = dot(row, row).sqrt();
            row.iter().map(|v| v / norm).sum::<f64>() / row.len() as f64
        })
        .collect();
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normed: Vec<f64> = means.iter().map(|m| (m - lo) / (hi - lo)).collect();
    let expect = bilinear_oracle(&normed, 4, 4, 12, 12);
    let got = baseline_map(b).unwrap();
    for (g, e) in got.values().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

fn random_scores_with_ties(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    // a coarse grid of values guarantees ties
    (0..n).map(|_| f64::from(r.random_range(0..20u8)) / 20.0).collect()
}

fn labels_with_both_classes(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut l = random_mask(r, n, 0.4);
    l[0] = 0;
    l[1] = 1;
    l
}

#[test]
fn auroc_equals_pair_counting_exactly() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let n = r.random_range(2..=200);
        let scores = if seed % 2 == 0 {
            random_scores_with_ties(&mut r, n)
        } else {
            random_vec(&mut r, n, 0.0, 1.0)
        };
        let labels = labels_with_both_classes(&mut r, n);
        assert_eq!(pixel_auroc(&scores, &labels).unwrap(), auroc_pairs(&scores, &labels));
    }
}

#[test]
fn max_f1_equals_exhaustive_scan() {
    for seed in 0..TRIALS {
        let mut r = rng(seed + 1000);
        let n = r.random_range(2..=200);
        let scores = random_scores_with_ties(&mut r, n);
        let labels = labels_with_both_classes(&mut r, n);
        let a = max_f1(&scores, &labels).unwrap();
        let b = f1_exhaustive(&scores, &labels);
        assert!((a - b).abs() < 1e-15, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn metrics_are_invariant_under_increasing_transforms() {
    for seed in 0..TRIALS {
        let mut r = rng(seed + 2000);
        let n = r.random_range(2..=200);
        let scores = random_scores_with_ties(&mut r, n);
        let labels = labels_with_both_classes(&mut r, n);
        let auroc = pixel_auroc(&scores, &labels).unwrap();
        let f1 = max_f1(&scores, &labels).unwrap();
        for f in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-5.0 * x).exp())] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            assert_eq!(pixel_auroc(&t, &labels).unwrap(), auroc);
            assert_eq!(max_f1(&t, &labels).unwrap(), f1);
        }
    }
}
