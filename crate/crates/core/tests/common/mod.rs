//! Shared oracles and fixtures for the integration tests.
//!
//! The oracles are written as plain scalar loops straight from the formulas
//! and deliberately share no code with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsad::adapters::{init_stack, AdapterStack};
use zsad::config::TrainConfig;
use zsad::feature_io::{synth_dataset, FeatureBundle, SynthDataset, SynthSpec};
use zsad::numerics::Tensor2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, random_vec(rng, rows * cols, -1.0, 1.0)).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random_bool(rate))).collect()
}

/// Central finite differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// amplifying round-off in the finite difference.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- loss oracles -------------------------------------------------------

pub const CLAMP: f64 = 1e-7;

pub fn focal_oracle(pred: &[f64], target: &[u8], gamma: f64, alpha: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..pred.len() {
        let p = pred[i].clamp(CLAMP, 1.0 - CLAMP);
        let term = if target[i] == 1 {
            -alpha * (1.0 - p).powf(gamma) * p.ln()
        } else {
            -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
        };
        sum += term;
    }
    sum / pred.len() as f64
}

pub fn dice_oracle(pred: &[f64], target: &[u8], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..pred.len() {
        let g = if target[i] == 1 { 1.0 } else { 0.0 };
        inter += pred[i] * g;
        sp += pred[i];
        sg += g;
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

/// Half-pixel bilinear sampling written per output pixel.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.max(0.0).min((h - 1) as f64);
        let x = x.max(0.0).min((w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (y - y0 as f64, x - x0 as f64);
        src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
            + src[y0 * w + x1] * (1.0 - dy) * dx
            + src[y1 * w + x0] * dy * (1.0 - dx)
            + src[y1 * w + x1] * dy * dx
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let y = (i as f64 + 0.5) * (h as f64 / oh as f64) - 0.5;
            let x = (j as f64 + 0.5) * (w as f64 / ow as f64) - 0.5;
            out.push(sample(y, x));
        }
    }
    out
}

pub struct LossParams {
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
}

fn focal_dice_oracle(pred: &[f64], target: &[u8], p: &LossParams) -> f64 {
    focal_oracle(pred, target, p.gamma, p.alpha) + dice_oracle(pred, target, p.eps)
}

pub fn loss_cm_oracle(
    grids: &[Vec<f64>],
    gh: usize,
    gw: usize,
    mask: &[u8],
    ih: usize,
    iw: usize,
    p: &LossParams,
) -> f64 {
    let mut sum = 0.0;
    for g in grids {
        let up = bilinear_oracle(g, gh, gw, ih, iw);
        sum += focal_dice_oracle(&up, mask, p);
    }
    sum / grids.len() as f64
}

pub fn loss_aacm_sigmoid_oracle(
    scores: &[f64],
    gh: usize,
    gw: usize,
    mask: &[u8],
    ih: usize,
    iw: usize,
    p: &LossParams,
) -> f64 {
    let probs: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
    let up = bilinear_oracle(&probs, gh, gw, ih, iw);
    focal_dice_oracle(&up, mask, p)
}

pub fn loss_aacm_softmax_oracle(
    scores: &[f64],
    gh: usize,
    gw: usize,
    mask: &[u8],
    ih: usize,
    iw: usize,
    p: &LossParams,
) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let probs: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let up = bilinear_oracle(&probs, gh, gw, ih, iw);
    focal_dice_oracle(&up, mask, p)
}

// ---- metric oracles -----------------------------------------------------

/// AUROC by explicit pair enumeration, exact in integers until the final divide.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0u128, 0u128);
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 2;
            if scores[i] > scores[j] {
                credit += 2;
            } else if scores[i] == scores[j] {
                credit += 1;
            }
        }
    }
    credit as f64 / pairs as f64
}

/// Best F1 by trying every distinct score as a threshold.
pub fn f1_exhaustive(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut best = 0.0f64;
    for &t in scores {
        let (mut tp, mut fp) = (0.0, 0.0);
        for i in 0..scores.len() {
            if scores[i] >= t {
                if labels[i] == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        if tp > 0.0 {
            let p = tp / (tp + fp);
            let r = tp / n_pos;
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    best
}

// ---- fixtures -----------------------------------------------------------

/// Tiny two-stage instance used for whole-objective gradient checks.
pub struct GradInstance {
    pub data: SynthDataset,
    pub cfg: TrainConfig,
    pub stack: AdapterStack,
}

pub fn grad_instance(seed: u64, temperature: f64) -> GradInstance {
    let spec = SynthSpec {
        n_train: 2,
        n_test: 1,
        grid: 4,
        image_size: 8,
        d_v: 8,
        d_t: 6,
        n_layers: 2,
        templates_per_state: 2,
        anomaly_rate: 0.25,
        seed,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec).unwrap();
    let cfg = TrainConfig {
        d_e: 5,
        layer_indices: spec.layer_indices(),
        temperature,
        ..TrainConfig::default()
    };
    let stack = init_stack(&cfg, spec.d_v, spec.d_t, seed).unwrap();
    GradInstance { data, cfg, stack }
}

/// Settings used for the trend experiments on the default synthetic data.
pub fn trend_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 8,
        epochs: 25,
        ..TrainConfig::default()
    }
}

pub fn owned(bundles: &[&FeatureBundle]) -> Vec<FeatureBundle> {
    bundles.iter().map(|b| (*b).clone()).collect()
}
