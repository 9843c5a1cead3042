//! Focal and Dice losses and the two training objectives built from them.
//!
//! Every loss returns its value together with the exact gradient with respect
//! to its prediction input.

use crate::config::{AacmActivation, LossConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    bilinear_resize, bilinear_resize_vjp, sigmoid_scalar, softmax_in_place, softmax_vjp_row,
    ScoreGrid,
};

/// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Borrowed binary mask at image resolution.
#[derive(Debug, Clone, Copy)]
pub struct MaskRef<'a> {
    pub height: usize,
    pub width: usize,
    pub values: &'a [u8],
}

impl<'a> MaskRef<'a> {
    pub fn new(height: usize, width: usize, values: &'a [u8]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "mask has {} entries, expected {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_pair(pred: &[f64], target: &[u8]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "prediction has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::dim("loss over an empty prediction"));
    }
    if let Some(bad) = target.iter().find(|&&t| t > 1) {
        return Err(Error::Validation(format!("target value {bad} is not binary")));
    }
    Ok(())
}

/// Mean over pixels of `-α(1-p)^γ log p` on positives and
/// `-(1-α) p^γ log(1-p)` on negatives, with `p` clamped first.
pub fn focal_loss(pred: &[f64], target: &[u8], gamma: f64, alpha: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("focal alpha must be in (0,1), got {alpha}")));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &t) in pred.iter().zip(target) {
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let inside = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw);
        let (loss, d) = if t == 1 {
            let q = 1.0 - p;
            let w = q.powf(gamma);
            let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
            let lp = p.ln();
            (-alpha * w * lp, -alpha * (dw * lp + w / p))
        } else {
            let q = 1.0 - p;
            let w = p.powf(gamma);
            let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
            let lq = q.ln();
            (-(1.0 - alpha) * w * lq, -(1.0 - alpha) * (dw * lq - w / q))
        };
        total += loss;
        grad.push(if inside { d / n } else { 0.0 });
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_loss(pred: &[f64], target: &[u8], eps: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("dice eps must be > 0, got {eps}")));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let g = t as f64;
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_g + eps;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t as f64 * den - num) / (den * den))
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
    })
}

/// Focal plus Dice against the same target.
pub fn focal_dice(pred: &[f64], target: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    let f = focal_loss(pred, target, cfg.focal_gamma, cfg.focal_alpha)?;
    let d = dice_loss(pred, target, cfg.dice_eps)?;
    Ok(LossValue {
        value: f.value + d.value,
        grad: f.grad.iter().zip(&d.grad).map(|(a, b)| a + b).collect(),
    })
}

/// Upsamples a patch-level probability grid and scores it against the mask;
/// returns the loss and its gradient on the patch grid.
fn grid_loss(grid: &ScoreGrid, mask: MaskRef<'_>, cfg: &LossConfig) -> Result<(f64, ScoreGrid)> {
    let up = bilinear_resize(grid, mask.height, mask.width)?;
    let lv = focal_dice(up.values(), mask.values, cfg)?;
    let upstream = ScoreGrid::new(mask.height, mask.width, lv.grad)?;
    let g = bilinear_resize_vjp(grid.height(), grid.width(), &upstream)?;
    Ok((lv.value, g))
}

/// Cross-modal objective: mean over stages of focal+Dice between each stage's
/// upsampled abnormal-probability grid and the mask.
///
/// Returns the loss and one gradient grid per stage.
pub fn loss_cm(
    stage_grids: &[ScoreGrid],
    mask: MaskRef<'_>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<ScoreGrid>)> {
    if stage_grids.is_empty() {
        return Err(Error::Validation("loss_cm needs at least one stage".into()));
    }
    let k = stage_grids.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(stage_grids.len());
    for grid in stage_grids {
        let (v, g) = grid_loss(grid, mask, cfg)?;
        total += v;
        grads.push(g.map(|x| x / k));
    }
    Ok((total / k, grads))
}

/// Converts raw CLS-patch cosines into per-patch probabilities.
pub fn aacm_probabilities(scores: &ScoreGrid, activation: AacmActivation) -> ScoreGrid {
    match activation {
        AacmActivation::Sigmoid => scores.map(sigmoid_scalar),
        AacmActivation::SoftmaxPatches => {
            let mut out = scores.clone();
            softmax_in_place(out.values_mut(), 1.0);
            out
        }
    }
}

/// Calibration objective on raw CLS-patch cosine scores; returns the loss and
/// its gradient with respect to those raw scores.
pub fn loss_aacm(
    scores: &ScoreGrid,
    mask: MaskRef<'_>,
    cfg: &LossConfig,
    activation: AacmActivation,
) -> Result<(f64, ScoreGrid)> {
    let probs = aacm_probabilities(scores, activation);
    let (value, d_probs) = grid_loss(&probs, mask, cfg)?;
    let grad = match activation {
        AacmActivation::Sigmoid => {
            let values = probs
                .values()
                .iter()
                .zip(d_probs.values())
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            ScoreGrid::new(scores.height(), scores.width(), values)?
        }
        AacmActivation::SoftmaxPatches => {
            let mut out = vec![0.0; probs.values().len()];
            softmax_vjp_row(probs.values(), d_probs.values(), 1.0, &mut out);
            ScoreGrid::new(scores.height(), scores.width(), out)?
        }
    };
    Ok((value, grad))
}

/// `λ_cm · cm + λ_aacm · aacm`.
pub fn total_loss(cm: f64, aacm: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_cm * cm + cfg.lambda_aacm * aacm
}
