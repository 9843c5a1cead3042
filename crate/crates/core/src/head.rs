//! Anomaly maps from adapted features.
//!
//! Each configured stage compares its adapted patch tokens against the two
//! adapted text states and keeps the abnormal probability per patch. Stage
//! grids are averaged, upsampled to image size and optionally smoothed. The
//! CLS adapter only participates in the training objective.

use crate::adapters::{adapt, Adapter, AdapterStack};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_io::{FeatureBundle, TextBank, ABNORMAL};
use crate::numerics::{
    bilinear_resize, cosine_rows, gaussian_smooth, l2_normalize_rows, softmax_over_states,
    ScoreGrid, Tensor2, NORM_EPS,
};

/// One stage's patch probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMap {
    pub layer: u32,
    /// `N x 2`, columns normal / abnormal.
    pub probs: Tensor2,
    /// Abnormal column on the patch grid.
    pub grid: ScoreGrid,
}

/// Per-pixel anomaly scores in `[0, 1]` at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scores: ScoreGrid,
}

impl AnomalyMap {
    pub fn height(&self) -> usize {
        self.scores.height()
    }

    pub fn width(&self) -> usize {
        self.scores.width()
    }

    pub fn values(&self) -> &[f64] {
        self.scores.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub map: AnomalyMap,
    pub stages: Vec<StageMap>,
}

/// Adapted text states, `2 x d_e`.
pub fn adapt_text(text_pooled: &Tensor2, text_adapter: &Adapter) -> Result<Tensor2> {
    adapt(text_adapter, text_pooled)
}

/// Stage map from already-adapted patch and text embeddings.
pub fn stage_map_from_embeddings(
    layer: u32,
    patch_emb: &Tensor2,
    text_emb: &Tensor2,
    temperature: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<StageMap> {
    if patch_emb.rows() != grid_h * grid_w {
        return Err(Error::dim(format!(
            "{} patch rows for a {grid_h}x{grid_w} grid",
            patch_emb.rows()
        )));
    }
    let sims = cosine_rows(patch_emb, text_emb, NORM_EPS)?;
    let probs = softmax_over_states(&sims, temperature)?;
    let grid = ScoreGrid::new(grid_h, grid_w, probs.column(ABNORMAL))?;
    Ok(StageMap { layer, probs, grid })
}

/// Cross-modal stage map for one set of patch tokens.
#[allow(clippy::too_many_arguments)]
pub fn cmcl_stage_map(
    layer: u32,
    patch_tokens: &Tensor2,
    stage_adapter: &Adapter,
    text_pooled: &Tensor2,
    text_adapter: &Adapter,
    temperature: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<StageMap> {
    let patch_emb = adapt(stage_adapter, patch_tokens)?;
    let text_emb = adapt_text(text_pooled, text_adapter)?;
    stage_map_from_embeddings(layer, &patch_emb, &text_emb, temperature, grid_h, grid_w)
}

/// Elementwise mean of equally shaped grids.
pub fn fuse_stages(grids: &[ScoreGrid]) -> Result<ScoreGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Validation("cannot fuse an empty list of stage maps".into()))?;
    if grids.iter().any(|g| g.shape() != first.shape()) {
        return Err(Error::dim("stage grids differ in shape"));
    }
    let k = grids.len() as f64;
    let mut acc = vec![0.0; first.values().len()];
    for g in grids {
        acc.iter_mut().zip(g.values()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= k);
    ScoreGrid::new(first.height(), first.width(), acc)
}

/// Cosine between the adapted CLS token and every adapted final-stage patch.
pub fn aacm_scores(
    patch_tokens_final: &Tensor2,
    final_adapter: &Adapter,
    cls_token: &[f64],
    cls_adapter: &Adapter,
    grid_h: usize,
    grid_w: usize,
) -> Result<ScoreGrid> {
    let patch_emb = adapt(final_adapter, patch_tokens_final)?;
    let cls_emb = adapt(cls_adapter, &Tensor2::row_vector(cls_token))?;
    aacm_scores_from_embeddings(&patch_emb, &cls_emb, grid_h, grid_w)
}

pub fn aacm_scores_from_embeddings(
    patch_emb: &Tensor2,
    cls_emb: &Tensor2,
    grid_h: usize,
    grid_w: usize,
) -> Result<ScoreGrid> {
    let sims = cosine_rows(patch_emb, cls_emb, NORM_EPS)?;
    ScoreGrid::new(grid_h, grid_w, sims.into_data())
}

/// Checks that a bundle carries every stage the stack needs, at the right widths.
pub fn check_compatible(bundle: &FeatureBundle, stack: &AdapterStack, bank: &TextBank) -> Result<()> {
    if bundle.d_v() != stack.d_v() {
        return Err(Error::Compat(format!(
            "bundle token width {} does not match adapter input width {}",
            bundle.d_v(),
            stack.d_v()
        )));
    }
    if bank.d_t() != stack.d_t() {
        return Err(Error::Compat(format!(
            "text bank width {} does not match text adapter input width {}",
            bank.d_t(),
            stack.d_t()
        )));
    }
    if let Some(missing) = stack
        .layer_indices
        .iter()
        .find(|&&l| bundle.layer_position(l).is_none())
    {
        return Err(Error::Compat(format!(
            "bundle has no patch tokens for layer {missing} (has {:?})",
            bundle.layer_indices
        )));
    }
    Ok(())
}

fn finish_map(grid: &ScoreGrid, bundle: &FeatureBundle, cfg: &TrainConfig) -> Result<AnomalyMap> {
    let mut up = bilinear_resize(grid, bundle.image_h, bundle.image_w)?;
    if cfg.smoothing {
        up = gaussian_smooth(&up, cfg.smoothing_sigma)?;
    }
    // Interpolation weights can overshoot [0,1] by an ulp.
    Ok(AnomalyMap {
        scores: up.map(|v| v.clamp(0.0, 1.0)),
    })
}

/// Anomaly map for one image using only patch and text adapters.
pub fn infer(
    bundle: &FeatureBundle,
    stack: &AdapterStack,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<Inference> {
    check_compatible(bundle, stack, bank)?;
    let text_emb = adapt_text(&bank.pooled, &stack.text_adapter)?;
    infer_with_text(bundle, stack, &text_emb, cfg)
}

/// [`infer`] with the adapted text states precomputed.
pub fn infer_with_text(
    bundle: &FeatureBundle,
    stack: &AdapterStack,
    text_emb: &Tensor2,
    cfg: &TrainConfig,
) -> Result<Inference> {
    let stages = stack
        .layer_indices
        .iter()
        .zip(&stack.patch_adapters)
        .map(|(&layer, adapter)| {
            let tokens = bundle.tokens_for_layer(layer).ok_or_else(|| {
                Error::Compat(format!("bundle has no patch tokens for layer {layer}"))
            })?;
            let emb = adapt(adapter, tokens)?;
            stage_map_from_embeddings(
                layer,
                &emb,
                text_emb,
                cfg.temperature,
                bundle.grid_h,
                bundle.grid_w,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grids: Vec<ScoreGrid> = stages.iter().map(|s| s.grid.clone()).collect();
    let fused = fuse_stages(&grids)?;
    Ok(Inference {
        map: finish_map(&fused, bundle, cfg)?,
        stages,
    })
}

/// Min-max normalization; a constant grid maps to 0.5 everywhere.
pub fn min_max_normalize(grid: &ScoreGrid) -> ScoreGrid {
    let (lo, hi) = grid
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 0.0 {
        return grid.map(|_| 0.5);
    }
    grid.map(|v| (v - lo) / (hi - lo))
}

/// Training-free reference map: channel mean of ℓ2-normalized final-layer
/// tokens, min-max normalized and upsampled.
pub fn baseline_map(bundle: &FeatureBundle) -> Result<AnomalyMap> {
    let tokens = bundle
        .final_patch_tokens()
        .ok_or_else(|| Error::Validation("bundle has no patch tokens".into()))?;
    let normed = l2_normalize_rows(tokens, NORM_EPS);
    let d = normed.cols() as f64;
    let means = (0..normed.rows())
        .map(|i| normed.row(i).iter().sum::<f64>() / d)
        .collect();
    let grid = ScoreGrid::new(bundle.grid_h, bundle.grid_w, means)?;
    let up = bilinear_resize(&min_max_normalize(&grid), bundle.image_h, bundle.image_w)?;
    Ok(AnomalyMap {
        scores: up.map(|v| v.clamp(0.0, 1.0)),
    })
}
