//! The weighted training objective and its gradient with respect to every
//! adapter parameter.
//!
//! Per sample, gradients flow:
//! focal/Dice → resize adjoint → stage softmax → patch/text cosine → adapters,
//! and for the calibration term
//! focal/Dice → resize adjoint → activation → CLS/patch cosine → adapters.
//! The adapted text states are shared by every sample of a batch, so their
//! gradient is summed across the batch before one pass through the text adapter.

use crate::adapters::{adapt, adapt_backward, AdapterGrad, AdapterStack, StackGrad};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::ordered_map;
use crate::feature_io::{FeatureBundle, TextBank, ABNORMAL};
use crate::head::{
    aacm_scores_from_embeddings, adapt_text, check_compatible, stage_map_from_embeddings,
};
use crate::losses::{loss_aacm, loss_cm, total_loss, MaskRef};
use crate::numerics::{cosine_rows_vjp, softmax_over_states_vjp, ScoreGrid, Tensor2, NORM_EPS};

/// Loss components for one sample or averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cm: f64,
    pub aacm: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cm += other.cm;
        self.aacm += other.aacm;
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            total: self.total * f,
            cm: self.cm * f,
            aacm: self.aacm * f,
        }
    }
}

/// Gradient of one sample's objective; text flows back only to the adapted
/// text states here.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub patch: Vec<AdapterGrad>,
    pub cls: AdapterGrad,
    /// Gradient with respect to the adapted text states (`2 x d_e`).
    pub text_emb: Tensor2,
}

pub(crate) fn bundle_mask(bundle: &FeatureBundle) -> Result<MaskRef<'_>> {
    let mask = bundle
        .mask
        .as_deref()
        .ok_or_else(|| Error::Validation("training sample has no ground-truth mask".into()))?;
    MaskRef::new(bundle.image_h, bundle.image_w, mask)
}

/// Objective for one bundle, with the gradient when `with_grad` is set.
pub fn sample_objective(
    bundle: &FeatureBundle,
    stack: &AdapterStack,
    text_emb: &Tensor2,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<SampleGrad>)> {
    let mask = bundle_mask(bundle)?;
    let (gh, gw) = (bundle.grid_h, bundle.grid_w);
    let loss_cfg = &cfg.loss;

    let mut inputs = Vec::with_capacity(stack.layer_indices.len());
    let mut embs = Vec::with_capacity(stack.layer_indices.len());
    let mut stages = Vec::with_capacity(stack.layer_indices.len());
    for (&layer, adapter) in stack.layer_indices.iter().zip(&stack.patch_adapters) {
        let tokens = bundle
            .tokens_for_layer(layer)
            .ok_or_else(|| Error::Compat(format!("bundle has no patch tokens for layer {layer}")))?;
        let emb = adapt(adapter, tokens)?;
        stages.push(stage_map_from_embeddings(
            layer,
            &emb,
            text_emb,
            cfg.temperature,
            gh,
            gw,
        )?);
        inputs.push(tokens);
        embs.push(emb);
    }
    let grids: Vec<ScoreGrid> = stages.iter().map(|s| s.grid.clone()).collect();
    let (cm, d_grids) = loss_cm(&grids, mask, loss_cfg)?;

    let cls_in = Tensor2::row_vector(&bundle.cls_token);
    let cls_emb = adapt(&stack.cls_adapter, &cls_in)?;
    let final_emb = embs.last().expect("at least one stage");
    let scores = aacm_scores_from_embeddings(final_emb, &cls_emb, gh, gw)?;
    let (aacm, d_scores) = loss_aacm(&scores, mask, loss_cfg, cfg.aacm_activation)?;

    let losses = LossBreakdown {
        total: total_loss(cm, aacm, loss_cfg),
        cm,
        aacm,
    };
    if !with_grad {
        return Ok((losses, None));
    }

    let n = gh * gw;
    let mut d_text = Tensor2::zeros(2, stack.d_e);
    let mut d_embs = Vec::with_capacity(stages.len());
    for ((stage, d_grid), emb) in stages.iter().zip(&d_grids).zip(&embs) {
        let mut d_probs = Tensor2::zeros(n, 2);
        for (i, &g) in d_grid.values().iter().enumerate() {
            d_probs.row_mut(i)[ABNORMAL] = loss_cfg.lambda_cm * g;
        }
        let d_sims = softmax_over_states_vjp(&stage.probs, cfg.temperature, &d_probs)?;
        let (d_emb, d_t) = cosine_rows_vjp(emb, text_emb, NORM_EPS, &d_sims)?;
        d_text.add_assign(&d_t)?;
        d_embs.push(d_emb);
    }

    let d_sims = Tensor2::new(
        n,
        1,
        d_scores
            .values()
            .iter()
            .map(|g| loss_cfg.lambda_aacm * g)
            .collect(),
    )?;
    let (d_final, d_cls_emb) = cosine_rows_vjp(final_emb, &cls_emb, NORM_EPS, &d_sims)?;
    d_embs
        .last_mut()
        .expect("at least one stage")
        .add_assign(&d_final)?;

    let patch = stack
        .patch_adapters
        .iter()
        .zip(&inputs)
        .zip(&d_embs)
        .map(|((adapter, x), d)| adapt_backward(adapter, x, d).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let (_, cls) = adapt_backward(&stack.cls_adapter, &cls_in, &d_cls_emb)?;

    Ok((
        losses,
        Some(SampleGrad {
            patch,
            cls,
            text_emb: d_text,
        }),
    ))
}

/// Mean objective over `batch` and its gradient with respect to the whole stack.
///
/// Per-sample work may run in parallel; the reduction always runs in slice order.
pub fn batch_objective(
    batch: &[&FeatureBundle],
    stack: &AdapterStack,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, StackGrad)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    for b in batch {
        check_compatible(b, stack, bank)?;
    }
    let text_emb = adapt_text(&bank.pooled, &stack.text_adapter)?;
    let results = ordered_map(batch, cfg.execution, |b| {
        sample_objective(b, stack, &text_emb, cfg, true)
    });

    let mut losses = LossBreakdown::default();
    let mut grad = StackGrad::zeros_like(stack);
    let mut d_text = Tensor2::zeros(2, stack.d_e);
    for r in results {
        let (l, g) = r?;
        let g = g.expect("gradient requested");
        losses.add(&l);
        for (acc, s) in grad.patch.iter_mut().zip(&g.patch) {
            acc.add_assign(s)?;
        }
        grad.cls.add_assign(&g.cls)?;
        d_text.add_assign(&g.text_emb)?;
    }
    let (_, text_grad) = adapt_backward(&stack.text_adapter, &bank.pooled, &d_text)?;
    grad.text = text_grad;

    let n = batch.len() as f64;
    let scale = |g: &mut AdapterGrad| {
        g.w1.data_mut().iter_mut().for_each(|v| *v /= n);
        g.w2.data_mut().iter_mut().for_each(|v| *v /= n);
        g.b1.iter_mut().for_each(|v| *v /= n);
        g.b2.iter_mut().for_each(|v| *v /= n);
    };
    grad.patch.iter_mut().for_each(scale);
    scale(&mut grad.cls);
    scale(&mut grad.text);
    Ok((losses.scaled(1.0 / n), grad))
}

/// Mean objective over `batch` without gradients.
pub fn batch_loss(
    batch: &[&FeatureBundle],
    stack: &AdapterStack,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let text_emb = adapt_text(&bank.pooled, &stack.text_adapter)?;
    let mut total = LossBreakdown::default();
    for b in batch {
        check_compatible(b, stack, bank)?;
        let (l, _) = sample_objective(b, stack, &text_emb, cfg, false)?;
        total.add(&l);
    }
    Ok(total.scaled(1.0 / batch.len() as f64))
}
