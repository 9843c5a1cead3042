//! Pixel-level AUROC and max-F1 over pooled anomaly maps.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::adapters::AdapterStack;
use crate::config::{Execution, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::ordered_map;
use crate::feature_io::{write_file, FeatureBundle, TextBank};
use crate::head::{adapt_text, baseline_map, check_compatible, infer_with_text, AnomalyMap};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by ascending score, ties by original index.
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Groups of equal scores along `order`, as `(negatives, positives)` counts.
fn tie_groups(scores: &[f64], labels: &[u8], order: &[usize]) -> Vec<(u64, u64)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut neg, mut pos) = (0u64, 0u64);
        while i < order.len() && scores[order[i]].total_cmp(&s) == Ordering::Equal {
            if labels[order[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        groups.push((neg, pos));
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn pixel_auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let order = ascending_order(scores);
    // 2 * correct + ties, kept integral so the result is a single rounding.
    let mut twice_credit: u128 = 0;
    let mut neg_below: u128 = 0;
    for (neg, pos) in tie_groups(scores, labels, &order) {
        let (neg, pos) = (neg as u128, pos as u128);
        twice_credit += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
    }
    Ok(twice_credit as f64 / (2 * n_pos * n_neg) as f64)
}

/// F1 of the prediction `score >= threshold`; zero when precision and recall
/// are both zero.
pub fn f1_from_counts(tp: u64, fp: u64, n_pos: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / n_pos as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 over thresholds taken at the distinct scores.
pub fn max_f1(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("max-F1 needs at least one positive".into()));
    }
    let order = ascending_order(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = 0.0f64;
    // Walk thresholds from the highest score down.
    for (neg, pos) in tie_groups(scores, labels, &order).into_iter().rev() {
        tp += pos;
        fp += neg;
        best = best.max(f1_from_counts(tp, fp, n_pos));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    /// Position in the evaluated list.
    pub index: usize,
    pub n_pixels: usize,
    pub n_anomalous: usize,
    /// `None` when the mask has a single class.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pixel_auroc: f64,
    pub max_f1: f64,
    pub n_images: usize,
    pub n_pixels: usize,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    /// Human-readable summary followed by one line per image.
    pub fn to_text(&self, names: Option<&[String]>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pixel AUROC  {:.6}", self.pixel_auroc);
        let _ = writeln!(out, "max F1       {:.6}", self.max_f1);
        let _ = writeln!(out, "images       {}", self.n_images);
        let _ = writeln!(out, "pixels       {}", self.n_pixels);
        for img in &self.per_image {
            let name = names
                .and_then(|n| n.get(img.index))
                .cloned()
                .unwrap_or_else(|| format!("#{}", img.index));
            let auroc = img
                .auroc
                .map_or_else(|| "undefined".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(
                out,
                "{name}\tpixels={}\tanomalous={}\tauroc={auroc}",
                img.n_pixels, img.n_anomalous
            );
        }
        out
    }

    /// `key=value` lines; floats use the shortest round-trip form.
    pub fn to_key_values(&self) -> String {
        format!(
            "pixel_auroc={}\nmax_f1={}\nn_images={}\nn_pixels={}\n",
            self.pixel_auroc, self.max_f1, self.n_images, self.n_pixels
        )
    }

    pub fn write_key_values(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_key_values().as_bytes())
    }
}

/// Scores a list of maps against the bundles' masks, pooling every pixel.
pub fn evaluate_maps(bundles: &[&FeatureBundle], maps: &[AnomalyMap]) -> Result<EvalReport> {
    if bundles.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    if bundles.len() != maps.len() {
        return Err(Error::dim(format!("{} maps for {} bundles", maps.len(), bundles.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut per_image = Vec::with_capacity(bundles.len());
    for (index, (b, map)) in bundles.iter().zip(maps).enumerate() {
        let mask = b
            .mask
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("test image #{index} has no mask")))?;
        if map.values().len() != mask.len() {
            return Err(Error::dim(format!(
                "map for image #{index} has {} pixels, mask has {}",
                map.values().len(),
                mask.len()
            )));
        }
        let img_labels: Vec<u8> = mask.iter().map(|&m| u8::from(m != 0)).collect();
        let n_anomalous = img_labels.iter().filter(|&&l| l == 1).count();
        let auroc = match pixel_auroc(map.values(), &img_labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        per_image.push(ImageScore {
            index,
            n_pixels: mask.len(),
            n_anomalous,
            auroc,
        });
        scores.extend_from_slice(map.values());
        labels.extend(img_labels);
    }
    Ok(EvalReport {
        pixel_auroc: pixel_auroc(&scores, &labels)?,
        max_f1: max_f1(&scores, &labels)?,
        n_images: bundles.len(),
        n_pixels: scores.len(),
        per_image,
    })
}

/// Runs the trained head over every bundle and evaluates the pooled pixels.
pub fn evaluate(
    bundles: &[&FeatureBundle],
    stack: &AdapterStack,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    for b in bundles {
        check_compatible(b, stack, bank)?;
    }
    let text_emb = adapt_text(&bank.pooled, &stack.text_adapter)?;
    let maps = ordered_map(bundles, cfg.execution, |b| {
        infer_with_text(b, stack, &text_emb, cfg).map(|inf| inf.map)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    evaluate_maps(bundles, &maps)
}

/// Evaluates the training-free channel-mean baseline.
pub fn evaluate_baseline(bundles: &[&FeatureBundle], exec: Execution) -> Result<EvalReport> {
    let maps = ordered_map(bundles, exec, |b| baseline_map(b))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    evaluate_maps(bundles, &maps)
}
