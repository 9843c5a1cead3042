//! Adam optimization of the adapter stack.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{init_stack, AdapterStack};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_io::{load_split, write_file, DatasetManifest, FeatureBundle, Split, TextBank};
use crate::head::check_compatible;
use crate::objective::{batch_objective, LossBreakdown};

/// First/second moment estimates aligned with the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len()
    {
        return Err(Error::dim(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stack: AdapterStack,
    pub steps: Vec<StepRecord>,
    /// Sample-weighted mean losses per epoch.
    pub epochs: Vec<LossBreakdown>,
}

impl TrainReport {
    /// `epoch\tstep\ttotal\tcm\taacm`, one line per optimizer step.
    pub fn loss_log(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                s.epoch, s.step, s.losses.total, s.losses.cm, s.losses.aacm
            );
        }
        out
    }

    pub fn write_loss_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.loss_log().as_bytes())
    }
}

fn check_training_sample(b: &FeatureBundle, name: &str) -> Result<()> {
    if b.mask.is_none() {
        return Err(Error::Validation(format!("{name}: training sample has no mask")));
    }
    Ok(())
}

/// Trains a fresh stack on in-memory bundles.
pub fn train(train_set: &[FeatureBundle], bank: &TextBank, cfg: &TrainConfig) -> Result<TrainReport> {
    let named: Vec<(String, &FeatureBundle)> = train_set
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("sample {i}"), b))
        .collect();
    train_named(&named, bank, cfg)
}

fn train_named(
    samples: &[(String, &FeatureBundle)],
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let Some((_, first)) = samples.first() else {
        return Err(Error::Validation("training split is empty".into()));
    };
    let mut stack = init_stack(cfg, first.d_v(), bank.d_t(), cfg.seed)?;
    for (name, b) in samples {
        check_training_sample(b, name)?;
        check_compatible(b, &stack, bank).map_err(|e| match e {
            Error::Compat(msg) => Error::Compat(format!("{name}: {msg}")),
            other => other,
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(stack.param_count());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let batch: Vec<&FeatureBundle> = members.iter().map(|&i| samples[i].1).collect();
            let (losses, grad) = batch_objective(&batch, &stack, bank, cfg)?;
            let mut params = stack.flat_params();
            adam_step(&mut params, &grad.flatten(), &mut adam, cfg)?;
            stack.set_flat_params(&params)?;

            let k = batch.len() as f64;
            epoch_sum.total += losses.total * k;
            epoch_sum.cm += losses.cm * k;
            epoch_sum.aacm += losses.aacm * k;
            steps.push(StepRecord {
                epoch,
                step,
                losses,
            });
            step += 1;
        }
        let n = samples.len() as f64;
        epochs.push(LossBreakdown {
            total: epoch_sum.total / n,
            cm: epoch_sum.cm / n,
            aacm: epoch_sum.aacm / n,
        });
    }

    Ok(TrainReport {
        stack,
        steps,
        epochs,
    })
}

/// Loads the train split of a manifest (paths relative to `base`) and trains.
pub fn train_from_manifest(
    manifest: &DatasetManifest,
    base: &Path,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let loaded: Vec<(PathBuf, FeatureBundle)> = load_split(manifest, base, Split::Train)?;
    let named: Vec<(String, &FeatureBundle)> = loaded
        .iter()
        .map(|(p, b)| (p.display().to_string(), b))
        .collect();
    train_named(&named, bank, cfg)
}
