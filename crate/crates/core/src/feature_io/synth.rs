//! Seeded synthetic feature bundles with a known normal/abnormal structure.
//!
//! Two orthogonal unit directions stand for "normal" and "abnormal" patch
//! content. Each image gets one patch-aligned rectangular defect; every patch
//! token is its class direction times `signal_strength` plus Gaussian noise
//! drawn independently per layer. Text templates are the two directions pushed
//! through a fixed random linear map into the text space, plus a little noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Deserialize;

use super::{
    write_bundle, write_manifest, write_textbank, DatasetManifest, FeatureBundle, ManifestEntry,
    Split, TextBank,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TEXTBANK_FILE: &str = "textbank.adtx";

/// Layer ids assigned to generated stages: `6, 12, 18, ...`.
pub const SYNTH_LAYER_STRIDE: u32 = 6;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Patch grid side length.
    pub grid: usize,
    /// Image side length in pixels.
    pub image_size: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_layers: usize,
    pub templates_per_state: usize,
    /// Target fraction of defective patches per image.
    pub anomaly_rate: f64,
    pub signal_strength: f64,
    pub noise_per_layer: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_test: 32,
            grid: 8,
            image_size: 32,
            d_v: 16,
            d_t: 12,
            n_layers: 4,
            templates_per_state: 3,
            anomaly_rate: 0.15,
            signal_strength: 1.0,
            noise_per_layer: 0.5,
            text_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth spec: {msg}")));
        for (name, v) in [
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("grid", self.grid),
            ("image_size", self.image_size),
            ("d_t", self.d_t),
            ("n_layers", self.n_layers),
            ("templates_per_state", self.templates_per_state),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.d_v < 2 {
            return bad("d_v must be at least 2".into());
        }
        if self.image_size < self.grid {
            return bad(format!(
                "image_size {} is smaller than grid {}",
                self.image_size, self.grid
            ));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 1.0) {
            return bad(format!("anomaly_rate must be in (0,1), got {}", self.anomaly_rate));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("noise_per_layer", self.noise_per_layer),
            ("text_noise", self.text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn layer_indices(&self) -> Vec<u32> {
        (1..=self.n_layers as u32).map(|k| k * SYNTH_LAYER_STRIDE).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Aligned with `manifest.entries`.
    pub bundles: Vec<FeatureBundle>,
    pub bank: TextBank,
    pub normal_direction: Vec<f64>,
    pub abnormal_direction: Vec<f64>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> Vec<&FeatureBundle> {
        self.manifest
            .entries
            .iter()
            .zip(&self.bundles)
            .filter(|(e, _)| e.split == split)
            .map(|(_, b)| b)
            .collect()
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws the anomaly rectangle as patch-grid bounds `(top, left, height, width)`.
fn draw_rect(rng: &mut ChaCha8Rng, grid: usize, rate: f64) -> (usize, usize, usize, usize) {
    let area = (rate * (grid * grid) as f64).max(1.0);
    let aspect: f64 = rng.random_range(0.5..2.0);
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid);
    let w = ((area / h as f64).round() as usize).clamp(1, grid);
    let top = rng.random_range(0..=grid - h);
    let left = rng.random_range(0..=grid - w);
    (top, left, h, w)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let normal_dir = unit_gaussian(&mut rng, spec.d_v);
    let abnormal_dir = {
        let mut v: Vec<f64> = (0..spec.d_v).map(|_| StandardNormal.sample(&mut rng)).collect();
        let proj: f64 = v.iter().zip(&normal_dir).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&normal_dir).for_each(|(a, b)| *a -= proj * b);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };

    // Fixed random map from visual space into text space.
    let scale = 1.0 / (spec.d_v as f64).sqrt();
    let text_map: Vec<f64> = (0..spec.d_t * spec.d_v)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x * scale)
        .collect();
    let text_noise = Normal::new(0.0, spec.text_noise).map_err(|e| Error::Config(e.to_string()))?;
    let templates = |dir: &[f64], rng: &mut ChaCha8Rng| -> Result<Tensor2> {
        let mut data = Vec::with_capacity(spec.templates_per_state * spec.d_t);
        for _ in 0..spec.templates_per_state {
            for r in 0..spec.d_t {
                let row = &text_map[r * spec.d_v..(r + 1) * spec.d_v];
                let v: f64 = row.iter().zip(dir).map(|(a, b)| a * b).sum();
                data.push(round32(v + text_noise.sample(rng)));
            }
        }
        Tensor2::new(spec.templates_per_state, spec.d_t, data)
    };
    let normal_t = templates(&normal_dir, &mut rng)?;
    let abnormal_t = templates(&abnormal_dir, &mut rng)?;
    let mut bank = TextBank::from_templates(normal_t, abnormal_t)?;
    bank.round_to_f32();

    let noise = Normal::new(0.0, spec.noise_per_layer).map_err(|e| Error::Config(e.to_string()))?;
    let layers = spec.layer_indices();
    let n_patches = spec.grid * spec.grid;
    let total = spec.n_train + spec.n_test;
    let mut entries = Vec::with_capacity(total);
    let mut bundles = Vec::with_capacity(total);

    for idx in 0..total {
        let (split, local) = if idx < spec.n_train {
            (Split::Train, idx)
        } else {
            (Split::Test, idx - spec.n_train)
        };
        let (top, left, rh, rw) = draw_rect(&mut rng, spec.grid, spec.anomaly_rate);
        let inside = |r: usize, c: usize| r >= top && r < top + rh && c >= left && c < left + rw;
        let patch_abnormal: Vec<bool> = (0..n_patches)
            .map(|p| inside(p / spec.grid, p % spec.grid))
            .collect();

        let mut patch_tokens = Vec::with_capacity(layers.len());
        for _ in &layers {
            let mut data = Vec::with_capacity(n_patches * spec.d_v);
            for &abn in &patch_abnormal {
                let dir = if abn { &abnormal_dir } else { &normal_dir };
                for &d in dir {
                    data.push(round32(d * spec.signal_strength + noise.sample(&mut rng)));
                }
            }
            patch_tokens.push(Tensor2::new(n_patches, spec.d_v, data)?);
        }

        let last = patch_tokens.last().expect("n_layers >= 1");
        let mut cls = vec![0.0; spec.d_v];
        for p in 0..n_patches {
            cls.iter_mut().zip(last.row(p)).for_each(|(c, v)| *c += v);
        }
        let cls = cls.into_iter().map(|c| round32(c / n_patches as f64)).collect();

        let s = spec.image_size;
        let mask = (0..s * s)
            .map(|px| {
                let (y, x) = (px / s, px % s);
                u8::from(inside(y * spec.grid / s, x * spec.grid / s))
            })
            .collect();

        bundles.push(FeatureBundle {
            image_h: s,
            image_w: s,
            grid_h: spec.grid,
            grid_w: spec.grid,
            layer_indices: layers.clone(),
            patch_tokens,
            cls_token: cls,
            mask: Some(mask),
        });
        entries.push(ManifestEntry {
            split,
            category: "synthetic".into(),
            path: format!("{split}_{local:04}.adft").into(),
        });
    }

    Ok(SynthDataset {
        manifest: DatasetManifest {
            entries,
            seed: Some(spec.seed),
        },
        bundles,
        bank,
        normal_direction: normal_dir,
        abnormal_direction: abnormal_dir,
    })
}

/// Writes bundles, `manifest.tsv` and `textbank.adtx` into `dir`.
pub fn write_synth(data: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, bundle) in data.manifest.entries.iter().zip(&data.bundles) {
        write_bundle(bundle, dir.join(&entry.path))?;
    }
    write_manifest(&data.manifest, dir.join(MANIFEST_FILE))?;
    write_textbank(&data.bank, dir.join(TEXTBANK_FILE))
}
