//! `.adtx` text banks: frozen prompt embeddings per state.
//!
//! Layout (little-endian): `"ADTX" | u32 version=1 | u32 d_t |
//! u32 templates_per_state | normal templates f32 | abnormal templates f32 |
//! 2*d_t f32 pooled`.

use std::path::Path;

use super::binio::{put_f32s, put_u32, read_file, to_u32, write_file, ByteReader};
use super::Violation;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, Tensor2, NORM_EPS};

const MAGIC: &[u8; 4] = b"ADTX";
const VERSION: u32 = 1;
const POOLED_TOL: f64 = 1e-6;

pub const NORMAL: usize = 0;
pub const ABNORMAL: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub normal_templates: Tensor2,
    pub abnormal_templates: Tensor2,
    /// Row 0 normal, row 1 abnormal; unit norm.
    pub pooled: Tensor2,
}

impl TextBank {
    /// Builds a bank and fills `pooled` from the templates.
    pub fn from_templates(normal: Tensor2, abnormal: Tensor2) -> Result<Self> {
        let mut bank = Self {
            pooled: Tensor2::zeros(2, normal.cols()),
            normal_templates: normal,
            abnormal_templates: abnormal,
        };
        bank.pooled = pool_prompts(&bank)?;
        Ok(bank)
    }

    pub fn d_t(&self) -> usize {
        self.normal_templates.cols()
    }

    pub fn templates_per_state(&self) -> usize {
        self.normal_templates.rows()
    }

    /// Rounds every stored value to f32 precision, the on-disk representation.
    pub fn round_to_f32(&mut self) {
        for t in [
            &mut self.normal_templates,
            &mut self.abnormal_templates,
            &mut self.pooled,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

fn mean_rows(t: &Tensor2) -> Vec<f64> {
    let mut acc = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (a, v) in acc.iter_mut().zip(t.row(i)) {
            *a += v;
        }
    }
    let n = t.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Per state: mean over templates, then ℓ2-normalize.
pub fn pool_prompts(bank: &TextBank) -> Result<Tensor2> {
    let (n, a) = (&bank.normal_templates, &bank.abnormal_templates);
    if n.rows() == 0 || a.rows() == 0 {
        return Err(Error::Validation(
            "text bank needs at least one template per state".into(),
        ));
    }
    if n.shape() != a.shape() {
        return Err(Error::Validation(format!(
            "normal templates {:?} and abnormal templates {:?} differ in shape",
            n.shape(),
            a.shape()
        )));
    }
    let means = Tensor2::from_rows(&[mean_rows(n), mean_rows(a)])?;
    Ok(l2_normalize_rows(&means, NORM_EPS))
}

pub fn validate_textbank(bank: &TextBank) -> Vec<Violation> {
    let mut out = Vec::new();
    let d_t = bank.d_t();
    if d_t == 0 {
        out.push(Violation {
            field: "d_t",
            rule: "must be at least 1".into(),
        });
    }
    if bank.templates_per_state() == 0 {
        out.push(Violation {
            field: "templates_per_state",
            rule: "must be at least 1".into(),
        });
    }
    if bank.abnormal_templates.shape() != bank.normal_templates.shape() {
        out.push(Violation {
            field: "abnormal_templates",
            rule: "shape differs from normal_templates".into(),
        });
    }
    if bank.pooled.shape() != (2, d_t) {
        out.push(Violation {
            field: "pooled",
            rule: format!("shape {:?}, expected (2, {d_t})", bank.pooled.shape()),
        });
        return out;
    }
    if ![&bank.normal_templates, &bank.abnormal_templates, &bank.pooled]
        .iter()
        .all(|t| t.is_finite())
    {
        out.push(Violation {
            field: "templates",
            rule: "non-finite value".into(),
        });
        return out;
    }
    for i in 0..2 {
        let norm = bank.pooled.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > POOLED_TOL {
            out.push(Violation {
                field: "pooled",
                rule: format!("row {i} has norm {norm}, expected 1"),
            });
        }
    }
    if let Ok(expected) = pool_prompts(bank) {
        let worst = expected
            .data()
            .iter()
            .zip(bank.pooled.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > POOLED_TOL {
            out.push(Violation {
                field: "pooled",
                rule: format!("differs from pooled templates by {worst:e}"),
            });
        }
    }
    out
}

pub fn encode_textbank(bank: &TextBank) -> Result<Vec<u8>> {
    let violations = validate_textbank(bank);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(format!(
            "refusing to write invalid text bank: {}",
            list.join("; ")
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(bank.d_t(), "d_t")?);
    put_u32(&mut out, to_u32(bank.templates_per_state(), "templates_per_state")?);
    put_f32s(&mut out, bank.normal_templates.data());
    put_f32s(&mut out, bank.abnormal_templates.data());
    put_f32s(&mut out, bank.pooled.data());
    Ok(out)
}

pub fn decode_textbank(bytes: &[u8]) -> Result<TextBank> {
    let mut r = ByteReader::new("text bank", bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let d_t = r.u32()? as usize;
    let k = r.u32()? as usize;
    let Some(n) = d_t.checked_mul(k) else {
        return r.fail(r.offset(), "template block size overflow");
    };
    let normal = Tensor2::new(k, d_t, r.f32s(n)?)?;
    let abnormal = Tensor2::new(k, d_t, r.f32s(n)?)?;
    let pooled = Tensor2::new(2, d_t, r.f32s(2 * d_t)?)?;
    r.finish()?;
    let bank = TextBank {
        normal_templates: normal,
        abnormal_templates: abnormal,
        pooled,
    };
    let violations = validate_textbank(&bank);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(format!("invalid text bank: {}", list.join("; "))));
    }
    Ok(bank)
}

pub fn write_textbank(bank: &TextBank, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_textbank(bank)?)
}

pub fn read_textbank(path: impl AsRef<Path>) -> Result<TextBank> {
    decode_textbank(&read_file(path.as_ref())?)
}
