//! `.adft` feature bundles: one image's frozen backbone outputs.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ADF3" | u32 version=1 | u32 image_h | u32 image_w | u32 grid_h | u32 grid_w
//! | u32 n_layers | u32 d_v | u8 mask_present | n_layers x u32 layer index
//! | per layer: grid_h*grid_w*d_v f32 patch tokens (patch-major over the grid)
//! | d_v f32 CLS | if mask_present: image_h*image_w u8 mask in {0,255}
//! ```

use std::fmt;
use std::path::Path;

use super::binio::{put_f32s, put_u32, read_file, to_u32, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

const MAGIC: &[u8; 4] = b"ADF3";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Backbone layer ids, strictly increasing, one per entry of `patch_tokens`.
    pub layer_indices: Vec<u32>,
    /// Per layer, `grid_h * grid_w` rows of width `d_v`.
    pub patch_tokens: Vec<Tensor2>,
    /// Final-layer CLS token.
    pub cls_token: Vec<f64>,
    /// Ground-truth mask at image resolution with entries in {0, 1}.
    pub mask: Option<Vec<u8>>,
}

/// One broken invariant, named by field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl Violation {
    fn new(field: &'static str, rule: impl Into<String>) -> Self {
        Self {
            field,
            rule: rule.into(),
        }
    }
}

impl FeatureBundle {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d_v(&self) -> usize {
        self.patch_tokens
            .first()
            .map_or(self.cls_token.len(), Tensor2::cols)
    }

    pub fn mask_present(&self) -> bool {
        self.mask.is_some()
    }

    /// Position of backbone layer `layer` inside `patch_tokens`.
    pub fn layer_position(&self, layer: u32) -> Option<usize> {
        self.layer_indices.iter().position(|&l| l == layer)
    }

    pub fn tokens_for_layer(&self, layer: u32) -> Option<&Tensor2> {
        self.layer_position(layer).map(|p| &self.patch_tokens[p])
    }

    pub fn final_patch_tokens(&self) -> Option<&Tensor2> {
        self.patch_tokens.last()
    }
}

/// Lists every broken [`FeatureBundle`] invariant; empty means valid.
pub fn validate_bundle(b: &FeatureBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    for (field, v) in [
        ("image_h", b.image_h),
        ("image_w", b.image_w),
        ("grid_h", b.grid_h),
        ("grid_w", b.grid_w),
    ] {
        if v == 0 {
            out.push(Violation::new(field, "must be at least 1"));
        }
    }

    if b.layer_indices.is_empty() {
        out.push(Violation::new("layer_indices", "at least one layer is required"));
    }
    if b.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation::new(
            "layer_indices",
            format!("must be strictly increasing, got {:?}", b.layer_indices),
        ));
    }
    if b.layer_indices.len() != b.patch_tokens.len() {
        out.push(Violation::new(
            "patch_tokens",
            format!(
                "{} blocks for {} layer indices",
                b.patch_tokens.len(),
                b.layer_indices.len()
            ),
        ));
    }

    let d_v = b.d_v();
    if d_v == 0 {
        out.push(Violation::new("patch_tokens", "token dimension must be at least 1"));
    }
    let n = b.n_patches();
    if let Some((i, t)) = b.patch_tokens.iter().enumerate().find(|(_, t)| t.rows() != n) {
        out.push(Violation::new(
            "patch_tokens",
            format!("layer block {i} has {} rows, expected grid {n}", t.rows()),
        ));
    }
    if let Some((i, t)) = b.patch_tokens.iter().enumerate().find(|(_, t)| t.cols() != d_v) {
        out.push(Violation::new(
            "patch_tokens",
            format!("layer block {i} has width {}, expected {d_v}", t.cols()),
        ));
    }
    if b.patch_tokens.iter().any(|t| !t.is_finite()) {
        out.push(Violation::new("patch_tokens", "non-finite value"));
    }
    if b.cls_token.len() != d_v {
        out.push(Violation::new(
            "cls_token",
            format!("length {}, expected {d_v}", b.cls_token.len()),
        ));
    }
    if b.cls_token.iter().any(|v| !v.is_finite()) {
        out.push(Violation::new("cls_token", "non-finite value"));
    }

    if let Some(mask) = &b.mask {
        if mask.len() != b.image_h * b.image_w {
            out.push(Violation::new(
                "mask",
                format!(
                    "{} entries, expected {}x{}",
                    mask.len(),
                    b.image_h,
                    b.image_w
                ),
            ));
        }
        if let Some(bad) = mask.iter().find(|&&m| m > 1) {
            out.push(Violation::new(
                "mask",
                format!("entries must be in {{0,1}}, found {bad}"),
            ));
        }
    }
    out
}

fn violations_to_error(context: &str, v: &[Violation]) -> Error {
    let list: Vec<String> = v.iter().map(ToString::to_string).collect();
    Error::Validation(format!("{context}: {}", list.join("; ")))
}

pub fn encode_bundle(b: &FeatureBundle) -> Result<Vec<u8>> {
    let violations = validate_bundle(b);
    if !violations.is_empty() {
        return Err(violations_to_error("refusing to write invalid bundle", &violations));
    }
    let d_v = b.d_v();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (field, v) in [
        ("image_h", b.image_h),
        ("image_w", b.image_w),
        ("grid_h", b.grid_h),
        ("grid_w", b.grid_w),
        ("n_layers", b.layer_indices.len()),
        ("d_v", d_v),
    ] {
        put_u32(&mut out, to_u32(v, field)?);
    }
    out.push(u8::from(b.mask.is_some()));
    for &l in &b.layer_indices {
        put_u32(&mut out, l);
    }
    for t in &b.patch_tokens {
        put_f32s(&mut out, t.data());
    }
    put_f32s(&mut out, &b.cls_token);
    if let Some(mask) = &b.mask {
        out.extend(mask.iter().map(|&m| if m == 0 { 0u8 } else { 255u8 }));
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let mut r = ByteReader::new("feature bundle", bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let image_h = r.u32()? as usize;
    let image_w = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let grid_w = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let d_v = r.u32()? as usize;
    let flag_at = r.offset();
    let mask_present = match r.u8()? {
        0 => false,
        1 => true,
        other => return r.fail(flag_at, format!("mask_present flag is {other}")),
    };
    let mut layer_indices = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        layer_indices.push(r.u32()?);
    }
    let n = grid_h
        .checked_mul(grid_w)
        .and_then(|n| n.checked_mul(d_v).map(|_| n));
    let Some(n) = n else {
        return r.fail(r.offset(), "grid size overflow");
    };
    let mut patch_tokens = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        patch_tokens.push(Tensor2::new(n, d_v, r.f32s(n * d_v)?)?);
    }
    let cls_token = r.f32s(d_v)?;
    let mask = if mask_present {
        let at = r.offset();
        let raw = r.take(image_h.saturating_mul(image_w))?;
        let mut mask = Vec::with_capacity(raw.len());
        for (i, &m) in raw.iter().enumerate() {
            match m {
                0 => mask.push(0),
                255 => mask.push(1),
                other => {
                    return r.fail(at + i as u64, format!("mask byte {other} is not 0 or 255"))
                }
            }
        }
        Some(mask)
    } else {
        None
    };
    r.finish()?;

    let bundle = FeatureBundle {
        image_h,
        image_w,
        grid_h,
        grid_w,
        layer_indices,
        patch_tokens,
        cls_token,
        mask,
    };
    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        return Err(violations_to_error("invalid bundle", &violations));
    }
    Ok(bundle)
}

pub fn write_bundle(b: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bundle(b)?)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    decode_bundle(&read_file(path)?).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}
