//! `.adck` adapter checkpoints.
//!
//! Layout (little-endian): `"ADCK" | u32 version=1 | 32-byte config hash |
//! u32 adapter count | per adapter: u16 name length, name bytes, u32 d_in,
//! u32 d_hidden, u32 d_out, f64 slope, W1, b1, W2, b2 as f64`.
//!
//! Adapters are stored as `patch.L<layer>` for each stage, then `cls`, then `text`.

use std::path::Path;

use crate::adapters::{Adapter, AdapterStack};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_io::{put_f64s, put_u32, read_file, to_u32, write_file, ByteReader};
use crate::numerics::Tensor2;

const MAGIC: &[u8; 4] = b"ADCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(stack: &AdapterStack) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&stack.arch_hash);
    let names = stack.adapter_names();
    put_u32(&mut out, to_u32(names.len(), "adapter count")?);
    for (name, a) in names.iter().zip(stack.adapters()) {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Validation(format!("adapter name {name:?} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(a.d_in(), "d_in")?);
        put_u32(&mut out, to_u32(a.d_hidden(), "d_hidden")?);
        put_u32(&mut out, to_u32(a.d_out(), "d_out")?);
        out.extend_from_slice(&a.slope.to_le_bytes());
        put_f64s(&mut out, a.w1.data());
        put_f64s(&mut out, &a.b1);
        put_f64s(&mut out, a.w2.data());
        put_f64s(&mut out, &a.b2);
    }
    Ok(out)
}

/// Parses a checkpoint without checking it against any configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<AdapterStack> {
    let mut r = ByteReader::new("checkpoint", bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let arch_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count_at = r.offset();
    let count = r.u32()? as usize;
    if count < 3 {
        return r.fail(count_at, format!("{count} adapters, need at least 3"));
    }

    let mut named = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let name_at = r.offset();
        let len = r.u16()? as usize;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(name_at, "adapter name is not UTF-8"),
        };
        let d_in = r.u32()? as usize;
        let d_hidden = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let slope = r.f64()?;
        let w1 = Tensor2::new(d_in, d_hidden, r.f64s(d_in.saturating_mul(d_hidden))?)?;
        let b1 = r.f64s(d_hidden)?;
        let w2 = Tensor2::new(d_hidden, d_out, r.f64s(d_hidden.saturating_mul(d_out))?)?;
        let b2 = r.f64s(d_out)?;
        named.push((
            name_at,
            name,
            Adapter {
                w1,
                b1,
                w2,
                b2,
                slope,
            },
        ));
    }
    r.finish()?;

    let (text_at, text_name, text_adapter) = named.pop().unwrap();
    let (cls_at, cls_name, cls_adapter) = named.pop().unwrap();
    if text_name != "text" {
        return r.fail(text_at, format!("expected adapter 'text', found {text_name:?}"));
    }
    if cls_name != "cls" {
        return r.fail(cls_at, format!("expected adapter 'cls', found {cls_name:?}"));
    }
    let mut layer_indices = Vec::with_capacity(named.len());
    let mut patch_adapters = Vec::with_capacity(named.len());
    for (at, name, a) in named {
        let Some(layer) = name.strip_prefix("patch.L").and_then(|l| l.parse().ok()) else {
            return r.fail(at, format!("unexpected adapter name {name:?}"));
        };
        layer_indices.push(layer);
        patch_adapters.push(a);
    }

    let d_e = text_adapter.d_out();
    let stack = AdapterStack {
        layer_indices,
        patch_adapters,
        cls_adapter,
        text_adapter,
        d_e,
        arch_hash,
    };
    if stack.adapters().any(|a| a.d_out() != d_e || !a.is_finite()) {
        return Err(Error::Validation(
            "checkpoint adapters disagree on output width or hold non-finite values".into(),
        ));
    }
    if stack
        .patch_adapters
        .iter()
        .any(|a| a.d_in() != stack.cls_adapter.d_in())
    {
        return Err(Error::Validation(
            "checkpoint patch and CLS adapters disagree on input width".into(),
        ));
    }
    Ok(stack)
}

pub fn save_checkpoint(stack: &AdapterStack, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(stack)?)
}

/// Loads a checkpoint and rejects it unless it was produced under an
/// architecture-compatible configuration.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<AdapterStack> {
    let path = path.as_ref();
    let stack = decode_checkpoint(&read_file(path)?)?;
    if stack.arch_hash != cfg.arch_hash() {
        return Err(Error::Compat(format!(
            "{} was trained under a different adapter configuration (d_e, layers, hidden width or slope)",
            path.display()
        )));
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_stack;

    fn cfg() -> TrainConfig {
        TrainConfig {
            d_e: 5,
            layer_indices: vec![6, 12],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let stack = init_stack(&cfg(), 8, 6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.adck");
        save_checkpoint(&stack, &path).unwrap();
        assert_eq!(load_checkpoint(&path, &cfg()).unwrap(), stack);
    }

    #[test]
    fn different_d_e_is_a_compat_error() {
        let stack = init_stack(&cfg(), 8, 6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.adck");
        save_checkpoint(&stack, &path).unwrap();
        let other = TrainConfig { d_e: 7, ..cfg() };
        assert!(matches!(load_checkpoint(&path, &other), Err(Error::Compat(_))));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_checkpoint(&init_stack(&cfg(), 8, 6, 1).unwrap()).unwrap();
        for cut in [2, 30, 45, bytes.len() - 3] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
    }
}
