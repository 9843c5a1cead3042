//! Anomaly maps on disk: PFM for exact f32 values, PGM for quick viewing.
//!
//! PFM stores rows bottom to top; both readers and writers here follow that.

use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_io::{read_file, write_file};
use crate::numerics::ScoreGrid;

const PFM: &str = "pfm";

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            what: PFM,
            offset: start as u64,
            msg: "truncated header".into(),
        });
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format {
        what: PFM,
        offset: start as u64,
        msg: "header is not ASCII".into(),
    })
}

/// Grayscale little-endian PFM (scale `-1.0`).
pub fn encode_pfm(grid: &ScoreGrid) -> Vec<u8> {
    let (h, w) = grid.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for i in (0..h).rev() {
        for j in 0..w {
            out.extend_from_slice(&(grid.get(i, j) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ScoreGrid> {
    let fail = |offset: usize, msg: String| Error::Format {
        what: PFM,
        offset: offset as u64,
        msg,
    };
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "Pf" {
        return Err(fail(0, format!("expected grayscale magic Pf, found {magic:?}")));
    }
    let mut dim = |name: &str| -> Result<usize> {
        let at = pos;
        let tok = header_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| fail(at, format!("bad {name} {tok:?}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let at = pos;
    let scale: f64 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| fail(at, "bad scale".into()))?;
    if scale >= 0.0 {
        return Err(fail(at, "only little-endian (negative scale) maps are supported".into()));
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let need = h * w * 4;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != need {
        return Err(fail(
            pos,
            format!("expected {need} data bytes, found {}", data.len()),
        ));
    }
    let mut values = vec![0.0; h * w];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        let (row_from_bottom, j) = (k / w, k % w);
        values[(h - 1 - row_from_bottom) * w + j] = f64::from(v);
    }
    ScoreGrid::new(h, w, values)
}

pub fn write_pfm(grid: &ScoreGrid, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pfm(grid))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ScoreGrid> {
    decode_pfm(&read_file(path.as_ref())?)
}

/// 8-bit binary PGM; values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn encode_pgm(grid: &ScoreGrid) -> Vec<u8> {
    let (h, w) = grid.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        grid.values()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(grid: &ScoreGrid, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(grid))
}
