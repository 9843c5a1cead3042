use super::ScoreGrid;
use crate::error::{Error, Result};

/// Interpolation taps along one axis: `(lo, hi, frac)` per output index.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let max = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, max);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn check_dims(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!(
            "bilinear_resize: zero dimension ({h}x{w} -> {out_h}x{out_w})"
        )));
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
///
/// Output pixel `(i, j)` samples the source at
/// `((i + 0.5) * h / out_h - 0.5, (j + 0.5) * w / out_w - 0.5)`, clamped to the
/// source extent.
pub fn bilinear_resize(src: &ScoreGrid, out_h: usize, out_w: usize) -> Result<ScoreGrid> {
    let (h, w) = src.shape();
    check_dims(h, w, out_h, out_w)?;
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let s = src.values();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = (1.0 - fx) * s[y0 * w + x0] + fx * s[y0 * w + x1];
            let bottom = (1.0 - fx) * s[y1 * w + x0] + fx * s[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    ScoreGrid::new(out_h, out_w, out)
}

/// Adjoint of [`bilinear_resize`]: scatters an image-resolution gradient back
/// onto the `src_h x src_w` grid.
pub fn bilinear_resize_vjp(src_h: usize, src_w: usize, upstream: &ScoreGrid) -> Result<ScoreGrid> {
    let (out_h, out_w) = upstream.shape();
    check_dims(src_h, src_w, out_h, out_w)?;
    let ys = axis_taps(src_h, out_h);
    let xs = axis_taps(src_w, out_w);
    let g = upstream.values();
    let mut grad = vec![0.0; src_h * src_w];
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let gij = g[i * out_w + j];
            let top = (1.0 - fy) * gij;
            let bottom = fy * gij;
            grad[y0 * src_w + x0] += (1.0 - fx) * top;
            grad[y0 * src_w + x1] += fx * top;
            grad[y1 * src_w + x0] += (1.0 - fx) * bottom;
            grad[y1 * src_w + x1] += fx * bottom;
        }
    }
    ScoreGrid::new(src_h, src_w, grad)
}

/// Separable Gaussian blur, kernel truncated at 4σ, edges clamped.
pub fn gaussian_smooth(grid: &ScoreGrid, sigma: f64) -> Result<ScoreGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("smoothing sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = grid.shape();
    let src = grid.values();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = clamp(j as isize + t as isize - radius, w);
                acc += k * src[i * w + jj];
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = clamp(i as isize + t as isize - radius, h);
                acc += k * rows[ii * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    ScoreGrid::new(h, w, out)
}
