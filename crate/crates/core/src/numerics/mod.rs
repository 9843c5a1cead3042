//! Dense 64-bit kernels with vector-Jacobian products.
//!
//! Every kernel here is a pure function with a fixed summation order, so the
//! same inputs always produce the same bits. Kernels that sit on the training
//! path come with a `*_vjp` companion taking the upstream gradient of a scalar
//! loss with respect to the kernel output.

mod resize;

pub use resize::{bilinear_resize, bilinear_resize_vjp, gaussian_smooth};

use crate::error::{Error, Result};

/// Guard used by every norm division.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "tensor data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a tensor from nested rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Row-major grid of per-patch (or per-pixel) scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "grid has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Gradients of [`linear`] with respect to each of its operands.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub x: Tensor2,
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

fn check_linear(x: &Tensor2, weight: &Tensor2, bias_len: usize) -> Result<()> {
    if x.cols != weight.rows {
        return Err(Error::dim(format!(
            "linear: input has {} columns but weight has {} rows",
            x.cols, weight.rows
        )));
    }
    if bias_len != weight.cols {
        return Err(Error::dim(format!(
            "linear: bias has {bias_len} entries but weight has {} columns",
            weight.cols
        )));
    }
    Ok(())
}

/// `x · weight + bias`, broadcasting `bias` over rows.
pub fn linear(x: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    check_linear(x, weight, bias.len())?;
    let (n, d_in, d_out) = (x.rows, x.cols, weight.cols);
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let xi = x.row(i);
        let oi = &mut out[i * d_out..(i + 1) * d_out];
        for (k, &xik) in xi.iter().enumerate().take(d_in) {
            let wk = weight.row(k);
            for (o, &w) in oi.iter_mut().zip(wk) {
                *o += xik * w;
            }
        }
        for (o, &b) in oi.iter_mut().zip(bias) {
            *o += b;
        }
    }
    Tensor2::new(n, d_out, out)
}

/// Vector-Jacobian product of [`linear`].
pub fn linear_vjp(x: &Tensor2, weight: &Tensor2, upstream: &Tensor2) -> Result<LinearGrad> {
    check_linear(x, weight, weight.cols)?;
    if upstream.shape() != (x.rows, weight.cols) {
        return Err(Error::dim(format!(
            "linear_vjp: upstream {:?}, expected {:?}",
            upstream.shape(),
            (x.rows, weight.cols)
        )));
    }
    let (n, d_in, d_out) = (x.rows, x.cols, weight.cols);

    // dx = g · Wᵀ
    let mut dx = vec![0.0; n * d_in];
    for i in 0..n {
        let gi = upstream.row(i);
        for k in 0..d_in {
            let wk = weight.row(k);
            let mut acc = 0.0;
            for (&g, &w) in gi.iter().zip(wk) {
                acc += g * w;
            }
            dx[i * d_in + k] = acc;
        }
    }

    // dW = xᵀ · g, db = Σ_rows g
    let mut dw = vec![0.0; d_in * d_out];
    let mut db = vec![0.0; d_out];
    for i in 0..n {
        let xi = x.row(i);
        let gi = upstream.row(i);
        for (k, &xik) in xi.iter().enumerate() {
            let row = &mut dw[k * d_out..(k + 1) * d_out];
            for (d, &g) in row.iter_mut().zip(gi) {
                *d += xik * g;
            }
        }
        for (d, &g) in db.iter_mut().zip(gi) {
            *d += g;
        }
    }

    Ok(LinearGrad {
        x: Tensor2::new(n, d_in, dx)?,
        weight: Tensor2::new(d_in, d_out, dw)?,
        bias: db,
    })
}

pub fn leaky_relu(x: &Tensor2, slope: f64) -> Tensor2 {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Derivative at exactly zero is taken as 1.
pub fn leaky_relu_vjp(x: &Tensor2, slope: f64, upstream: &Tensor2) -> Result<Tensor2> {
    if x.shape() != upstream.shape() {
        return Err(Error::dim("leaky_relu_vjp: upstream shape differs from input"));
    }
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect();
    Tensor2::new(x.rows, x.cols, data)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Row-wise softmax of `scores / temperature` (stabilized by max-subtraction).
pub fn softmax_over_states(scores: &Tensor2, temperature: f64) -> Result<Tensor2> {
    check_temperature(temperature)?;
    let mut out = scores.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row
        .iter()
        .map(|v| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// VJP of [`softmax_over_states`], expressed through its output `probs`.
pub fn softmax_over_states_vjp(
    probs: &Tensor2,
    temperature: f64,
    upstream: &Tensor2,
) -> Result<Tensor2> {
    check_temperature(temperature)?;
    if probs.shape() != upstream.shape() {
        return Err(Error::dim("softmax_vjp: upstream shape differs from output"));
    }
    let mut out = Tensor2::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        softmax_vjp_row(probs.row(i), upstream.row(i), temperature, out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_vjp_row(p: &[f64], g: &[f64], temperature: f64, out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in out.iter_mut().zip(p).zip(g) {
        *o = pj * (gj - dot) / temperature;
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &ScoreGrid) -> ScoreGrid {
    x.map(sigmoid_scalar)
}

/// VJP of [`sigmoid`] in terms of its output.
pub fn sigmoid_vjp(out: &ScoreGrid, upstream: &ScoreGrid) -> Result<ScoreGrid> {
    if out.shape() != upstream.shape() {
        return Err(Error::dim("sigmoid_vjp: upstream shape differs from output"));
    }
    let values = out
        .values
        .iter()
        .zip(&upstream.values)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    ScoreGrid::new(out.height, out.width, values)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize_rows(x: &Tensor2, eps: f64) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row).max(eps);
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    out
}

fn check_cosine(a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::dim(format!(
            "cosine_rows: inner dimensions {} and {} differ",
            a.cols, b.cols
        )));
    }
    Ok(())
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_rows(a: &Tensor2, b: &Tensor2, eps: f64) -> Result<Tensor2> {
    check_cosine(a, b)?;
    let na: Vec<f64> = (0..a.rows).map(|i| norm(a.row(i)).max(eps)).collect();
    let nb: Vec<f64> = (0..b.rows).map(|j| norm(b.row(j)).max(eps)).collect();
    let mut out = Tensor2::zeros(a.rows, b.rows);
    for (i, &ni) in na.iter().enumerate() {
        let ai = a.row(i);
        for (j, &nj) in nb.iter().enumerate() {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.data[i * b.rows + j] = dot / (ni * nj);
        }
    }
    Ok(out)
}

/// VJP of [`cosine_rows`]; returns gradients for `a` and `b`.
///
/// Rows whose norm falls under `eps` see a constant denominator, so only the
/// direct term survives for them.
pub fn cosine_rows_vjp(
    a: &Tensor2,
    b: &Tensor2,
    eps: f64,
    upstream: &Tensor2,
) -> Result<(Tensor2, Tensor2)> {
    check_cosine(a, b)?;
    if upstream.shape() != (a.rows, b.rows) {
        return Err(Error::dim("cosine_rows_vjp: upstream shape mismatch"));
    }
    let raw_a: Vec<f64> = (0..a.rows).map(|i| norm(a.row(i))).collect();
    let raw_b: Vec<f64> = (0..b.rows).map(|j| norm(b.row(j))).collect();
    let d = a.cols;
    let mut da = Tensor2::zeros(a.rows, d);
    let mut db = Tensor2::zeros(b.rows, d);
    for (i, &ra) in raw_a.iter().enumerate() {
        let ai = a.row(i);
        let na = ra.max(eps);
        let a_guarded = ra < eps;
        for (j, &rb) in raw_b.iter().enumerate() {
            let g = upstream.get(i, j);
            if g == 0.0 {
                continue;
            }
            let bj = b.row(j);
            let nb = rb.max(eps);
            let b_guarded = rb < eps;
            let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            let cos = dot / (na * nb);
            let inv = 1.0 / (na * nb);
            let ca = if a_guarded { 0.0 } else { cos / (na * na) };
            let cb = if b_guarded { 0.0 } else { cos / (nb * nb) };
            {
                let dai = da.row_mut(i);
                for k in 0..d {
                    dai[k] += g * (bj[k] * inv - ca * ai[k]);
                }
            }
            let dbj = db.row_mut(j);
            for k in 0..d {
                dbj[k] += g * (ai[k] * inv - cb * bj[k]);
            }
        }
    }
    Ok((da, db))
}
