//! Bottleneck adapters: `linear -> LeakyReLU -> linear`, no residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{leaky_relu, leaky_relu_vjp, linear, linear_vjp, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `d_in x d_hidden`
    pub w1: Tensor2,
    pub b1: Vec<f64>,
    /// `d_hidden x d_out`
    pub w2: Tensor2,
    pub b2: Vec<f64>,
    pub slope: f64,
}

/// Parameter gradients of one [`Adapter`], flattened in the order W1, b1, W2, b2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub w1: Tensor2,
    pub b1: Vec<f64>,
    pub w2: Tensor2,
    pub b2: Vec<f64>,
}

impl Adapter {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize, slope: f64) -> Self {
        Self {
            w1: Tensor2::zeros(d_in, d_hidden),
            b1: vec![0.0; d_hidden],
            w2: Tensor2::zeros(d_hidden, d_out),
            b2: vec![0.0; d_out],
            slope,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.d_in(), self.d_hidden(), self.d_out());
        i * h + h + h * o + o
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }

    /// Overwrites parameters from the front of `flat`; returns how many were used.
    pub fn load_params(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for dst in [
            self.w1.data_mut(),
            &mut self.b1[..],
            self.w2.data_mut(),
            &mut self.b2[..],
        ] {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        }
        at
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }
}

impl AdapterGrad {
    pub fn zeros_like(a: &Adapter) -> Self {
        Self {
            w1: Tensor2::zeros(a.d_in(), a.d_hidden()),
            b1: vec![0.0; a.d_hidden()],
            w2: Tensor2::zeros(a.d_hidden(), a.d_out()),
            b2: vec![0.0; a.d_out()],
        }
    }

    pub fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.push_flat(&mut v);
        v
    }

    pub fn add_assign(&mut self, other: &AdapterGrad) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.w2.add_assign(&other.w2)?;
        self.b1.iter_mut().zip(&other.b1).for_each(|(a, b)| *a += b);
        self.b2.iter_mut().zip(&other.b2).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}

fn check_input(adapter: &Adapter, x: &Tensor2) -> Result<()> {
    if x.cols() != adapter.d_in() {
        return Err(Error::dim(format!(
            "adapter expects width {}, got {}",
            adapter.d_in(),
            x.cols()
        )));
    }
    Ok(())
}

pub fn adapt(adapter: &Adapter, x: &Tensor2) -> Result<Tensor2> {
    check_input(adapter, x)?;
    let hidden = linear(x, &adapter.w1, &adapter.b1)?;
    linear(&leaky_relu(&hidden, adapter.slope), &adapter.w2, &adapter.b2)
}

/// Exact VJP of [`adapt`]: gradient for the input and for every parameter.
pub fn adapt_backward(
    adapter: &Adapter,
    x: &Tensor2,
    upstream: &Tensor2,
) -> Result<(Tensor2, AdapterGrad)> {
    check_input(adapter, x)?;
    if upstream.shape() != (x.rows(), adapter.d_out()) {
        return Err(Error::dim(format!(
            "adapt_backward: upstream {:?}, expected {:?}",
            upstream.shape(),
            (x.rows(), adapter.d_out())
        )));
    }
    let hidden = linear(x, &adapter.w1, &adapter.b1)?;
    let act = leaky_relu(&hidden, adapter.slope);
    let outer = linear_vjp(&act, &adapter.w2, upstream)?;
    let d_hidden = leaky_relu_vjp(&hidden, adapter.slope, &outer.x)?;
    let inner = linear_vjp(x, &adapter.w1, &d_hidden)?;
    Ok((
        inner.x,
        AdapterGrad {
            w1: inner.weight,
            b1: inner.bias,
            w2: outer.weight,
            b2: outer.bias,
        },
    ))
}

/// All trainable parameters of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    /// Backbone layer feeding each entry of `patch_adapters`.
    pub layer_indices: Vec<u32>,
    pub patch_adapters: Vec<Adapter>,
    pub cls_adapter: Adapter,
    pub text_adapter: Adapter,
    pub d_e: usize,
    /// Architecture digest of the config that produced this stack.
    pub arch_hash: [u8; 32],
}

/// Gradients mirroring [`AdapterStack`]'s layout.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrad {
    pub patch: Vec<AdapterGrad>,
    pub cls: AdapterGrad,
    pub text: AdapterGrad,
}

impl StackGrad {
    pub fn zeros_like(stack: &AdapterStack) -> Self {
        Self {
            patch: stack.patch_adapters.iter().map(AdapterGrad::zeros_like).collect(),
            cls: AdapterGrad::zeros_like(&stack.cls_adapter),
            text: AdapterGrad::zeros_like(&stack.text_adapter),
        }
    }

    /// Flattened in [`AdapterStack::flat_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.patch {
            g.push_flat(&mut out);
        }
        self.cls.push_flat(&mut out);
        self.text.push_flat(&mut out);
        out
    }

    pub fn add_assign(&mut self, other: &StackGrad) -> Result<()> {
        for (a, b) in self.patch.iter_mut().zip(&other.patch) {
            a.add_assign(b)?;
        }
        self.cls.add_assign(&other.cls)?;
        self.text.add_assign(&other.text)
    }
}

impl AdapterStack {
    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.patch_adapters
            .iter()
            .chain([&self.cls_adapter, &self.text_adapter])
    }

    fn adapters_mut(&mut self) -> impl Iterator<Item = &mut Adapter> {
        self.patch_adapters
            .iter_mut()
            .chain([&mut self.cls_adapter, &mut self.text_adapter])
    }

    /// Names in checkpoint order: `patch.L<layer>`..., `cls`, `text`.
    pub fn adapter_names(&self) -> Vec<String> {
        self.layer_indices
            .iter()
            .map(|l| format!("patch.L{l}"))
            .chain(["cls".to_string(), "text".to_string()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.adapters().map(Adapter::param_count).sum()
    }

    /// Patch adapters in order, then CLS, then text; each as W1, b1, W2, b2.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for a in self.adapters() {
            a.push_params(&mut out);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "flat parameter vector has {} entries, stack has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for a in self.adapters_mut() {
            at += a.load_params(&flat[at..]);
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.cls_adapter.d_in()
    }

    pub fn d_t(&self) -> usize {
        self.text_adapter.d_in()
    }

    pub fn final_layer(&self) -> u32 {
        *self.layer_indices.last().expect("stack has at least one stage")
    }
}

/// Glorot-uniform weights `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_adapter(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    slope: f64,
) -> Result<Adapter> {
    let mut a = Adapter::zeros(d_in, d_hidden, d_out, slope);
    for (w, fan_in, fan_out) in [(&mut a.w1, d_in, d_hidden), (&mut a.w2, d_hidden, d_out)] {
        let bound = glorot_bound(fan_in, fan_out);
        let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        w.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    }
    Ok(a)
}

/// Fresh stack for visual width `d_v` and text width `d_t`.
pub fn init_stack(cfg: &TrainConfig, d_v: usize, d_t: usize, seed: u64) -> Result<AdapterStack> {
    cfg.validate()?;
    if d_v == 0 || d_t == 0 {
        return Err(Error::Config(format!(
            "adapter input widths must be positive (d_v={d_v}, d_t={d_t})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = cfg.leaky_slope;
    let patch_adapters = cfg
        .layer_indices
        .iter()
        .map(|_| init_adapter(&mut rng, d_v, cfg.hidden_for(d_v), cfg.d_e, slope))
        .collect::<Result<Vec<_>>>()?;
    let cls_adapter = init_adapter(&mut rng, d_v, cfg.hidden_for(d_v), cfg.d_e, slope)?;
    let text_adapter = init_adapter(&mut rng, d_t, cfg.hidden_for(d_t), cfg.d_e, slope)?;
    Ok(AdapterStack {
        layer_indices: cfg.layer_indices.clone(),
        patch_adapters,
        cls_adapter,
        text_adapter,
        d_e: cfg.d_e,
        arch_hash: cfg.arch_hash(),
    })
}
