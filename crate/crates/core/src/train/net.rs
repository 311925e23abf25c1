//! Two-block segmentation net with a rotation-invariant first convolution
//! and a hand-written backward pass.
//!
//! ```text
//! x ─ block1 (group conv, R orientations) ─ pool over each 4-tuple ─ +b1 ─ ReLU
//!   ─ block2 (scatter conv) ─ +b2 ─ ReLU ─ 1×1 head ─ logits
//! ```
//!
//! `R = 1` is a plain convolution with no pooling, `R = 4` a p4 convolution
//! and `R ∈ {8, 16}` a steerable bank whose first-quadrant kernels each run
//! one p4 pass.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::{group_layer_backward, pool_backward_max};
use crate::error::{Error, Result};
use crate::group::{group_conv_scatter_reuse, subgroup_pool_max, GroupSpec, OrientationArgmax};
use crate::scatter::{scatter_conv_multi, MultCounter};
use crate::steerable::{
    regularizer_grad, steerable_backward, steerable_conv_scatter, total_loss, SteerableBasis,
};
use crate::tensor::{FilterBank, OrientedFeature, Tensor3};

/// How block 1 pools each 4-tuple of orientations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// 1, 4, 8 or 16.
    pub orientations: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub classes: usize,
    pub pool: PoolKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            orientations: 4,
            hidden: 8,
            kernel: 3,
            classes: 3,
            pool: PoolKind::Max,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 4, 8, 16].contains(&self.orientations) {
            return Err(Error::InvalidArgument(format!(
                "orientations must be one of 1, 4, 8, 16, got {}",
                self.orientations
            )));
        }
        if self.hidden == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(
                "need >= 1 hidden channel and >= 2 classes".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(self.kernel, self.kernel));
        }
        Ok(())
    }

    /// Channels leaving block 1 after pooling.
    pub fn block1_channels(&self) -> usize {
        self.hidden * (self.orientations / 4).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block1 {
    Plain(FilterBank<f64>),
    Steerable(SteerableBasis),
}

/// Every trainable tensor of the net. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub block1: Block1,
    pub b1: Vec<f64>,
    pub w2: FilterBank<f64>,
    pub b2: Vec<f64>,
    /// `classes × hidden × 1 × 1`.
    pub w3: FilterBank<f64>,
    pub b3: Vec<f64>,
}

impl Params {
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(7);
        match &mut self.block1 {
            Block1::Plain(w) => v.push(w.data_mut()),
            Block1::Steerable(b) => {
                v.push(b.f_x.data_mut());
                v.push(b.f_y.data_mut());
            }
        }
        v.push(&mut self.b1);
        v.push(self.w2.data_mut());
        v.push(&mut self.b2);
        v.push(self.w3.data_mut());
        v.push(&mut self.b3);
        v
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(7);
        match &self.block1 {
            Block1::Plain(w) => v.push(w.data()),
            Block1::Steerable(b) => {
                v.push(b.f_x.data());
                v.push(b.f_y.data());
            }
        }
        v.extend([
            &self.b1[..],
            self.w2.data(),
            &self.b2[..],
            self.w3.data(),
            &self.b3[..],
        ]);
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (d, s) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, &b) in d.iter_mut().zip(s) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

/// Intermediate values kept by the forward pass for backward.
struct Trace {
    x: Tensor3<f64>,
    argmax: Option<OrientationArgmax>,
    a1: Tensor3<f64>,
    a2: Tensor3<f64>,
    logits: Tensor3<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub argmax: Option<Vec<usize>>,
    pub relu1: Vec<bool>,
    pub relu2: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    pub config: NetConfig,
    pub params: Params,
}

fn he_uniform(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> FilterBank<f64> {
    let a = (6.0 / (ci * k * k) as f64).sqrt();
    let d = Uniform::new_inclusive(-a, a);
    FilterBank::from_fn(co, ci, k, k, |_, _, _, _| d.sample(rng))
}

fn add_bias_relu(z: &mut Tensor3<f64>, bias: &[f64]) {
    for (c, &b) in bias.iter().enumerate() {
        z.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v + b).max(0.0));
    }
}

/// Zeroes `grad` where the ReLU output `a` was clamped and returns the
/// per-channel bias gradient.
fn relu_backward(grad: &mut Tensor3<f64>, a: &Tensor3<f64>) -> Vec<f64> {
    (0..a.channels())
        .map(|c| {
            let mut sum = 0.0;
            for (g, &v) in grad.channel_mut(c).iter_mut().zip(a.channel(c)) {
                if v <= 0.0 {
                    *g = 0.0;
                }
                sum += *g;
            }
            sum
        })
        .collect()
}

fn subgroup_pool_avg(f: &OrientedFeature<f64>) -> Tensor3<f64> {
    let (co_n, r_n, h, w) = f.shape();
    let pooled = r_n / 4;
    let mut out = Tensor3::zeros(co_n * pooled, h, w);
    for co in 0..co_n {
        for b in 0..pooled {
            let dst = out.channel_mut(co * pooled + b);
            for r in b * 4..b * 4 + 4 {
                for (d, &s) in dst.iter_mut().zip(f.slice(co, r)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= 0.25);
        }
    }
    out
}

fn subgroup_pool_avg_backward(g: &Tensor3<f64>, co_n: usize, r_n: usize) -> OrientedFeature<f64> {
    let pooled = r_n / 4;
    let mut out = OrientedFeature::zeros(co_n, r_n, g.height(), g.width());
    for co in 0..co_n {
        for b in 0..pooled {
            let src: Vec<f64> = g
                .channel(co * pooled + b)
                .iter()
                .map(|v| v * 0.25)
                .collect();
            for r in b * 4..b * 4 + 4 {
                out.slice_mut(co, r).copy_from_slice(&src);
            }
        }
    }
    out
}

/// Mean per-pixel softmax cross-entropy of `C×H×W` logits against an `H·W`
/// label grid, with its gradient `(softmax - onehot) / (H·W)`.
pub fn softmax_cross_entropy(
    logits: &Tensor3<f64>,
    labels: &[usize],
) -> Result<(f64, Tensor3<f64>)> {
    let (c_n, h, w) = logits.shape();
    let n = h * w;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {h}x{w} grid",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c_n) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c_n} classes"
        )));
    }
    let mut grad = Tensor3::zeros(c_n, h, w);
    let mut loss = 0.0;
    let data = logits.data();
    let g = grad.data_mut();
    for (p, &label) in labels.iter().enumerate() {
        let m = (0..c_n)
            .map(|c| data[c * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c_n).map(|c| (data[c * n + p] - m).exp()).sum();
        loss += z.ln() + m - data[label * n + p];
        for c in 0..c_n {
            let prob = (data[c * n + p] - m).exp() / z;
            g[c * n + p] = (prob - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

impl MicroNet {
    /// He-uniform weights and zero biases, deterministic in `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, hdn) = (config.kernel, config.hidden);
        let w1 = he_uniform(&mut rng, hdn, 1, k);
        let block1 = if config.orientations >= 8 {
            let f_y = w1;
            let f_x = he_uniform(&mut rng, hdn, 1, k);
            Block1::Steerable(SteerableBasis::new(f_x, f_y)?)
        } else {
            Block1::Plain(w1)
        };
        let c1 = config.block1_channels();
        let w2 = he_uniform(&mut rng, hdn, c1, k);
        let w3 = he_uniform(&mut rng, config.classes, hdn, 1);
        Ok(Self {
            config,
            params: Params {
                block1,
                b1: vec![0.0; c1],
                w2,
                b2: vec![0.0; hdn],
                w3,
                b3: vec![0.0; config.classes],
            },
        })
    }

    pub fn basis(&self) -> Option<&SteerableBasis> {
        match &self.params.block1 {
            Block1::Steerable(b) => Some(b),
            Block1::Plain(_) => None,
        }
    }

    fn block1_raw(&self, x: &Tensor3<f64>) -> Result<OrientedFeature<f64>> {
        let mut counter = MultCounter::new();
        match (&self.params.block1, self.config.orientations) {
            (Block1::Plain(w), 1) => {
                OrientedFeature::from_channels(scatter_conv_multi(x, w, &mut counter)?, 1)
            }
            (Block1::Plain(w), _) => group_conv_scatter_reuse(x, w, GroupSpec::p4(), &mut counter),
            (Block1::Steerable(b), r) => steerable_conv_scatter(x, b, r, &mut counter),
        }
    }

    fn pool(
        &self,
        raw: &OrientedFeature<f64>,
    ) -> Result<(Tensor3<f64>, Option<OrientationArgmax>)> {
        if self.config.orientations == 1 {
            return Ok((raw.clone().into_channels(), None));
        }
        match self.config.pool {
            PoolKind::Max => {
                let (p, arg) = subgroup_pool_max(raw, 4)?;
                Ok((p.into_channels(), Some(arg)))
            }
            PoolKind::Avg => Ok((subgroup_pool_avg(raw), None)),
        }
    }

    /// Block-1 output after pooling, bias and ReLU.
    pub fn block1_features(&self, x: &Tensor3<f64>) -> Result<Tensor3<f64>> {
        let (mut a1, _) = self.pool(&self.block1_raw(x)?)?;
        add_bias_relu(&mut a1, &self.params.b1);
        Ok(a1)
    }

    /// Which piece of the piecewise-linear net `x` lands on: max-pool winners
    /// and the ReLU masks of both blocks.
    pub fn activation_pattern(&self, x: &Tensor3<f64>) -> Result<ActivationPattern> {
        let t = self.forward_trace(x)?;
        Ok(ActivationPattern {
            argmax: t.argmax.map(|a| a.index),
            relu1: t.a1.data().iter().map(|&v| v > 0.0).collect(),
            relu2: t.a2.data().iter().map(|&v| v > 0.0).collect(),
        })
    }

    fn forward_trace(&self, x: &Tensor3<f64>) -> Result<Trace> {
        if x.channels() != 1 {
            return Err(Error::ChannelMismatch {
                input: x.channels(),
                filter: 1,
            });
        }
        let (mut a1, argmax) = self.pool(&self.block1_raw(x)?)?;
        add_bias_relu(&mut a1, &self.params.b1);
        let mut a2 = scatter_conv_multi(&a1, &self.params.w2, &mut MultCounter::new())?;
        add_bias_relu(&mut a2, &self.params.b2);
        let (h, w) = (x.height(), x.width());
        let mut logits = Tensor3::zeros(self.config.classes, h, w);
        for k in 0..self.config.classes {
            let dst = logits.channel_mut(k);
            dst.fill(self.params.b3[k]);
            for c in 0..self.config.hidden {
                let wk = self.params.w3.at(k, c, 0, 0);
                for (d, &a) in dst.iter_mut().zip(a2.channel(c)) {
                    *d += wk * a;
                }
            }
        }
        Ok(Trace {
            x: x.clone(),
            argmax,
            a1,
            a2,
            logits,
        })
    }

    /// `C×H×W` class scores.
    pub fn forward(&self, x: &Tensor3<f64>) -> Result<Tensor3<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Per-pixel argmax class, ties to the smallest index.
    pub fn predict(&self, x: &Tensor3<f64>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let n = x.height() * x.width();
        Ok((0..n)
            .map(|p| {
                (0..self.config.classes)
                    .fold((0, f64::NEG_INFINITY), |best, c| {
                        let v = logits.channel(c)[p];
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Cross-entropy of one sample and its gradient with respect to every
    /// parameter.
    pub fn loss_and_grad(&self, x: &Tensor3<f64>, labels: &[usize]) -> Result<(f64, Params)> {
        let t = self.forward_trace(x)?;
        let (ce, d_logits) = softmax_cross_entropy(&t.logits, labels)?;
        let mut grad = self.params.zeros_like();
        let (hdn, classes) = (self.config.hidden, self.config.classes);

        // Head.
        let mut da2 = Tensor3::zeros(hdn, x.height(), x.width());
        for k in 0..classes {
            let g = d_logits.channel(k);
            grad.b3[k] = g.iter().sum();
            for c in 0..hdn {
                let wk = self.params.w3.at(k, c, 0, 0);
                let a = t.a2.channel(c);
                grad.w3.data_mut()[k * hdn + c] = g.iter().zip(a).map(|(p, q)| p * q).sum();
                for (d, &gv) in da2.channel_mut(c).iter_mut().zip(g) {
                    *d += wk * gv;
                }
            }
        }

        // Block 2.
        grad.b2 = relu_backward(&mut da2, &t.a2);
        let delta2 = OrientedFeature::from_channels(da2, 1)?;
        let g2 = group_layer_backward(&delta2, &t.a1, &self.params.w2, GroupSpec::trivial())?;
        grad.w2 = g2.d_weights;
        let mut da1 = g2.d_input;

        // Block 1.
        grad.b1 = relu_backward(&mut da1, &t.a1);
        let r = self.config.orientations;
        let d_raw = match (r, &t.argmax) {
            (1, _) => OrientedFeature::from_channels(da1, 1)?,
            (_, Some(arg)) => pool_backward_max(&da1, arg)?,
            (_, None) => subgroup_pool_avg_backward(&da1, hdn, r),
        };
        grad.block1 = match &self.params.block1 {
            Block1::Plain(w) => {
                let group = if r == 1 {
                    GroupSpec::trivial()
                } else {
                    GroupSpec::p4()
                };
                Block1::Plain(group_layer_backward(&d_raw, &t.x, w, group)?.d_weights)
            }
            Block1::Steerable(b) => {
                let (_, dfx, dfy) = steerable_backward(&d_raw, &t.x, b, r)?;
                Block1::Steerable(SteerableBasis::new(dfx, dfy)?)
            }
        };
        Ok((ce, grad))
    }

    /// Regularization value and gradient for a steerable block 1; zero
    /// otherwise.
    pub fn regularizer(
        &self,
        lambda_mag: f64,
        lambda_orth: f64,
        eps: f64,
    ) -> Result<(f64, Option<Params>)> {
        let Some(basis) = self.basis() else {
            return Ok((0.0, None));
        };
        let value = total_loss(0.0, basis, lambda_mag, lambda_orth, eps)?;
        let (gx, gy) = regularizer_grad(basis, lambda_mag, lambda_orth, eps)?;
        let mut grad = self.params.zeros_like();
        grad.block1 = Block1::Steerable(SteerableBasis::new(gx, gy)?);
        Ok((value, Some(grad)))
    }
}
