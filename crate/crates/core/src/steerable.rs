//! Arbitrary-angle rotation-invariant convolution from a steerable pair of
//! base filters.
//!
//! A filter at angle `θ` is `sin θ · f_x + cos θ · f_y`, so `θ = 0` gives
//! `f_y`. Only angles in the first quadrant are synthesized; the kernel for
//! `θ + r·π/2` is the `r`-quarter-turn rotation of the kernel for `θ`, which
//! also lets the group scatter share channel dots across each 4-tuple.

use std::f64::consts::{FRAC_PI_2, TAU};

use crate::backward::group_layer_backward;
use crate::error::{Error, Result};
use crate::group::{group_conv_scatter_reuse, transform_kernel, GroupElement, GroupSpec};
use crate::reference::conv_gather_same;
use crate::scatter::MultCounter;
use crate::tensor::{max_rel_diff, FilterBank, OrientedFeature, Tensor3};

/// Default stabilizer in the orthogonality loss denominator.
pub const DEFAULT_ORTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SteerableBasis {
    pub f_x: FilterBank<f64>,
    pub f_y: FilterBank<f64>,
}

impl SteerableBasis {
    pub fn new(f_x: FilterBank<f64>, f_y: FilterBank<f64>) -> Result<Self> {
        if f_x.shape() != f_y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "basis filters differ: {:?} vs {:?}",
                f_x.shape(),
                f_y.shape()
            )));
        }
        let (kh, kw) = (f_x.kernel_h(), f_x.kernel_w());
        if kh != kw || kh % 2 == 0 {
            return Err(Error::UnsupportedKernel(kh, kw));
        }
        Ok(Self { f_x, f_y })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.f_x.shape()
    }
}

/// `N` evenly spaced angles `θ_k = k·2π/N`, `N` a positive multiple of 4.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    count: usize,
    angles: Vec<f64>,
}

impl OrientationSet {
    pub fn new(count: usize) -> Result<Self> {
        if count < 4 || !count.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "orientation count must be a positive multiple of 4, got {count}"
            )));
        }
        let angles = (0..count).map(|k| k as f64 * TAU / count as f64).collect();
        Ok(Self { count, angles })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Angles in `[0, π/2)`.
    pub fn first_quadrant(&self) -> &[f64] {
        &self.angles[..self.count / 4]
    }
}

pub fn steer(basis: &SteerableBasis, theta: f64) -> FilterBank<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = basis.f_x.clone();
    for (o, (&x, &y)) in out
        .data_mut()
        .iter_mut()
        .zip(basis.f_x.data().iter().zip(basis.f_y.data()))
    {
        *o = s * x + c * y;
    }
    out
}

/// One kernel of an orientation bank and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedKernel {
    pub kernel: FilterBank<f64>,
    /// `θ_j + quadrant·π/2`.
    pub angle: f64,
    /// Index `j` of the first-quadrant angle the kernel was derived from.
    pub base_index: usize,
    pub base_angle: f64,
    pub quadrant: u8,
}

/// Orientation bank for `n` angles. Entry `j·4 + r` is the quarter-turn
/// rotation `R_r` of `steer(θ_j)`; only the `n/4` first-quadrant kernels are
/// actually steered.
pub fn build_orientation_bank(basis: &SteerableBasis, n: usize) -> Result<Vec<OrientedKernel>> {
    let set = OrientationSet::new(n)?;
    let mut bank = Vec::with_capacity(n);
    for (j, &theta) in set.first_quadrant().iter().enumerate() {
        let base = steer(basis, theta);
        for r in 0..4u8 {
            let kernel = if r == 0 {
                base.clone()
            } else {
                transform_kernel(&base, GroupElement::rotation(r))?
            };
            bank.push(OrientedKernel {
                kernel,
                angle: theta + f64::from(r) * FRAC_PI_2,
                base_index: j,
                base_angle: theta,
                quadrant: r,
            });
        }
    }
    Ok(bank)
}

/// Largest normwise deviation between the quadrant-reuse bank and steering
/// every angle directly. Zero (up to rounding) for a rotation-covariant
/// basis; a diagnostic for learned ones.
pub fn quadrant_reuse_deviation(basis: &SteerableBasis, n: usize) -> Result<f64> {
    Ok(build_orientation_bank(basis, n)?
        .iter()
        .map(|k| max_rel_diff(k.kernel.data(), steer(basis, k.angle).data()))
        .fold(0.0, f64::max))
}

/// Per-filter flattened weights: filter `b` is output channel `b`.
fn filters(bank: &FilterBank<f64>) -> impl Iterator<Item = &[f64]> {
    let per = bank.in_channels() * bank.kernel_h() * bank.kernel_w();
    bank.data().chunks(per.max(1))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over filters of `(‖w_x‖ - ‖w_y‖)²`.
pub fn loss_mag(basis: &SteerableBasis) -> f64 {
    let b = basis.f_x.out_channels().max(1) as f64;
    filters(&basis.f_x)
        .zip(filters(&basis.f_y))
        .map(|(x, y)| (norm(x) - norm(y)).powi(2))
        .sum::<f64>()
        / b
}

/// Gradient of [`loss_mag`] with respect to `(f_x, f_y)`. A zero filter
/// contributes a zero subgradient.
pub fn loss_mag_grad(basis: &SteerableBasis) -> (FilterBank<f64>, FilterBank<f64>) {
    let b = basis.f_x.out_channels().max(1) as f64;
    let mut gx = basis.f_x.map(|_| 0.0);
    let mut gy = basis.f_y.map(|_| 0.0);
    let per = basis.f_x.in_channels() * basis.f_x.kernel_h() * basis.f_x.kernel_w();
    for (i, (x, y)) in filters(&basis.f_x).zip(filters(&basis.f_y)).enumerate() {
        let (nx, ny) = (norm(x), norm(y));
        let coef = 2.0 * (nx - ny) / b;
        let range = i * per..(i + 1) * per;
        if nx > 0.0 {
            for (g, &v) in gx.data_mut()[range.clone()].iter_mut().zip(x) {
                *g = coef * v / nx;
            }
        }
        if ny > 0.0 {
            for (g, &v) in gy.data_mut()[range].iter_mut().zip(y) {
                *g = -coef * v / ny;
            }
        }
    }
    (gx, gy)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Mean over filters of `(⟨w_x, w_y⟩ / (‖w_x‖‖w_y‖ + ε))²`.
pub fn loss_orth(basis: &SteerableBasis, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let b = basis.f_x.out_channels().max(1) as f64;
    Ok(filters(&basis.f_x)
        .zip(filters(&basis.f_y))
        .map(|(x, y)| (dot(x, y) / (norm(x) * norm(y) + eps)).powi(2))
        .sum::<f64>()
        / b)
}

/// Gradient of [`loss_orth`] with respect to `(f_x, f_y)`.
pub fn loss_orth_grad(
    basis: &SteerableBasis,
    eps: f64,
) -> Result<(FilterBank<f64>, FilterBank<f64>)> {
    check_eps(eps)?;
    let b = basis.f_x.out_channels().max(1) as f64;
    let mut gx = basis.f_x.map(|_| 0.0);
    let mut gy = basis.f_y.map(|_| 0.0);
    let per = basis.f_x.in_channels() * basis.f_x.kernel_h() * basis.f_x.kernel_w();
    for (i, (x, y)) in filters(&basis.f_x).zip(filters(&basis.f_y)).enumerate() {
        let (nx, ny) = (norm(x), norm(y));
        let s = dot(x, y);
        let d = nx * ny + eps;
        let q = s / d;
        let coef = 2.0 * q / b;
        let range = i * per..(i + 1) * per;
        // d q / d x = y/d - s·‖y‖·x / (‖x‖·d²), and symmetrically for y.
        for (k, g) in gx.data_mut()[range.clone()].iter_mut().enumerate() {
            let radial = if nx > 0.0 {
                s * ny * x[k] / (nx * d * d)
            } else {
                0.0
            };
            *g = coef * (y[k] / d - radial);
        }
        for (k, g) in gy.data_mut()[range].iter_mut().enumerate() {
            let radial = if ny > 0.0 {
                s * nx * y[k] / (ny * d * d)
            } else {
                0.0
            };
            *g = coef * (x[k] / d - radial);
        }
    }
    Ok((gx, gy))
}

/// `ce + λ_mag·L_mag + λ_orth·L_orth`.
pub fn total_loss(
    ce: f64,
    basis: &SteerableBasis,
    lambda_mag: f64,
    lambda_orth: f64,
    eps: f64,
) -> Result<f64> {
    if lambda_mag < 0.0 || lambda_orth < 0.0 {
        return Err(Error::InvalidArgument(
            "regularization weights must be >= 0".into(),
        ));
    }
    Ok(ce + lambda_mag * loss_mag(basis) + lambda_orth * loss_orth(basis, eps)?)
}

/// Gradient of the regularization part of [`total_loss`].
pub fn regularizer_grad(
    basis: &SteerableBasis,
    lambda_mag: f64,
    lambda_orth: f64,
    eps: f64,
) -> Result<(FilterBank<f64>, FilterBank<f64>)> {
    let (mx, my) = loss_mag_grad(basis);
    let (ox, oy) = loss_orth_grad(basis, eps)?;
    let combine = |a: &FilterBank<f64>, b: &FilterBank<f64>| {
        let mut out = a.clone();
        for (o, (&p, &q)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = lambda_mag * p + lambda_orth * q;
        }
        out
    };
    Ok((combine(&mx, &ox), combine(&my, &oy)))
}

/// Gaussian-derivative pair on a `k×k` grid centred at `⌊k/2⌋`, with
/// `x` along columns and `y` along rows (downwards):
/// `f_x ∝ -x·exp(-(x²+y²)/2σ²)`, `f_y ∝ -y·exp(…)`, both scaled to unit norm.
///
/// On this grid a counterclockwise quarter turn maps `f_x → -f_y` and
/// `f_y → f_x`, so steering commutes with quarter turns exactly.
pub fn gaussian_derivative_basis(k: usize, sigma: f64) -> Result<SteerableBasis> {
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {k}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let c = (k / 2) as f64;
    let g = |i: usize, j: usize| {
        let (x, y) = (j as f64 - c, i as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    };
    let fx = FilterBank::from_fn(1, 1, k, k, |_, _, i, j| -(j as f64 - c) * g(i, j));
    let fy = FilterBank::from_fn(1, 1, k, k, |_, _, i, j| -(i as f64 - c) * g(i, j));
    // Both share one scale factor so their norms agree to the last bit.
    let scale = norm(fx.data());
    SteerableBasis::new(fx.map(|v| v / scale), fy.map(|v| v / scale))
}

/// Scatter forward of an `n`-orientation steerable layer. Slice `j·4 + r`
/// holds orientation `θ_j + r·π/2`; each first-quadrant kernel runs one p4
/// reuse pass.
pub fn steerable_conv_scatter(
    x: &Tensor3<f64>,
    basis: &SteerableBasis,
    n: usize,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<f64>> {
    let set = OrientationSet::new(n)?;
    let (co_n, _, _, _) = basis.shape();
    let mut out = OrientedFeature::zeros(co_n, n, x.height(), x.width());
    for (j, &theta) in set.first_quadrant().iter().enumerate() {
        let part = group_conv_scatter_reuse(x, &steer(basis, theta), GroupSpec::p4(), counter)?;
        for co in 0..co_n {
            for r in 0..4 {
                out.slice_mut(co, j * 4 + r)
                    .copy_from_slice(part.slice(co, r));
            }
        }
    }
    Ok(out)
}

/// Gather reference for [`steerable_conv_scatter`] given an explicit bank.
pub fn bank_conv_gather(x: &Tensor3<f64>, bank: &[OrientedKernel]) -> Result<OrientedFeature<f64>> {
    let slices = bank
        .iter()
        .map(|k| conv_gather_same(x, &k.kernel))
        .collect::<Result<Vec<_>>>()?;
    OrientedFeature::from_orientation_slices(&slices)
}

/// Gradients of a steerable layer: `(d_input, d_f_x, d_f_y)`.
///
/// Every 4-tuple is differentiated as a p4 layer with kernel `steer(θ_j)`;
/// the base-kernel gradient is then split over the basis with the steering
/// coefficients.
pub fn steerable_backward(
    delta: &OrientedFeature<f64>,
    x: &Tensor3<f64>,
    basis: &SteerableBasis,
    n: usize,
) -> Result<(Tensor3<f64>, FilterBank<f64>, FilterBank<f64>)> {
    let set = OrientationSet::new(n)?;
    let (co_n, ci_n, _, _) = basis.shape();
    if delta.orientations() != n || delta.out_channels() != co_n {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} does not match a {n}-orientation layer with {co_n} filters",
            delta.shape()
        )));
    }
    let mut dx = Tensor3::zeros(ci_n, x.height(), x.width());
    let mut dfx = basis.f_x.map(|_| 0.0);
    let mut dfy = basis.f_y.map(|_| 0.0);
    for (j, &theta) in set.first_quadrant().iter().enumerate() {
        let mut sub = OrientedFeature::zeros(co_n, 4, delta.height(), delta.width());
        for co in 0..co_n {
            for r in 0..4 {
                sub.slice_mut(co, r)
                    .copy_from_slice(delta.slice(co, j * 4 + r));
            }
        }
        let grads = group_layer_backward(&sub, x, &steer(basis, theta), GroupSpec::p4())?;
        for (d, &s) in dx.data_mut().iter_mut().zip(grads.d_input.data()) {
            *d += s;
        }
        let (s, c) = theta.sin_cos();
        for ((gx, gy), &g) in dfx
            .data_mut()
            .iter_mut()
            .zip(dfy.data_mut().iter_mut())
            .zip(grads.d_weights.data())
        {
            *gx += s * g;
            *gy += c * g;
        }
    }
    Ok((dx, dfx, dfy))
}
