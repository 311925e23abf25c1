//! Gradients of the rotation-equivariant layer and its orientation pooling.
//!
//! The forward pass is the same-padded group convolution
//! `Y[c_o,g,p,q] = Σ W^(g)[c_o,c_i,i,j] · X[c_i, p+i-c_h, q+j-c_w]` with
//! `c = ⌊K/2⌋`, so the input gradient reads the upstream gradient at
//! `p-i+c_h` and the kernel gradient correlates `X` shifted by `i-c_h`
//! against the upstream gradient. Out-of-range terms are the zero padding.
//! Kernels must have odd sides here so that the transposed scatter turns
//! about the same centre as the forward one.

use crate::error::{Error, Result};
use crate::group::{transform_kernel, GroupSpec, OrientationArgmax};
use crate::scatter::{scatter_conv_multi, MultCounter};
use crate::tensor::{FilterBank, OrientedFeature, Real, Tensor3};

/// Gradients of one group-convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_input: Tensor3<f64>,
    pub d_weights: FilterBank<f64>,
    pub per_rotation_d_weights: Vec<FilterBank<f64>>,
}

/// Average pooling spreads the upstream gradient evenly: every slice gets `G/R`.
pub fn pool_backward_avg<T: Real>(
    upstream: &Tensor3<T>,
    orientations: usize,
) -> Result<OrientedFeature<T>> {
    if orientations == 0 {
        return Err(Error::InvalidArgument(
            "orientation count must be >= 1".into(),
        ));
    }
    let (c, h, w) = upstream.shape();
    let denom = T::from_usize(orientations).expect("orientation count fits the scalar type");
    let mut out = OrientedFeature::zeros(c, orientations, h, w);
    for co in 0..c {
        let scaled: Vec<T> = upstream.channel(co).iter().map(|&v| v / denom).collect();
        for r in 0..orientations {
            out.slice_mut(co, r).copy_from_slice(&scaled);
        }
    }
    Ok(out)
}

/// Max pooling routes the upstream gradient to the winning orientation only.
///
/// `upstream` is laid out like the pooled output viewed as channels:
/// `(C_out·pooled)×H×W`.
pub fn pool_backward_max<T: Real>(
    upstream: &Tensor3<T>,
    argmax: &OrientationArgmax,
) -> Result<OrientedFeature<T>> {
    let (c, h, w) = upstream.shape();
    if c != argmax.out_channels * argmax.pooled_orientations
        || h != argmax.height
        || w != argmax.width
    {
        return Err(Error::ShapeMismatch(format!(
            "upstream {c}x{h}x{w} does not match argmax map {}x{}x{}x{}",
            argmax.out_channels, argmax.pooled_orientations, argmax.height, argmax.width
        )));
    }
    let mut out = OrientedFeature::zeros(argmax.out_channels, argmax.source_orientations, h, w);
    let n = h * w;
    for co in 0..argmax.out_channels {
        for b in 0..argmax.pooled_orientations {
            let g = upstream.channel(co * argmax.pooled_orientations + b);
            let base = (co * argmax.pooled_orientations + b) * n;
            for (p, &v) in g.iter().enumerate() {
                let r = argmax.index[base + p];
                out.slice_mut(co, r)[p] = v;
            }
        }
    }
    Ok(out)
}

fn check_odd(kh: usize, kw: usize) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::UnsupportedKernel(kh, kw));
    }
    Ok(())
}

fn transpose_channels<T: Real>(w: &FilterBank<T>) -> FilterBank<T> {
    let (co, ci, kh, kw) = w.shape();
    FilterBank::from_fn(ci, co, kh, kw, |a, b, i, j| w.at(b, a, i, j))
}

/// Input gradient summed over all group elements. Each element's term is a
/// scatter convolution of the upstream slice with the channel-transposed,
/// index-reversed transformed kernel.
pub fn conv_backward_input<T: Real>(
    delta: &OrientedFeature<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
) -> Result<Tensor3<T>> {
    let (co_n, ci_n, kh, kw) = w.shape();
    group.check_kernel(kh, kw)?;
    check_odd(kh, kw)?;
    if delta.out_channels() != co_n || delta.orientations() != group.size {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {}x{} channels/orientations, layer has {}x{}",
            delta.out_channels(),
            delta.orientations(),
            co_n,
            group.size
        )));
    }
    let mut dx = Tensor3::zeros(ci_n, delta.height(), delta.width());
    let mut counter = MultCounter::new();
    for (gi, g) in group.elements().into_iter().enumerate() {
        let back = transpose_channels(&transform_kernel(w, g)?.reverse_both_axes());
        let part = scatter_conv_multi(&delta.orientation(gi), &back, &mut counter)?;
        for (d, &s) in dx.data_mut().iter_mut().zip(part.data()) {
            *d += s;
        }
    }
    Ok(dx)
}

/// Per-element kernel gradients `dW^(g)[c_o,c_i,i,j] = Σ_{p,q} X[c_i,p+i-c_h,q+j-c_w] · Δ[c_o,g,p,q]`.
pub fn conv_backward_weight<T: Real>(
    delta: &OrientedFeature<T>,
    x: &Tensor3<T>,
    group: GroupSpec,
    kernel_h: usize,
    kernel_w: usize,
) -> Result<Vec<FilterBank<T>>> {
    group.check_kernel(kernel_h, kernel_w)?;
    check_odd(kernel_h, kernel_w)?;
    let (ci_n, h, wd) = x.shape();
    if delta.height() != h || delta.width() != wd || delta.orientations() != group.size {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} does not match input {:?} with {} orientations",
            delta.shape(),
            x.shape(),
            group.size
        )));
    }
    let co_n = delta.out_channels();
    let (ch, cw) = ((kernel_h / 2) as isize, (kernel_w / 2) as isize);
    let mut grads = Vec::with_capacity(group.size);
    for g in 0..group.size {
        let mut dw = FilterBank::zeros(co_n, ci_n, kernel_h, kernel_w);
        let data = dw.data_mut();
        for co in 0..co_n {
            let d = delta.slice(co, g);
            for ci in 0..ci_n {
                let xs = x.channel(ci);
                for i in 0..kernel_h {
                    let sy = i as isize - ch;
                    let p0 = (-sy).max(0) as usize;
                    let p1 = (h as isize - sy).min(h as isize).max(0) as usize;
                    for j in 0..kernel_w {
                        let sx = j as isize - cw;
                        let q0 = (-sx).max(0) as usize;
                        let q1 = (wd as isize - sx).min(wd as isize).max(0) as usize;
                        let mut acc = T::zero();
                        for p in p0..p1 {
                            let xr = (p as isize + sy) as usize * wd;
                            let xrow = &xs[(xr as isize + q0 as isize + sx) as usize..];
                            let drow = &d[p * wd + q0..p * wd + q1];
                            for (a, &b) in xrow.iter().zip(drow) {
                                acc += *a * b;
                            }
                        }
                        data[((co * ci_n + ci) * kernel_h + i) * kernel_w + j] = acc;
                    }
                }
            }
        }
        grads.push(dw);
    }
    Ok(grads)
}

/// Maps each transformed-kernel gradient back to the base orientation and
/// sums: `Σ_g g⁻¹(dW^(g))`.
pub fn base_kernel_grad<T: Real>(
    per_element: &[FilterBank<T>],
    group: GroupSpec,
) -> Result<FilterBank<T>> {
    if per_element.len() != group.size {
        return Err(Error::ShapeMismatch(format!(
            "expected {} kernel gradients, got {}",
            group.size,
            per_element.len()
        )));
    }
    let first = &per_element[0];
    let shape = first.shape();
    if per_element.iter().any(|g| g.shape() != shape) {
        return Err(Error::ShapeMismatch(
            "kernel gradients differ in shape".into(),
        ));
    }
    group.check_kernel(shape.2, shape.3)?;
    let mut out = FilterBank::zeros(shape.0, shape.1, shape.2, shape.3);
    for (g, dw) in group.elements().into_iter().zip(per_element) {
        let back = dw.map_kernels(|p| g.invert_plane(p));
        for (o, &v) in out.data_mut().iter_mut().zip(back.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// All gradients of a group convolution given the upstream gradient of its
/// oriented output.
pub fn group_layer_backward(
    delta: &OrientedFeature<f64>,
    x: &Tensor3<f64>,
    w: &FilterBank<f64>,
    group: GroupSpec,
) -> Result<GradBundle> {
    let d_input = conv_backward_input(delta, w, group)?;
    let per_rotation_d_weights = conv_backward_weight(delta, x, group, w.kernel_h(), w.kernel_w())?;
    let d_weights = base_kernel_grad(&per_rotation_d_weights, group)?;
    Ok(GradBundle {
        d_input,
        d_weights,
        per_rotation_d_weights,
    })
}

/// Gradients smaller than this are compared absolutely rather than
/// relatively by the finite-difference checks.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, FD_SCALE_FLOOR)`.
pub fn fd_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR)
}

/// Central-difference gradient check. Returns the worst relative error over
/// `coords`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64> {
    let report = finite_diff_check_piecewise(|x| (f(x), ()), point, analytic, step, coords)?;
    Ok(report.max_rel_error)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a kink (ReLU, max) was crossed within `±step`.
    pub skipped: usize,
}

/// Central-difference check for piecewise-smooth functions. `f` also returns
/// a signature of its active pieces (argmax maps, ReLU masks); coordinates
/// whose `±step` probes see a different signature than the base point are
/// skipped and counted.
pub fn finite_diff_check_piecewise<S: PartialEq>(
    mut f: impl FnMut(&[f64]) -> (f64, S),
    point: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<FdReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    if point.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "point has {} coordinates, gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    let (_, base_sig) = f(point);
    let mut x = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &k in coords {
        if k >= x.len() {
            return Err(Error::InvalidArgument(format!(
                "coordinate {k} out of range"
            )));
        }
        let orig = x[k];
        x[k] = orig + step;
        let (fp, sp) = f(&x);
        x[k] = orig - step;
        let (fm, sm) = f(&x);
        x[k] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        report.max_rel_error = report
            .max_rel_error
            .max(fd_relative_error(analytic[k], numeric));
        report.checked += 1;
    }
    Ok(report)
}
