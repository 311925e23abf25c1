//! Gather-dataflow convolutions used as oracles for the scatter kernels.
//!
//! All convolutions here are cross-correlations (`X[h+i, w+j]`, no kernel
//! flip), stride 1, no dilation.

use crate::error::{Error, Result};
use crate::scatter::MultCounter;
use crate::tensor::{gemm_into, FilterBank, MatrixRM, Real, Tensor3};

pub(crate) fn check_channels<T: Real>(x: &Tensor3<T>, w: &FilterBank<T>) -> Result<()> {
    if x.channels() != w.in_channels() {
        return Err(Error::ChannelMismatch {
            input: x.channels(),
            filter: w.in_channels(),
        });
    }
    Ok(())
}

fn check_valid_geometry(height: usize, width: usize, kh: usize, kw: usize) -> Result<()> {
    if kh > height || kw > width {
        return Err(Error::KernelTooLarge {
            kernel_h: kh,
            kernel_w: kw,
            height,
            width,
        });
    }
    Ok(())
}

/// Valid cross-correlation: output `C_out×(H-K_h+1)×(W-K_w+1)`.
pub fn conv_gather_valid<T: Real>(x: &Tensor3<T>, w: &FilterBank<T>) -> Result<Tensor3<T>> {
    conv_gather_valid_counted(x, w, &mut MultCounter::new())
}

/// [`conv_gather_valid`] that tallies its multiply-adds in `counter`.
pub fn conv_gather_valid_counted<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    counter: &mut MultCounter,
) -> Result<Tensor3<T>> {
    check_channels(x, w)?;
    let (ci_n, h, wd) = x.shape();
    let (co_n, _, kh, kw) = w.shape();
    check_valid_geometry(h, wd, kh, kw)?;
    let (ho, wo) = (h - kh + 1, wd - kw + 1);
    let mut y = Tensor3::zeros(co_n, ho, wo);
    let out = y.data_mut();
    // Each output row accumulates its receptive field in (c_i, i, j) order.
    for co in 0..co_n {
        for oh in 0..ho {
            let acc = &mut out[(co * ho + oh) * wo..(co * ho + oh + 1) * wo];
            for ci in 0..ci_n {
                let xc = x.channel(ci);
                for i in 0..kh {
                    let row = &xc[(oh + i) * wd..(oh + i + 1) * wd];
                    for j in 0..kw {
                        let wv = w.at(co, ci, i, j);
                        for (a, &v) in acc.iter_mut().zip(&row[j..j + wo]) {
                            *a += wv * v;
                        }
                        counter.count(wo as u64, wo as u64);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Zero-padded, centered cross-correlation with output size equal to the input.
///
/// `Y[c_o,p,q] = Σ W[c_o,c_i,i,j] · X[c_i, p+i-⌊K_h/2⌋, q+j-⌊K_w/2⌋]`, with
/// out-of-range reads treated as zero. Even kernels are allowed; the center
/// then sits toward the top-left.
pub fn conv_gather_same<T: Real>(x: &Tensor3<T>, w: &FilterBank<T>) -> Result<Tensor3<T>> {
    check_channels(x, w)?;
    let (ci_n, h, wd) = x.shape();
    let (co_n, _, kh, kw) = w.shape();
    let (ch, cw) = (kh / 2, kw / 2);
    let mut y = Tensor3::zeros(co_n, h, wd);
    let out = y.data_mut();
    // Output-stationary over one row at a time; taps that fall in the zero
    // padding are skipped, and every output accumulates in (c_i, i, j) order.
    for co in 0..co_n {
        for p in 0..h {
            let acc = &mut out[(co * h + p) * wd..(co * h + p + 1) * wd];
            for ci in 0..ci_n {
                let xc = x.channel(ci);
                for i in 0..kh {
                    let Some(r) = (p + i).checked_sub(ch).filter(|&r| r < h) else {
                        continue;
                    };
                    let row = &xc[r * wd..(r + 1) * wd];
                    for j in 0..kw {
                        // Output columns q with 0 <= q + j - cw < W.
                        let q0 = cw.saturating_sub(j);
                        let q1 = (wd + cw).saturating_sub(j).min(wd);
                        if q0 >= q1 {
                            continue;
                        }
                        let wv = w.at(co, ci, i, j);
                        let src = &row[q0 + j - cw..q1 + j - cw];
                        for (a, &v) in acc[q0..q1].iter_mut().zip(src) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Same-padded gather computed literally: the input is zero-padded and every
/// output takes all `K_h·K_w` taps, so `counter` sees `H·W·K_h·K_w·C_in·C_out`
/// multiplications. Equal to [`conv_gather_same`].
pub fn conv_gather_same_counted<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    counter: &mut MultCounter,
) -> Result<Tensor3<T>> {
    let (kh, kw) = (w.kernel_h(), w.kernel_w());
    if kh == 0 || kw == 0 {
        return Err(Error::InvalidArgument(
            "kernel dimensions must be >= 1".into(),
        ));
    }
    let padded = pad_edges(x, kh / 2, kh - 1 - kh / 2, kw / 2, kw - 1 - kw / 2);
    conv_gather_valid_counted(&padded, w, counter)
}

fn pad_edges<T: Real>(
    x: &Tensor3<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor3<T> {
    let (c_n, h, wd) = x.shape();
    let (ph, pw) = (h + top + bottom, wd + left + right);
    let mut out = Tensor3::zeros(c_n, ph, pw);
    for c in 0..c_n {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            dst[(r + top) * pw + left..(r + top) * pw + left + wd]
                .copy_from_slice(&src[r * wd..(r + 1) * wd]);
        }
    }
    out
}

/// Copies `x` into the centre of a zero border `pad_h` rows and `pad_w`
/// columns wide on each side.
pub fn pad_zeros<T: Real>(x: &Tensor3<T>, pad_h: usize, pad_w: usize) -> Tensor3<T> {
    pad_edges(x, pad_h, pad_h, pad_w, pad_w)
}

/// Lowers `X` into `(C_in·K_h·K_w) × (H'·W')` with row `k = c_i·K_h·K_w + i·K_w + j`
/// and column `t = h·W' + w`.
pub fn im2col<T: Real>(x: &Tensor3<T>, kernel_h: usize, kernel_w: usize) -> Result<MatrixRM<T>> {
    if kernel_h == 0 || kernel_w == 0 {
        return Err(Error::InvalidArgument(
            "kernel dimensions must be >= 1".into(),
        ));
    }
    let (ci_n, h, wd) = x.shape();
    check_valid_geometry(h, wd, kernel_h, kernel_w)?;
    let (ho, wo) = (h - kernel_h + 1, wd - kernel_w + 1);
    let cols = ho * wo;
    let mut m = MatrixRM::zeros(ci_n * kernel_h * kernel_w, cols);
    let data = m.data_mut();
    for ci in 0..ci_n {
        for i in 0..kernel_h {
            for j in 0..kernel_w {
                let k = ci * kernel_h * kernel_w + i * kernel_w + j;
                let row = &mut data[k * cols..(k + 1) * cols];
                for oh in 0..ho {
                    let src = &x.channel(ci)[(oh + i) * wd + j..(oh + i) * wd + j + wo];
                    row[oh * wo..(oh + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
    Ok(m)
}

/// `W_row · X_col`, reshaped back to `C_out×H'×W'`.
pub fn conv_via_matmul<T: Real>(x: &Tensor3<T>, w: &FilterBank<T>) -> Result<Tensor3<T>> {
    conv_via_matmul_counted(x, w).map(|(y, _)| y)
}

/// Same as [`conv_via_matmul`], also returning the number of auxiliary bytes
/// the lowered matrix occupied.
pub(crate) fn conv_via_matmul_counted<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
) -> Result<(Tensor3<T>, usize)> {
    check_channels(x, w)?;
    let (co_n, ci_n, kh, kw) = w.shape();
    let cols = im2col(x, kh, kw)?;
    let (ho, wo) = (x.height() - kh + 1, x.width() - kw + 1);
    // OIHW storage is already the flattened W_row layout.
    let krows = ci_n * kh * kw;
    let mut y = vec![T::zero(); co_n * ho * wo];
    gemm_into(w.data(), cols.data(), &mut y, co_n, krows, ho * wo);
    let aux = std::mem::size_of_val(cols.data());
    Ok((Tensor3::new(co_n, ho, wo, y)?, aux))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq3x3() -> Tensor3<f64> {
        Tensor3::new(1, 3, 3, (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_valid() {
        let x = seq3x3();
        let w = FilterBank::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv_gather_valid(&x, &w).unwrap(), x);
        assert_eq!(conv_via_matmul(&x, &w).unwrap(), x);
    }

    #[test]
    fn all_ones_valid_sums_everything() {
        let w = FilterBank::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let y = conv_gather_valid(&seq3x3(), &w).unwrap();
        assert_eq!(y.shape(), (1, 1, 1));
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn same_padding_corner_and_delta() {
        let x = seq3x3();
        let ones = FilterBank::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let y = conv_gather_same(&x, &ones).unwrap();
        assert_eq!(y.get(0, 0, 0).unwrap(), 12.0);
        assert_eq!(y.get(0, 1, 1).unwrap(), 45.0);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let d = FilterBank::new(1, 1, 3, 3, delta).unwrap();
        assert_eq!(conv_gather_same(&x, &d).unwrap(), x);
    }

    #[test]
    fn errors_are_reported() {
        let x = seq3x3();
        let big = FilterBank::<f64>::zeros(1, 1, 4, 1);
        assert!(matches!(
            conv_gather_valid(&x, &big),
            Err(Error::KernelTooLarge { .. })
        ));
        assert!(matches!(
            im2col(&x, 1, 4),
            Err(Error::KernelTooLarge { .. })
        ));
        let wrong = FilterBank::<f64>::zeros(1, 2, 1, 1);
        assert!(matches!(
            conv_gather_same(&x, &wrong),
            Err(Error::ChannelMismatch { .. })
        ));
        assert!(matches!(
            conv_via_matmul(&x, &wrong),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn padded_valid_equals_same() {
        let x = Tensor3::from_fn(2, 5, 4, |c, h, w| (c * 20 + h * 4 + w) as f64);
        let w = FilterBank::from_fn(3, 2, 3, 3, |o, c, i, j| {
            (o + c * 2 + i * 3 + j) as f64 - 4.0
        });
        let padded = pad_zeros(&x, 1, 1);
        assert_eq!(padded.shape(), (2, 7, 6));
        assert_eq!(
            conv_via_matmul(&padded, &w).unwrap(),
            conv_gather_same(&x, &w).unwrap()
        );
    }

    #[test]
    fn counted_same_matches_and_counts_every_tap() {
        let x = Tensor3::from_fn(2, 5, 4, |c, h, w| ((c * 7 + h * 3 + w) % 5) as f64 - 2.0);
        for (kh, kw) in [(3, 3), (2, 4), (1, 5)] {
            let w = FilterBank::from_fn(3, 2, kh, kw, |o, c, i, j| {
                (o + c * 2 + i * 3 + j) as f64 - 4.0
            });
            let mut counter = MultCounter::new();
            let y = conv_gather_same_counted(&x, &w, &mut counter).unwrap();
            assert_eq!(y, conv_gather_same(&x, &w).unwrap());
            assert_eq!(counter.mults(), (5 * 4 * kh * kw * 2 * 3) as u64);
        }
    }

    #[test]
    fn im2col_shapes() {
        let x = Tensor3::<f64>::zeros(3, 5, 5);
        let m = im2col(&x, 3, 3).unwrap();
        assert_eq!((m.rows(), m.cols()), (27, 9));
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = im2col(&x, 1, 1).unwrap();
        assert_eq!(
            (m.rows(), m.cols(), m.data()),
            (1, 4, &[1.0, 2.0, 3.0, 4.0][..])
        );
    }

    #[test]
    fn matmul_path_is_linear_in_filters() {
        let x = Tensor3::from_fn(2, 4, 5, |c, h, w| (c * 7 + h * 3 + w) as f64 * 0.25 - 1.0);
        let w = FilterBank::from_fn(2, 2, 3, 3, |o, c, i, j| {
            let base = (c * 9 + i * 3 + j) as f64 * 0.1 - 0.4;
            if o == 0 {
                base
            } else {
                2.0 * base
            }
        });
        let y = conv_via_matmul(&x, &w).unwrap();
        let (a, b) = (y.channel(0), y.channel(1));
        for (p, q) in a.iter().zip(b) {
            assert!((2.0 * p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }
}
