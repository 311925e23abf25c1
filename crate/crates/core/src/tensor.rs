//! Dense containers and layout packers.
//!
//! Everything is stored flat and row-major: a [`Tensor3`] is `(C, H, W)`, a
//! [`FilterBank`] is `(C_out, C_in, K_h, K_w)` and an [`OrientedFeature`] is
//! `(C_out, R, H, W)`. No strided views are exposed, so every index
//! computation in the convolution kernels can be read off directly.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type accepted by the kernels. `f64` is the gradient-checking mode,
/// `f32` the benchmark mode.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Normwise relative difference `max|a-b| / max|b|`.
///
/// Returns the absolute difference when `b` is identically zero.
pub fn max_rel_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(
        a.len(),
        b.len(),
        "max_rel_diff on slices of different length"
    );
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let x = x.to_f64().unwrap_or(f64::NAN);
        let y = y.to_f64().unwrap_or(f64::NAN);
        let d = (x - y).abs();
        if d.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max(d);
        scale = scale.max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// A 2-D grid of scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "plane {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a plane from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data
            .chunks(self.cols.max(1))
            .map(<[T]>::to_vec)
            .collect()
    }
}

/// Counterclockwise rotation by `quarter_turns * 90°`.
///
/// For one quarter turn an `M×N` grid becomes `N×M` with
/// `out[i][j] = in[j][N-1-i]`.
pub fn rot90_plane<T: Real>(plane: &Plane<T>, quarter_turns: i64) -> Plane<T> {
    let (m, n) = (plane.rows, plane.cols);
    match quarter_turns.rem_euclid(4) {
        0 => plane.clone(),
        1 => Plane::from_fn(n, m, |i, j| plane.at(j, n - 1 - i)),
        2 => Plane::from_fn(m, n, |i, j| plane.at(m - 1 - i, n - 1 - j)),
        _ => Plane::from_fn(n, m, |i, j| plane.at(m - 1 - j, i)),
    }
}

/// Horizontal flip: `out[i][j] = in[i][N-1-j]`.
pub fn mirror_plane<T: Real>(plane: &Plane<T>) -> Plane<T> {
    let n = plane.cols;
    Plane::from_fn(plane.rows, n, |i, j| plane.at(i, n - 1 - j))
}

/// Dense `C×H×W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T = f64> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let want = channels * height * width;
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "tensor {channels}x{height}x{width} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Stacks equally sized planes as channels.
    pub fn from_planes(planes: &[Plane<T>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("no planes given".into()))?;
        let (h, w) = (first.rows(), first.cols());
        if planes.iter().any(|p| p.rows() != h || p.cols() != w) {
            return Err(Error::ShapeMismatch("planes differ in size".into()));
        }
        let data = planes
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        Self::new(planes.len(), h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> Result<T> {
        if c < self.channels && h < self.height && w < self.width {
            Ok(self.at(c, h, w))
        } else {
            Err(Error::OutOfBounds(
                c,
                h,
                w,
                self.channels,
                self.height,
                self.width,
            ))
        }
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: T) -> Result<()> {
        if c < self.channels && h < self.height && w < self.width {
            let idx = (c * self.height + h) * self.width + w;
            self.data[idx] = v;
            Ok(())
        } else {
            Err(Error::OutOfBounds(
                c,
                h,
                w,
                self.channels,
                self.height,
                self.width,
            ))
        }
    }

    #[inline]
    pub(crate) fn at(&self, c: usize, h: usize, w: usize) -> T {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn plane(&self, c: usize) -> Plane<T> {
        Plane {
            rows: self.height,
            cols: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn planes(&self) -> Vec<Plane<T>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Applies a plane transform to every channel.
    pub fn map_planes(&self, f: impl Fn(&Plane<T>) -> Plane<T>) -> Self {
        let planes: Vec<_> = self.planes().iter().map(f).collect();
        if planes.is_empty() {
            return self.clone();
        }
        Self::from_planes(&planes).expect("plane transform keeps sizes uniform")
    }

    /// Rotates every channel counterclockwise.
    pub fn rot90(&self, quarter_turns: i64) -> Self {
        self.map_planes(|p| rot90_plane(p, quarter_turns))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// `C_out×C_in×K_h×K_w` convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T = f64> {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    data: Vec<T>,
}

impl<T: Real> FilterBank<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel dimensions must be >= 1, got {kernel_h}x{kernel_w}"
            )));
        }
        let want = out_channels * in_channels * kernel_h * kernel_w;
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "filter bank {out_channels}x{in_channels}x{kernel_h}x{kernel_w} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            data,
        })
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Self {
        assert!(
            kernel_h >= 1 && kernel_w >= 1,
            "kernel dimensions must be >= 1"
        );
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            data: vec![T::zero(); out_channels * in_channels * kernel_h * kernel_w],
        }
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut bank = Self::zeros(out_channels, in_channels, kernel_h, kernel_w);
        let mut k = 0;
        for co in 0..out_channels {
            for ci in 0..in_channels {
                for i in 0..kernel_h {
                    for j in 0..kernel_w {
                        bank.data[k] = f(co, ci, i, j);
                        k += 1;
                    }
                }
            }
        }
        bank
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        )
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, i: usize, j: usize) -> T {
        self.data[((co * self.in_channels + ci) * self.kernel_h + i) * self.kernel_w + j]
    }

    pub fn kernel(&self, co: usize, ci: usize) -> Plane<T> {
        let n = self.kernel_h * self.kernel_w;
        let start = (co * self.in_channels + ci) * n;
        Plane {
            rows: self.kernel_h,
            cols: self.kernel_w,
            data: self.data[start..start + n].to_vec(),
        }
    }

    /// Applies a spatial transform to every `(c_o, c_i)` kernel plane.
    /// The transform must map all planes to the same shape.
    pub fn map_kernels(&self, f: impl Fn(&Plane<T>) -> Plane<T>) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let mut shape = (self.kernel_h, self.kernel_w);
        for co in 0..self.out_channels {
            for ci in 0..self.in_channels {
                let p = f(&self.kernel(co, ci));
                shape = (p.rows(), p.cols());
                data.extend_from_slice(p.data());
            }
        }
        Self {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: shape.0,
            kernel_w: shape.1,
            data,
        }
    }

    /// Reverses the kernel index in both spatial axes (180° turn).
    pub fn reverse_both_axes(&self) -> Self {
        self.map_kernels(|p| rot90_plane(p, 2))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> FilterBank<U> {
        FilterBank {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Rotation-equivariant output stack `Y[c_o, r, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedFeature<T = f64> {
    out_channels: usize,
    orientations: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> OrientedFeature<T> {
    pub fn new(
        out_channels: usize,
        orientations: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if orientations == 0 {
            return Err(Error::InvalidArgument("orientations must be >= 1".into()));
        }
        let want = out_channels * orientations * height * width;
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "oriented feature {out_channels}x{orientations}x{height}x{width} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            orientations,
            height,
            width,
            data,
        })
    }

    pub fn zeros(out_channels: usize, orientations: usize, height: usize, width: usize) -> Self {
        assert!(orientations >= 1, "orientations must be >= 1");
        Self {
            out_channels,
            orientations,
            height,
            width,
            data: vec![T::zero(); out_channels * orientations * height * width],
        }
    }

    /// Interleaves per-orientation tensors (each `C_out×H×W`) into one stack.
    pub fn from_orientation_slices(slices: &[Tensor3<T>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("no orientation slices".into()))?;
        let (co, h, w) = first.shape();
        if slices.iter().any(|s| s.shape() != (co, h, w)) {
            return Err(Error::ShapeMismatch(
                "orientation slices differ in shape".into(),
            ));
        }
        let r = slices.len();
        let mut out = Self::zeros(co, r, h, w);
        for (ri, s) in slices.iter().enumerate() {
            for c in 0..co {
                out.slice_mut(c, ri).copy_from_slice(s.channel(c));
            }
        }
        Ok(out)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (
            self.out_channels,
            self.orientations,
            self.height,
            self.width,
        )
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, co: usize, r: usize, h: usize, w: usize) -> T {
        self.data[((co * self.orientations + r) * self.height + h) * self.width + w]
    }

    pub fn slice(&self, co: usize, r: usize) -> &[T] {
        let n = self.height * self.width;
        let start = (co * self.orientations + r) * n;
        &self.data[start..start + n]
    }

    pub fn slice_mut(&mut self, co: usize, r: usize) -> &mut [T] {
        let n = self.height * self.width;
        let start = (co * self.orientations + r) * n;
        &mut self.data[start..start + n]
    }

    /// All output channels at orientation `r`, as a `C_out×H×W` tensor.
    pub fn orientation(&self, r: usize) -> Tensor3<T> {
        let mut data = Vec::with_capacity(self.out_channels * self.height * self.width);
        for co in 0..self.out_channels {
            data.extend_from_slice(self.slice(co, r));
        }
        Tensor3::new(self.out_channels, self.height, self.width, data).expect("consistent shape")
    }

    /// Views the stack as a `(C_out·R)×H×W` tensor; channel index is `c_o·R + r`.
    pub fn into_channels(self) -> Tensor3<T> {
        Tensor3::new(
            self.out_channels * self.orientations,
            self.height,
            self.width,
            self.data,
        )
        .expect("consistent shape")
    }

    /// Inverse of [`OrientedFeature::into_channels`].
    pub fn from_channels(t: Tensor3<T>, orientations: usize) -> Result<Self> {
        if orientations == 0 || !t.channels().is_multiple_of(orientations) {
            return Err(Error::ShapeMismatch(format!(
                "{} channels cannot be split into {} orientations",
                t.channels(),
                orientations
            )));
        }
        let (c, h, w) = t.shape();
        Self::new(c / orientations, orientations, h, w, t.into_data())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRM<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> MatrixRM<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Writes `A·B` into `c` (overwriting), with `A: m×k`, `B: k×n`, all row-major.
///
/// Every output element is accumulated over `k` in ascending order regardless
/// of `m` and `n`, so a column of the result depends only on the matching
/// column of `B`. The tiled kernels rely on this for bit-reproducibility.
pub(crate) fn gemm_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &MatrixRM<T>, b: &MatrixRM<T>) -> Result<MatrixRM<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = MatrixRM::zeros(a.rows, b.cols);
    gemm_into(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// Packs a batch into CNHW: row `c`, column `(n·H + h)·W + w`.
pub fn pack_cnhw<T: Real>(batch: &[Tensor3<T>]) -> Result<MatrixRM<T>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = first.shape();
    if let Some(bad) = batch.iter().find(|t| t.shape() != (c, h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "batch mixes {c}x{h}x{w} with {:?}",
            bad.shape()
        )));
    }
    let hw = h * w;
    let cols = batch.len() * hw;
    let mut m = MatrixRM::zeros(c, cols);
    for (n, t) in batch.iter().enumerate() {
        for ch in 0..c {
            m.data[ch * cols + n * hw..ch * cols + (n + 1) * hw].copy_from_slice(t.channel(ch));
        }
    }
    Ok(m)
}

pub fn unpack_cnhw<T: Real>(
    m: &MatrixRM<T>,
    height: usize,
    width: usize,
) -> Result<Vec<Tensor3<T>>> {
    let hw = height * width;
    if hw == 0 || !m.cols.is_multiple_of(hw) {
        return Err(Error::ShapeMismatch(format!(
            "{} columns is not a multiple of {height}x{width}",
            m.cols
        )));
    }
    let n = m.cols / hw;
    let c = m.rows;
    Ok((0..n)
        .map(|b| {
            let mut t = Tensor3::zeros(c, height, width);
            for ch in 0..c {
                t.channel_mut(ch)
                    .copy_from_slice(&m.data[ch * m.cols + b * hw..ch * m.cols + (b + 1) * hw]);
            }
            t
        })
        .collect())
}

/// Packs a filter bank into NHWC: row `c_o`, column `(i·K_w + j)·C_in + c_i`.
///
/// Read as a `(C_out·K_h·K_w) × C_in` matrix the same buffer is the left
/// operand of the per-pixel channel-dot product.
pub fn pack_nhwc<T: Real>(bank: &FilterBank<T>) -> MatrixRM<T> {
    let (co, ci, kh, kw) = bank.shape();
    let cols = kh * kw * ci;
    let mut m = MatrixRM::zeros(co, cols);
    for o in 0..co {
        for c in 0..ci {
            for i in 0..kh {
                for j in 0..kw {
                    m.data[o * cols + (i * kw + j) * ci + c] = bank.at(o, c, i, j);
                }
            }
        }
    }
    m
}

pub fn unpack_nhwc<T: Real>(
    m: &MatrixRM<T>,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
) -> Result<FilterBank<T>> {
    if m.cols != in_channels * kernel_h * kernel_w {
        return Err(Error::ShapeMismatch(format!(
            "{} columns does not match {in_channels}x{kernel_h}x{kernel_w}",
            m.cols
        )));
    }
    let cols = m.cols;
    Ok(FilterBank::from_fn(
        m.rows,
        in_channels,
        kernel_h,
        kernel_w,
        |o, c, i, j| m.data[o * cols + (i * kernel_w + j) * in_channels + c],
    ))
}
