//! Rotation-equivariant group convolution over p4 and p4m.
//!
//! Orientation slices are ordered by quarter turn `r = 0, 1, 2, 3`
//! (counterclockwise), followed for p4m by the mirrored block in the same
//! order. A mirrored element flips the kernel horizontally and then rotates
//! it.

use crate::error::{Error, Result};
use crate::reference::{check_channels, conv_gather_same, conv_gather_same_counted};
use crate::scatter::{
    phase_parallel_scatter, scatter_oriented, MultCounter, ScatterPlan, TileConfig,
};
use crate::tensor::{mirror_plane, rot90_plane, FilterBank, OrientedFeature, Plane, Real, Tensor3};

/// One transform of the kernel plane: optional horizontal mirror, then
/// `quarter_turns` counterclockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    pub quarter_turns: u8,
    pub mirrored: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        quarter_turns: 0,
        mirrored: false,
    };

    pub fn rotation(quarter_turns: u8) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            mirrored: false,
        }
    }

    pub fn mirrored_rotation(quarter_turns: u8) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            mirrored: true,
        }
    }

    /// Where kernel entry `(m, n)` of a `kh×kw` kernel ends up after the
    /// transform.
    pub fn map_index(&self, m: usize, n: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.quarter_turns % 2 == 1 && kh != kw {
            return Err(Error::UnsupportedKernel(kh, kw));
        }
        let (mut a, mut b) = (m, n);
        if self.mirrored {
            b = kw - 1 - b;
        }
        let (mut rows, mut cols) = (kh, kw);
        for _ in 0..self.quarter_turns % 4 {
            // in[a][b] moves to out[cols-1-b][a]
            (a, b) = (cols - 1 - b, a);
            (rows, cols) = (cols, rows);
        }
        let _ = rows;
        Ok((a, b))
    }

    pub fn apply_plane<T: Real>(&self, plane: &Plane<T>) -> Plane<T> {
        let p = if self.mirrored {
            mirror_plane(plane)
        } else {
            plane.clone()
        };
        rot90_plane(&p, i64::from(self.quarter_turns))
    }

    /// Undoes [`GroupElement::apply_plane`].
    pub fn invert_plane<T: Real>(&self, plane: &Plane<T>) -> Plane<T> {
        let p = rot90_plane(plane, -i64::from(self.quarter_turns));
        if self.mirrored {
            mirror_plane(&p)
        } else {
            p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Identity only; a plain convolution seen as a one-orientation stack.
    Trivial,
    /// The four quarter turns.
    P4,
    /// Quarter turns and their mirror images.
    P4m,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub size: usize,
}

impl GroupSpec {
    pub fn new(kind: GroupKind) -> Self {
        let size = match kind {
            GroupKind::Trivial => 1,
            GroupKind::P4 => 4,
            GroupKind::P4m => 8,
        };
        Self { kind, size }
    }

    pub fn p4() -> Self {
        Self::new(GroupKind::P4)
    }

    pub fn p4m() -> Self {
        Self::new(GroupKind::P4m)
    }

    pub fn trivial() -> Self {
        Self::new(GroupKind::Trivial)
    }

    pub fn elements(&self) -> Vec<GroupElement> {
        match self.kind {
            GroupKind::Trivial => vec![GroupElement::IDENTITY],
            GroupKind::P4 => (0..4).map(GroupElement::rotation).collect(),
            GroupKind::P4m => (0..4)
                .map(GroupElement::rotation)
                .chain((0..4).map(GroupElement::mirrored_rotation))
                .collect(),
        }
    }

    /// Rotation groups need odd square kernels so that every rotation turns
    /// about the exact kernel centre.
    pub fn check_kernel(&self, kh: usize, kw: usize) -> Result<()> {
        match self.kind {
            GroupKind::Trivial => Ok(()),
            _ if kh == kw && kh % 2 == 1 => Ok(()),
            _ => Err(Error::UnsupportedKernel(kh, kw)),
        }
    }
}

/// Applies `g` to every `(c_o, c_i)` kernel plane.
pub fn transform_kernel<T: Real>(w: &FilterBank<T>, g: GroupElement) -> Result<FilterBank<T>> {
    if g.quarter_turns % 2 == 1 && w.kernel_h() != w.kernel_w() {
        return Err(Error::UnsupportedKernel(w.kernel_h(), w.kernel_w()));
    }
    Ok(w.map_kernels(|p| g.apply_plane(p)))
}

/// Reference group convolution: one same-padded gather convolution per
/// transformed kernel.
pub fn group_conv_gather<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    group.check_kernel(w.kernel_h(), w.kernel_w())?;
    let slices = group
        .elements()
        .into_iter()
        .map(|g| conv_gather_same(x, &transform_kernel(w, g)?))
        .collect::<Result<Vec<_>>>()?;
    OrientedFeature::from_orientation_slices(&slices)
}

/// [`group_conv_gather`] on the literal zero-padded gather, counting every
/// multiplication: `|G|` times those of one orientation.
pub fn group_conv_gather_counted<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    group.check_kernel(w.kernel_h(), w.kernel_w())?;
    let slices = group
        .elements()
        .into_iter()
        .map(|g| conv_gather_same_counted(x, &transform_kernel(w, g)?, counter))
        .collect::<Result<Vec<_>>>()?;
    OrientedFeature::from_orientation_slices(&slices)
}

/// Group convolution by scatter with multiplication reuse: every channel dot
/// `Σ_{c_i} X[c_i,h,w]·W[c_o,c_i,m,n]` is computed once and added to one
/// destination per group element, so the multiplication count does not
/// depend on `|G|`.
pub fn group_conv_scatter_reuse<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    let cfg = TileConfig::full(x.height(), x.width(), w.kernel_h(), w.kernel_w());
    group_conv_scatter_reuse_tiled(x, w, group, &cfg, 1, counter)
}

/// Tiled, multi-worker variant of [`group_conv_scatter_reuse`].
pub fn group_conv_scatter_reuse_tiled<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
    cfg: &TileConfig,
    workers: usize,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    group.check_kernel(w.kernel_h(), w.kernel_w())?;
    let plan = ScatterPlan::cached(w.kernel_h(), w.kernel_w(), &group.elements())?;
    scatter_oriented(x, w, &plan, cfg, workers, counter)
}

/// Phase-parallel variant: one barrier per kernel offset, with all `|G|`
/// orientation planes written inside the same phase.
pub fn group_conv_scatter_phased<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
    workers: usize,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    group.check_kernel(w.kernel_h(), w.kernel_w())?;
    let plan = ScatterPlan::cached(w.kernel_h(), w.kernel_w(), &group.elements())?;
    phase_parallel_scatter(x, w, &plan, workers, counter)
}

/// `(1/R) Σ_r F[c_o, r, h, w]`.
pub fn orientation_pool_avg<T: Real>(f: &OrientedFeature<T>) -> Tensor3<T> {
    let (co_n, r_n, h, w) = f.shape();
    let n = h * w;
    let denom = T::from_usize(r_n).expect("orientation count fits the scalar type");
    let mut out = Tensor3::zeros(co_n, h, w);
    for co in 0..co_n {
        let dst = out.channel_mut(co);
        for r in 0..r_n {
            for (d, &s) in dst.iter_mut().zip(f.slice(co, r)) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d / denom);
    }
    debug_assert_eq!(out.data().len(), co_n * n);
    out
}

/// Orientation index that won each max-pooling cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrientationArgmax {
    pub out_channels: usize,
    pub pooled_orientations: usize,
    pub source_orientations: usize,
    pub height: usize,
    pub width: usize,
    /// Absolute source orientation per `(c_o, pooled, h, w)` cell.
    pub index: Vec<usize>,
}

impl OrientationArgmax {
    pub fn at(&self, co: usize, pooled: usize, h: usize, w: usize) -> usize {
        self.index[((co * self.pooled_orientations + pooled) * self.height + h) * self.width + w]
    }
}

/// Per-pixel maximum over each contiguous block of `group_size` orientation
/// slices. Ties go to the smallest orientation index.
pub fn subgroup_pool_max<T: Real>(
    f: &OrientedFeature<T>,
    group_size: usize,
) -> Result<(OrientedFeature<T>, OrientationArgmax)> {
    let (co_n, r_n, h, w) = f.shape();
    if group_size == 0 || r_n % group_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "{r_n} orientations cannot be pooled in blocks of {group_size}"
        )));
    }
    let pooled = r_n / group_size;
    let n = h * w;
    let mut out = OrientedFeature::zeros(co_n, pooled, h, w);
    let mut index = vec![0usize; co_n * pooled * n];
    for co in 0..co_n {
        for b in 0..pooled {
            let first = b * group_size;
            let base = (co * pooled + b) * n;
            let dst = out.slice_mut(co, b);
            dst.copy_from_slice(f.slice(co, first));
            index[base..base + n].iter_mut().for_each(|i| *i = first);
            for r in first + 1..first + group_size {
                for (p, &v) in f.slice(co, r).iter().enumerate() {
                    if v > dst[p] {
                        dst[p] = v;
                        index[base + p] = r;
                    }
                }
            }
        }
    }
    Ok((
        out,
        OrientationArgmax {
            out_channels: co_n,
            pooled_orientations: pooled,
            source_orientations: r_n,
            height: h,
            width: w,
            index,
        },
    ))
}

/// Per-pixel maximum over all orientations, with the winning index.
pub fn orientation_pool_max<T: Real>(f: &OrientedFeature<T>) -> (Tensor3<T>, OrientationArgmax) {
    let (pooled, arg) = subgroup_pool_max(f, f.orientations()).expect("R is divisible by R");
    (pooled.into_channels(), arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_kernel() -> FilterBank<f64> {
        FilterBank::new(1, 1, 3, 3, (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn quarter_turn_of_kernel() {
        let r1 = transform_kernel(&seq_kernel(), GroupElement::rotation(1)).unwrap();
        assert_eq!(r1.data(), &[3., 6., 9., 2., 5., 8., 1., 4., 7.]);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let w = seq_kernel();
        let g = GroupElement::rotation(2);
        let back = transform_kernel(&transform_kernel(&w, g).unwrap(), g).unwrap();
        assert_eq!(back, w);
        assert_eq!(transform_kernel(&w, GroupElement::IDENTITY).unwrap(), w);
    }

    #[test]
    fn map_index_agrees_with_plane_transform() {
        let w = FilterBank::from_fn(1, 1, 5, 5, |_, _, i, j| (i * 5 + j) as f64);
        for g in GroupSpec::p4m().elements() {
            let t = transform_kernel(&w, g).unwrap();
            for m in 0..5 {
                for n in 0..5 {
                    let (a, b) = g.map_index(m, n, 5, 5).unwrap();
                    assert_eq!(t.at(0, 0, a, b), w.at(0, 0, m, n), "{g:?} ({m},{n})");
                }
            }
            let inv = w.map_kernels(|p| g.invert_plane(&g.apply_plane(p)));
            assert_eq!(inv, w);
        }
    }

    #[test]
    fn odd_turn_rejects_rectangular_kernel() {
        let w = FilterBank::<f64>::zeros(1, 1, 3, 5);
        assert!(transform_kernel(&w, GroupElement::rotation(1)).is_err());
        assert!(transform_kernel(&w, GroupElement::rotation(2)).is_ok());
        let x = Tensor3::<f64>::zeros(1, 6, 6);
        assert!(group_conv_gather(&x, &w, GroupSpec::p4()).is_err());
        let even = FilterBank::<f64>::zeros(1, 1, 2, 2);
        assert!(matches!(
            group_conv_scatter_reuse(&x, &even, GroupSpec::p4(), &mut MultCounter::new()),
            Err(Error::UnsupportedKernel(2, 2))
        ));
    }

    #[test]
    fn symmetric_kernel_gives_equal_slices() {
        let x = Tensor3::from_fn(1, 5, 5, |_, h, w| (h * 5 + w) as f64);
        let w = FilterBank::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let f = group_conv_gather(&x, &w, GroupSpec::p4()).unwrap();
        for r in 1..4 {
            assert_eq!(f.slice(0, r), f.slice(0, 0));
        }
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let d = FilterBank::new(1, 1, 3, 3, delta).unwrap();
        let f = group_conv_gather(&x, &d, GroupSpec::p4()).unwrap();
        for r in 0..4 {
            assert_eq!(f.slice(0, r), x.data());
        }
    }

    #[test]
    fn reuse_count_is_independent_of_group_size() {
        let x = Tensor3::from_fn(2, 6, 7, |c, h, w| (c + h + w) as f64);
        let w = FilterBank::from_fn(3, 2, 3, 3, |o, c, i, j| (o + c + i + j) as f64);
        let mut counts = Vec::new();
        for g in [GroupSpec::trivial(), GroupSpec::p4(), GroupSpec::p4m()] {
            let mut c = MultCounter::new();
            group_conv_scatter_reuse(&x, &w, g, &mut c).unwrap();
            counts.push(c.mults());
        }
        assert_eq!(counts, vec![6 * 7 * 9 * 2 * 3; 3]);
    }

    #[test]
    fn avg_pool_examples() {
        let f = OrientedFeature::new(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(orientation_pool_avg(&f).data(), &[2.5]);
        let f = OrientedFeature::new(1, 3, 1, 2, vec![0.5; 6]).unwrap();
        assert_eq!(orientation_pool_avg(&f).data(), &[0.5, 0.5]);
    }

    #[test]
    fn max_pool_examples_and_ties() {
        let f = OrientedFeature::new(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = orientation_pool_max(&f);
        assert_eq!((y.data(), arg.index.as_slice()), (&[4.0][..], &[3][..]));
        let f = OrientedFeature::new(1, 4, 1, 1, vec![7.0; 4]).unwrap();
        let (y, arg) = orientation_pool_max(&f);
        assert_eq!((y.data(), arg.index.as_slice()), (&[7.0][..], &[0][..]));
    }

    #[test]
    fn subgroup_pool_shapes() {
        let f = OrientedFeature::new(1, 8, 1, 1, vec![1., 5., 2., 0., 3., 3., 9., 1.]).unwrap();
        let (y, arg) = subgroup_pool_max(&f, 4).unwrap();
        assert_eq!(y.orientations(), 2);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg.index, vec![1, 6]);
        assert!(subgroup_pool_max(&f, 3).is_err());
        let (full, _) = subgroup_pool_max(&f, 8).unwrap();
        assert_eq!(full.into_channels(), orientation_pool_max(&f).0);
    }
}
