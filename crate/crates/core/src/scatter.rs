//! Scatter-dataflow convolution.
//!
//! Each input pixel is multiplied against the kernel and the products are
//! added into neighbouring output positions:
//!
//! ```text
//! Y[i - m + ⌊K_h/2⌋, j - n + ⌊K_w/2⌋] += X[i, j] · W[m, n]
//! ```
//!
//! over the full `H×W` input, with writes that land outside the image
//! dropped. The output therefore has the input's size, and it coincides with
//! [`conv_gather_same`](crate::reference::conv_gather_same) evaluated with the
//! *same* kernel: substituting `p = i - m + ⌊K/2⌋` gives
//! `Y[p] = Σ_m W[m] · X[p + m - ⌊K/2⌋]`.
//!
//! For several channels the per-pixel channel dot
//! `Σ_{c_i} X[c_i,h,w] · W[c_o,c_i,m,n]` is produced by one small matrix
//! product (filter in NHWC, input strip in CNHW) and then scattered. The same
//! engine serves the rotation group kernels, which scatter every dot to one
//! destination per group element.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::reference::check_channels;
use crate::tensor::{gemm_into, pack_nhwc, FilterBank, OrientedFeature, Plane, Real, Tensor3};

/// Operation counts for one or more kernel invocations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MultCounter {
    pub scalar_multiplications: u64,
    pub scalar_additions: u64,
    /// High-water mark of auxiliary buffers (dot products, packed strips,
    /// tile accumulators, lowered matrices), excluding inputs and outputs.
    pub peak_aux_bytes: u64,
    /// Synchronization points between parallel phases.
    pub barriers: u64,
}

impl MultCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn mults(&self) -> u64 {
        self.scalar_multiplications
    }

    pub fn adds(&self) -> u64 {
        self.scalar_additions
    }

    pub(crate) fn count(&mut self, mults: u64, adds: u64) {
        self.scalar_multiplications += mults;
        self.scalar_additions += adds;
    }

    pub(crate) fn note_aux(&mut self, bytes: usize) {
        self.peak_aux_bytes = self.peak_aux_bytes.max(bytes as u64);
    }

    /// Folds in the counts of a concurrently executed part.
    ///
    /// Peak memory adds up because the parts were alive at the same time.
    pub(crate) fn merge_concurrent(&mut self, parts: &[MultCounter]) {
        let mut peak = 0;
        for p in parts {
            self.scalar_multiplications += p.scalar_multiplications;
            self.scalar_additions += p.scalar_additions;
            self.barriers += p.barriers;
            peak += p.peak_aux_bytes;
        }
        self.peak_aux_bytes = self.peak_aux_bytes.max(peak);
    }
}

/// What the tile halo has to cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloMode {
    /// Plain convolution: halo `⌊K/2⌋`.
    Plain,
    /// Convolution fused with 2×2 spatial max pooling: halo `⌊K/2⌋ + 1`.
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub tile_h: usize,
    pub tile_w: usize,
    pub halo: usize,
    pub mode: HaloMode,
}

impl TileConfig {
    /// Tile configuration with the halo derived from the kernel size.
    pub fn for_kernel(
        tile_h: usize,
        tile_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        mode: HaloMode,
    ) -> Self {
        Self {
            tile_h,
            tile_w,
            halo: required_halo(kernel_h, kernel_w, mode),
            mode,
        }
    }

    /// A single tile covering a whole `height×width` image.
    pub fn full(height: usize, width: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self::for_kernel(
            height.max(1),
            width.max(1),
            kernel_h,
            kernel_w,
            HaloMode::Plain,
        )
    }

    pub fn validate(&self, kernel_h: usize, kernel_w: usize) -> Result<()> {
        if self.tile_h == 0 || self.tile_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile must be at least 1x1, got {}x{}",
                self.tile_h, self.tile_w
            )));
        }
        let want = required_halo(kernel_h, kernel_w, self.mode);
        if self.halo != want {
            return Err(Error::InvalidArgument(format!(
                "halo {} does not match kernel {}x{} in {:?} mode (expected {})",
                self.halo, kernel_h, kernel_w, self.mode, want
            )));
        }
        Ok(())
    }
}

fn required_halo(kernel_h: usize, kernel_w: usize, mode: HaloMode) -> usize {
    let base = kernel_h.max(kernel_w) / 2;
    match mode {
        HaloMode::Plain => base,
        HaloMode::MaxPool => base + 1,
    }
}

/// Destination displacements for every kernel offset under every group
/// element: the product `X[i,j]·W[m,n]` lands at `(i + dy, j + dx)` where
/// `(dy, dx) = (⌊K_h/2⌋ - m', ⌊K_w/2⌋ - n')` and `(m', n')` is where the
/// transform moves kernel entry `(m, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterPlan {
    kernel_h: usize,
    kernel_w: usize,
    elements: Vec<GroupElement>,
    offsets: Vec<Vec<(isize, isize)>>,
}

impl ScatterPlan {
    pub fn new(kernel_h: usize, kernel_w: usize, elements: &[GroupElement]) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidArgument(
                "scatter plan needs at least one element".into(),
            ));
        }
        let (ch, cw) = ((kernel_h / 2) as isize, (kernel_w / 2) as isize);
        let mut offsets = Vec::with_capacity(elements.len());
        for g in elements {
            let mut table = Vec::with_capacity(kernel_h * kernel_w);
            for m in 0..kernel_h {
                for n in 0..kernel_w {
                    let (mp, np) = g.map_index(m, n, kernel_h, kernel_w)?;
                    table.push((ch - mp as isize, cw - np as isize));
                }
            }
            offsets.push(table);
        }
        Ok(Self {
            kernel_h,
            kernel_w,
            elements: elements.to_vec(),
            offsets,
        })
    }

    /// Cached plan for a kernel shape and element list.
    pub fn cached(
        kernel_h: usize,
        kernel_w: usize,
        elements: &[GroupElement],
    ) -> Result<Arc<Self>> {
        type Key = (usize, usize, Vec<GroupElement>);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<ScatterPlan>>>> = OnceLock::new();
        let key = (kernel_h, kernel_w, elements.to_vec());
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(plan) = cache.lock().expect("plan cache poisoned").get(&key) {
            return Ok(plan.clone());
        }
        let plan = Arc::new(Self::new(kernel_h, kernel_w, elements)?);
        cache
            .lock()
            .expect("plan cache poisoned")
            .insert(key, plan.clone());
        Ok(plan)
    }

    pub fn identity(kernel_h: usize, kernel_w: usize) -> Self {
        Self::new(kernel_h, kernel_w, &[GroupElement::IDENTITY]).expect("identity is always valid")
    }

    pub fn group_size(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    /// `(dy, dx)` for element `g` and kernel offset `(m, n)`.
    pub fn offset(&self, g: usize, m: usize, n: usize) -> (isize, isize) {
        self.offsets[g][m * self.kernel_w + n]
    }

    /// Row range of outputs an input row can reach (over all elements).
    fn reach(&self) -> (isize, isize, isize, isize) {
        let mut r = (isize::MAX, isize::MIN, isize::MAX, isize::MIN);
        for t in &self.offsets {
            for &(dy, dx) in t {
                r = (r.0.min(dy), r.1.max(dy), r.2.min(dx), r.3.max(dx));
            }
        }
        r
    }
}

/// Output positions written when input row `input_row` is multiplied by
/// kernel entry `(m, n)` under element `g`, in input-column order.
/// Out-of-image writes are omitted.
pub fn scatter_write_trace(
    plan: &ScatterPlan,
    height: usize,
    width: usize,
    input_row: usize,
    g: usize,
    m: usize,
    n: usize,
) -> Vec<(usize, usize)> {
    let (dy, dx) = plan.offset(g, m, n);
    let r = input_row as isize + dy;
    if r < 0 || r >= height as isize {
        return Vec::new();
    }
    (0..width as isize)
        .map(|j| j + dx)
        .filter(|&c| c >= 0 && c < width as isize)
        .map(|c| (r as usize, c as usize))
        .collect()
}

/// Single-channel scatter convolution, written exactly as the four nested
/// loops over input row, input column, kernel row and kernel column.
pub fn scatter_conv_single<T: Real>(
    x: &Plane<T>,
    w: &Plane<T>,
    counter: &mut MultCounter,
) -> Plane<T> {
    let (h, wd) = (x.rows(), x.cols());
    let (kh, kw) = (w.rows(), w.cols());
    let mut y = vec![T::zero(); h * wd];
    for i in 0..h {
        for j in 0..wd {
            for m in 0..kh {
                for n in 0..kw {
                    let tx = i as isize - m as isize + (kh / 2) as isize;
                    let ty = j as isize - n as isize + (kw / 2) as isize;
                    if tx >= 0 && tx < h as isize && ty >= 0 && ty < wd as isize {
                        y[tx as usize * wd + ty as usize] += x.at(i, j) * w.at(m, n);
                        counter.count(1, 1);
                    } else {
                        counter.count(1, 0);
                    }
                }
            }
        }
    }
    Plane::new(h, wd, y).expect("output shape equals input shape")
}

/// Multi-channel scatter convolution. Output is `C_out×H×W`.
pub fn scatter_conv_multi<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    counter: &mut MultCounter,
) -> Result<Tensor3<T>> {
    check_channels(x, w)?;
    let plan = ScatterPlan::cached(w.kernel_h(), w.kernel_w(), &[GroupElement::IDENTITY])?;
    let cfg = TileConfig::full(x.height(), x.width(), w.kernel_h(), w.kernel_w());
    let out = scatter_oriented(x, w, &plan, &cfg, 1, counter)?;
    Ok(out.into_channels())
}

/// Tiled, multi-worker scatter convolution. Equal bit-for-bit to
/// [`scatter_conv_multi`] for any tile size and worker count.
pub fn tiled_scatter_conv<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    cfg: &TileConfig,
    workers: usize,
) -> Result<Tensor3<T>> {
    let mut counter = MultCounter::new();
    tiled_scatter_conv_counted(x, w, cfg, workers, &mut counter)
}

/// [`tiled_scatter_conv`] with instrumentation.
///
/// Input pixels in the halo of a tile are processed by every tile that
/// needs them, so the multiplication count exceeds the untiled count by the
/// halo overlap.
pub fn tiled_scatter_conv_counted<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    cfg: &TileConfig,
    workers: usize,
    counter: &mut MultCounter,
) -> Result<Tensor3<T>> {
    check_channels(x, w)?;
    if cfg.mode != HaloMode::Plain {
        return Err(Error::InvalidArgument(
            "tiled_scatter_conv expects a plain-mode tile configuration".into(),
        ));
    }
    let plan = ScatterPlan::cached(w.kernel_h(), w.kernel_w(), &[GroupElement::IDENTITY])?;
    Ok(scatter_oriented(x, w, &plan, cfg, workers, counter)?.into_channels())
}

/// Scatter convolution fused with 2×2 max pooling (stride 2, floor), done
/// tile by tile. Requires a [`HaloMode::MaxPool`] configuration so that
/// pooling windows that straddle a tile edge are complete inside the tile.
pub fn tiled_scatter_conv_maxpool2<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    cfg: &TileConfig,
    workers: usize,
) -> Result<Tensor3<T>> {
    check_channels(x, w)?;
    let (kh, kw) = (w.kernel_h(), w.kernel_w());
    cfg.validate(kh, kw)?;
    if cfg.mode != HaloMode::MaxPool {
        return Err(Error::InvalidArgument(
            "fused max pooling needs a MaxPool halo".into(),
        ));
    }
    let plan = ScatterPlan::cached(kh, kw, &[GroupElement::IDENTITY])?;
    let (h, wd) = (x.height(), x.width());
    let (ph, pw) = (h / 2, wd / 2);
    let co_n = w.out_channels();
    let tiles = tile_grid(h, wd, cfg);
    let wrows = pack_nhwc(w);
    let results = run_tiles(&tiles, workers, |tile| {
        // Conv outputs needed: the tile plus one row/column to close windows.
        let rows = tile.0.start..(tile.0.end + 1).min(h);
        let cols = tile.1.start..(tile.1.end + 1).min(wd);
        let mut c = MultCounter::new();
        let base = kh.max(kw) / 2;
        let acc = scatter_block(x, wrows.data(), co_n, &plan, &rows, &cols, base, &mut c);
        let (th, tw) = (rows.len(), cols.len());
        let mut pooled = Vec::new();
        for co in 0..co_n {
            for p in (tile.0.start.div_ceil(2))..ph {
                if 2 * p >= tile.0.end {
                    break;
                }
                for q in (tile.1.start.div_ceil(2))..pw {
                    if 2 * q >= tile.1.end {
                        break;
                    }
                    let mut best = T::neg_infinity();
                    for a in 0..2 {
                        for b in 0..2 {
                            let (r, s) = (2 * p + a - rows.start, 2 * q + b - cols.start);
                            debug_assert!(r < th && s < tw);
                            let v = acc[(co * th + r) * tw + s];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    pooled.push((co, p, q, best));
                }
            }
        }
        pooled
    });
    let mut y = Tensor3::zeros(co_n, ph, pw);
    for (co, p, q, v) in results.into_iter().flatten() {
        y.data_mut()[(co * ph + p) * pw + q] = v;
    }
    Ok(y)
}

/// 2×2, stride-2 spatial max pooling (floor).
pub fn max_pool2x2<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = x.shape();
    Tensor3::from_fn(c, h / 2, w / 2, |ch, p, q| {
        let mut best = T::neg_infinity();
        for a in 0..2 {
            for b in 0..2 {
                let v = x.at(ch, 2 * p + a, 2 * q + b);
                if v > best {
                    best = v;
                }
            }
        }
        best
    })
}

type Tile = (Range<usize>, Range<usize>);

fn tile_grid(h: usize, w: usize, cfg: &TileConfig) -> Vec<Tile> {
    let mut tiles = Vec::new();
    let mut r = 0;
    while r < h {
        let r1 = (r + cfg.tile_h).min(h);
        let mut c = 0;
        while c < w {
            let c1 = (c + cfg.tile_w).min(w);
            tiles.push((r..r1, c..c1));
            c = c1;
        }
        r = r1;
    }
    tiles
}

/// Runs `f` on every tile using up to `workers` threads. Results come back
/// in tile order regardless of the worker count.
fn run_tiles<R: Send>(tiles: &[Tile], workers: usize, f: impl Fn(&Tile) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(tiles.len().max(1));
    if workers == 1 {
        return tiles.iter().map(&f).collect();
    }
    let chunk = tiles.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("tile worker panicked"))
            .collect()
    })
}

/// Scatter convolution of every group element in `plan`, tiled.
///
/// Output layout is `(C_out, |G|, H, W)`. Each channel dot is computed once
/// per input pixel of a tile's input region and added to all `|G|`
/// destinations.
pub(crate) fn scatter_oriented<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    plan: &ScatterPlan,
    cfg: &TileConfig,
    workers: usize,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    let (kh, kw) = (w.kernel_h(), w.kernel_w());
    cfg.validate(kh, kw)?;
    if (plan.kernel_h, plan.kernel_w) != (kh, kw) {
        return Err(Error::ShapeMismatch(
            "scatter plan built for another kernel size".into(),
        ));
    }
    let (h, wd) = (x.height(), x.width());
    let co_n = w.out_channels();
    let g_n = plan.group_size();
    let wrows = pack_nhwc(w);
    let tiles = tile_grid(h, wd, cfg);
    let results = run_tiles(&tiles, workers, |tile| {
        let mut c = MultCounter::new();
        let acc = scatter_block(
            x,
            wrows.data(),
            co_n,
            plan,
            &tile.0,
            &tile.1,
            cfg.halo,
            &mut c,
        );
        (acc, c)
    });
    let mut out = OrientedFeature::zeros(co_n, g_n, h, wd);
    let mut parts = Vec::with_capacity(results.len());
    let concurrency = workers.max(1).min(tiles.len().max(1));
    for ((rows, cols), (acc, c)) in tiles.iter().zip(results) {
        let (th, tw) = (rows.len(), cols.len());
        for co in 0..co_n {
            for g in 0..g_n {
                let plane = out.slice_mut(co, g);
                let src = &acc[(co * g_n + g) * th * tw..(co * g_n + g + 1) * th * tw];
                for (r, src_row) in rows.clone().zip(src.chunks(tw)) {
                    plane[r * wd + cols.start..r * wd + cols.end].copy_from_slice(src_row);
                }
            }
        }
        parts.push(c);
    }
    // Only `concurrency` tiles are alive at once; charge the largest of them
    // that many times.
    let worst = parts.iter().map(|p| p.peak_aux_bytes).max().unwrap_or(0);
    let mut merged = MultCounter::new();
    merged.merge_concurrent(&parts);
    merged.peak_aux_bytes = worst * concurrency as u64;
    counter.count(merged.scalar_multiplications, merged.scalar_additions);
    counter.note_aux(merged.peak_aux_bytes as usize);
    Ok(out)
}

/// Computes every output of the region `rows × cols` (all `C_out`, all group
/// elements) from the inputs within `halo` of it. Returns a private
/// accumulator laid out `(C_out, |G|, rows, cols)`.
///
/// Per output element the contributions arrive ordered by input row, then by
/// kernel offset, independent of the region bounds.
#[allow(clippy::too_many_arguments)]
fn scatter_block<T: Real>(
    x: &Tensor3<T>,
    wrows: &[T],
    co_n: usize,
    plan: &ScatterPlan,
    rows: &Range<usize>,
    cols: &Range<usize>,
    halo: usize,
    counter: &mut MultCounter,
) -> Vec<T> {
    let (ci_n, h, wd) = x.shape();
    let kk = plan.kernel_h * plan.kernel_w;
    let g_n = plan.group_size();
    let (th, tw) = (rows.len(), cols.len());
    let mut acc = vec![T::zero(); co_n * g_n * th * tw];

    let (dy_min, dy_max, dx_min, dx_max) = plan.reach();
    let in_r0 = rows.start.saturating_sub(halo) as isize;
    let in_r1 = ((rows.end + halo).min(h)) as isize;
    let in_c0 = cols.start.saturating_sub(halo);
    let in_c1 = (cols.end + halo).min(wd);
    // Skip input rows/cols that cannot reach the region at all.
    let in_r0 = in_r0.max(rows.start as isize - dy_max).max(0) as usize;
    let in_r1 = in_r1.min(rows.end as isize - dy_min).max(0) as usize;
    let in_c0 = (in_c0 as isize).max(cols.start as isize - dx_max).max(0) as usize;
    let in_c1 = (in_c1 as isize).min(cols.end as isize - dx_min).max(0) as usize;
    if in_r0 >= in_r1 || in_c0 >= in_c1 {
        return acc;
    }
    let ncols = in_c1 - in_c0;
    let zrows = co_n * kk;
    let mut strip = vec![T::zero(); ci_n * ncols];
    let mut dots = vec![T::zero(); zrows * ncols];
    let size = std::mem::size_of::<T>();
    counter.note_aux((strip.len() + dots.len() + acc.len()) * size);

    for i in in_r0..in_r1 {
        for ci in 0..ci_n {
            let src = &x.channel(ci)[i * wd + in_c0..i * wd + in_c1];
            strip[ci * ncols..(ci + 1) * ncols].copy_from_slice(src);
        }
        gemm_into(wrows, &strip, &mut dots, zrows, ci_n, ncols);
        counter.count(
            (zrows * ci_n * ncols) as u64,
            (zrows * ci_n.saturating_sub(1) * ncols) as u64,
        );
        let mut scatter_adds = 0u64;
        for co in 0..co_n {
            for mn in 0..kk {
                let z = &dots[(co * kk + mn) * ncols..(co * kk + mn + 1) * ncols];
                for g in 0..g_n {
                    let (dy, dx) = plan.offsets[g][mn];
                    let r = i as isize + dy;
                    if r < rows.start as isize || r >= rows.end as isize {
                        continue;
                    }
                    // Input columns whose target lies inside [cols.start, cols.end).
                    let j0 = (cols.start as isize - dx).max(in_c0 as isize);
                    let j1 = (cols.end as isize - dx).min(in_c1 as isize);
                    if j0 >= j1 {
                        continue;
                    }
                    let base = ((co * g_n + g) * th + (r as usize - rows.start)) * tw;
                    let t0 = (j0 + dx) as usize - cols.start;
                    let len = (j1 - j0) as usize;
                    let dst = &mut acc[base + t0..base + t0 + len];
                    let src = &z[(j0 as usize - in_c0)..(j0 as usize - in_c0) + len];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                    scatter_adds += len as u64;
                }
            }
        }
        counter.count(0, scatter_adds);
    }
    acc
}

/// Phase-parallel scatter: one phase per kernel offset `(m, n)`. Within a
/// phase every worker multiplies its band of input rows by the same weight
/// slice, so all writes of the phase are disjoint; phases are separated by a
/// barrier. With several group elements each phase writes all `|G|`
/// orientation planes before the barrier.
pub fn phase_parallel_scatter<T: Real>(
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    plan: &ScatterPlan,
    workers: usize,
    counter: &mut MultCounter,
) -> Result<OrientedFeature<T>> {
    check_channels(x, w)?;
    let (ci_n, h, wd) = x.shape();
    let (co_n, _, kh, kw) = w.shape();
    if (plan.kernel_h, plan.kernel_w) != (kh, kw) {
        return Err(Error::ShapeMismatch(
            "scatter plan built for another kernel size".into(),
        ));
    }
    let g_n = plan.group_size();
    let workers = workers.max(1).min(h.max(1));
    let band = h.div_ceil(workers).max(1);
    let bands: Vec<Range<usize>> = (0..h).step_by(band).map(|a| a..(a + band).min(h)).collect();
    let mut out = OrientedFeature::zeros(co_n, g_n, h, wd);
    let size = std::mem::size_of::<T>();
    let mut peak = 0usize;

    for m in 0..kh {
        for n in 0..kw {
            // Weight slice W[:, :, m, n] as a C_out × C_in matrix.
            let wmn: Vec<T> = (0..co_n)
                .flat_map(|co| (0..ci_n).map(move |ci| (co, ci)))
                .map(|(co, ci)| w.at(co, ci, m, n))
                .collect();
            let offsets: Vec<(isize, isize)> = (0..g_n).map(|g| plan.offset(g, m, n)).collect();

            // Hand every worker the destination rows its input band maps to,
            // in every (c_o, g) plane.
            let mut per_worker: Vec<Vec<(usize, usize, &mut [T])>> =
                (0..bands.len()).map(|_| Vec::new()).collect();
            for (plane_idx, plane) in out.data_mut().chunks_mut(h * wd).enumerate() {
                let (co, g) = (plane_idx / g_n, plane_idx % g_n);
                let dy = offsets[g].0;
                let mut rest = plane;
                let mut consumed = 0usize;
                for (k, b) in bands.iter().enumerate() {
                    let lo = (b.start as isize + dy).clamp(0, h as isize) as usize;
                    let hi = (b.end as isize + dy).clamp(0, h as isize) as usize;
                    let (_, tail) = rest.split_at_mut((lo - consumed) * wd);
                    let (mine, tail) = tail.split_at_mut((hi - lo) * wd);
                    rest = tail;
                    consumed = hi;
                    per_worker[k].push((co, g, mine));
                }
            }

            let results: Vec<MultCounter> = std::thread::scope(|s| {
                let handles: Vec<_> = bands
                    .iter()
                    .zip(per_worker)
                    .map(|(b, targets)| {
                        let (wmn, offsets) = (&wmn, &offsets);
                        s.spawn(move || phase_band(x, wmn, co_n, offsets, b.clone(), targets))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("phase worker panicked"))
                    .collect()
            });
            let mut phase = MultCounter::new();
            phase.merge_concurrent(&results);
            peak = peak.max(phase.peak_aux_bytes as usize + wmn.len() * size);
            counter.count(phase.scalar_multiplications, phase.scalar_additions);
            counter.barriers += 1;
        }
    }
    counter.note_aux(peak);
    Ok(out)
}

fn phase_band<T: Real>(
    x: &Tensor3<T>,
    wmn: &[T],
    co_n: usize,
    offsets: &[(isize, isize)],
    band: Range<usize>,
    mut targets: Vec<(usize, usize, &mut [T])>,
) -> MultCounter {
    let (ci_n, h, wd) = x.shape();
    let mut c = MultCounter::new();
    let px = band.len() * wd;
    if px == 0 {
        return c;
    }
    let mut strip = vec![T::zero(); ci_n * px];
    for ci in 0..ci_n {
        strip[ci * px..(ci + 1) * px]
            .copy_from_slice(&x.channel(ci)[band.start * wd..band.end * wd]);
    }
    let mut dots = vec![T::zero(); co_n * px];
    gemm_into(wmn, &strip, &mut dots, co_n, ci_n, px);
    c.count(
        (co_n * ci_n * px) as u64,
        (co_n * ci_n.saturating_sub(1) * px) as u64,
    );
    c.note_aux((strip.len() + dots.len()) * std::mem::size_of::<T>());

    for (co, g, dst) in targets.iter_mut() {
        let (dy, dx) = offsets[*g];
        let lo = (band.start as isize + dy).clamp(0, h as isize) as usize;
        for i in band.clone() {
            let r = i as isize + dy;
            if r < 0 || r >= h as isize {
                continue;
            }
            let row = &mut dst[(r as usize - lo) * wd..(r as usize - lo + 1) * wd];
            let z = &dots[*co * px + (i - band.start) * wd..*co * px + (i - band.start + 1) * wd];
            let j0 = (-dx).max(0) as usize;
            let j1 = (wd as isize - dx).min(wd as isize).max(0) as usize;
            for j in j0..j1 {
                row[(j as isize + dx) as usize] += z[j];
            }
            c.count(0, j1.saturating_sub(j0) as u64);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::conv_gather_same;

    fn seq3x3() -> Plane<f64> {
        Plane::new(3, 3, (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Plane::new(3, 3, k).unwrap();
        let x = seq3x3();
        let mut c = MultCounter::new();
        assert_eq!(scatter_conv_single(&x, &w, &mut c), x);
    }

    #[test]
    fn all_ones_center_corner_and_count() {
        let w = Plane::new(3, 3, vec![1.0; 9]).unwrap();
        let mut c = MultCounter::new();
        let y = scatter_conv_single(&seq3x3(), &w, &mut c);
        assert_eq!(y.at(1, 1), 45.0);
        assert_eq!(y.at(0, 0), 12.0);
        assert_eq!(c.mults(), 81);
    }

    #[test]
    fn one_dimensional_hand_example() {
        // X = [1,0,0], W = [a,b,c]: the product with W[0] lands one to the
        // right of the input, W[1] on it, W[2] off the left edge.
        let x = Plane::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let w = Plane::new(1, 3, vec![2.0, 3.0, 5.0]).unwrap();
        let y = scatter_conv_single(&x, &w, &mut MultCounter::new());
        assert_eq!(y.data(), &[3.0, 2.0, 0.0]);
    }

    #[test]
    fn multi_matches_single_per_channel_sum() {
        let x = Tensor3::from_fn(2, 4, 5, |c, h, w| {
            ((c * 31 + h * 7 + w * 3) % 11) as f64 - 5.0
        });
        let w = FilterBank::from_fn(1, 2, 3, 3, |_, c, i, j| {
            ((c * 13 + i * 5 + j) % 7) as f64 - 3.0
        });
        let mut c = MultCounter::new();
        let y = scatter_conv_multi(&x, &w, &mut c).unwrap();
        let mut want = Plane::<f64>::zeros(4, 5).into_data();
        for ci in 0..2 {
            let s = scatter_conv_single(&x.plane(ci), &w.kernel(0, ci), &mut MultCounter::new());
            for (a, b) in want.iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        assert_eq!(y.data(), &want[..]);
        assert_eq!(c.mults(), 4 * 5 * 9 * 2);
    }

    #[test]
    fn zero_second_channel_reduces_to_single() {
        let x = Tensor3::from_fn(
            2,
            5,
            5,
            |c, h, w| if c == 0 { (h * 5 + w) as f64 } else { 0.0 },
        );
        let w = FilterBank::from_fn(1, 2, 3, 3, |_, c, i, j| (c * 9 + i * 3 + j) as f64);
        let y = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        let s = scatter_conv_single(&x.plane(0), &w.kernel(0, 0), &mut MultCounter::new());
        assert_eq!(y.channel(0), s.data());
    }

    #[test]
    fn negated_filter_negates_output() {
        let x = Tensor3::from_fn(3, 6, 4, |c, h, w| (c + h * w) as f64 * 0.5 - 2.0);
        let w = FilterBank::from_fn(2, 3, 3, 3, |o, c, i, j| {
            let v = (c * 9 + i * 3 + j) as f64 * 0.1 - 1.0;
            if o == 1 {
                -v
            } else {
                v
            }
        });
        let y = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        for (a, b) in y.channel(0).iter().zip(y.channel(1)) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn scatter_equals_gather_same_on_even_kernel() {
        let x = Tensor3::from_fn(2, 5, 6, |c, h, w| {
            ((c * 17 + h * 5 + w * 3) % 13) as f64 - 6.0
        });
        let w = FilterBank::from_fn(2, 2, 2, 4, |o, c, i, j| {
            ((o * 7 + c * 3 + i * 4 + j) % 5) as f64 - 2.0
        });
        let y = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        assert_eq!(y, conv_gather_same(&x, &w).unwrap());
    }

    #[test]
    fn tile_config_validation() {
        assert!(TileConfig::for_kernel(4, 4, 3, 3, HaloMode::Plain)
            .validate(3, 3)
            .is_ok());
        let bad = TileConfig {
            tile_h: 4,
            tile_w: 4,
            halo: 2,
            mode: HaloMode::Plain,
        };
        assert!(bad.validate(3, 3).is_err());
        let pool = TileConfig::for_kernel(4, 4, 3, 3, HaloMode::MaxPool);
        assert_eq!(pool.halo, 2);
        let empty = TileConfig {
            tile_h: 0,
            tile_w: 4,
            halo: 1,
            mode: HaloMode::Plain,
        };
        assert!(empty.validate(3, 3).is_err());
        let x = Tensor3::<f64>::zeros(1, 4, 4);
        let w = FilterBank::<f64>::zeros(1, 1, 3, 3);
        assert!(tiled_scatter_conv(&x, &w, &bad, 1).is_err());
        assert!(tiled_scatter_conv(&x, &w, &pool, 1).is_err());
    }

    #[test]
    fn degenerate_tiling_is_exact() {
        let x = Tensor3::from_fn(2, 7, 9, |c, h, w| ((c * 7 + h * 3 + w) as f64).sin());
        let w = FilterBank::from_fn(3, 2, 3, 3, |o, c, i, j| {
            ((o + c * 3 + i * 5 + j) as f64).cos()
        });
        let full = TileConfig::full(7, 9, 3, 3);
        let a = tiled_scatter_conv(&x, &w, &full, 1).unwrap();
        let b = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fused_maxpool_matches_unfused() {
        let x = Tensor3::from_fn(2, 9, 8, |c, h, w| ((c * 11 + h * 7 + w * 3) as f64).sin());
        let w = FilterBank::from_fn(2, 2, 3, 3, |o, c, i, j| {
            ((o * 5 + c * 3 + i * 2 + j) as f64).cos()
        });
        let want = max_pool2x2(&scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap());
        for (th, tw) in [(1, 1), (3, 3), (2, 4), (5, 3), (9, 8)] {
            let cfg = TileConfig::for_kernel(th, tw, 3, 3, HaloMode::MaxPool);
            for workers in [1, 3] {
                assert_eq!(
                    tiled_scatter_conv_maxpool2(&x, &w, &cfg, workers).unwrap(),
                    want
                );
            }
        }
    }

    #[test]
    fn plan_offsets_for_identity() {
        let p = ScatterPlan::identity(3, 3);
        assert_eq!(p.offset(0, 0, 0), (1, 1));
        assert_eq!(p.offset(0, 2, 1), (-1, 0));
    }

    #[test]
    fn phase_parallel_counts_one_barrier_per_offset() {
        let x = Tensor3::from_fn(2, 6, 6, |c, h, w| (c * 36 + h * 6 + w) as f64);
        let w = FilterBank::from_fn(2, 2, 3, 3, |o, c, i, j| (o * 18 + c * 9 + i * 3 + j) as f64);
        let mut c = MultCounter::new();
        let plan = ScatterPlan::identity(3, 3);
        let y = phase_parallel_scatter(&x, &w, &plan, 3, &mut c).unwrap();
        assert_eq!(c.barriers, 9);
        assert_eq!(c.mults(), 6 * 6 * 9 * 2 * 2);
        assert_eq!(
            y.into_channels(),
            scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap()
        );
    }
}
