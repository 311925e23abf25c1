//! Benchmark sweep over input size, channel counts and dataflow mode.
//!
//! Each cell first runs a 64-bit correctness check of the mode under test
//! against the gather reference; only cells that pass are timed. Timing runs
//! use 32-bit copies of the same seeded data.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{
    group_conv_gather, group_conv_scatter_phased, group_conv_scatter_reuse, GroupSpec,
};
use crate::reference::{conv_gather_same, conv_via_matmul_counted, pad_zeros};
use crate::scatter::{phase_parallel_scatter, scatter_conv_multi, MultCounter, ScatterPlan};
use crate::tensor::{max_rel_diff, FilterBank, Real, Tensor3};

/// Relative error allowed by the 64-bit cross-check.
pub const CROSS_CHECK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gather,
    Im2colMatmul,
    Scatter,
    GroupGather,
    GroupScatter,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Gather,
        Mode::Im2colMatmul,
        Mode::Scatter,
        Mode::GroupGather,
        Mode::GroupScatter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gather => "gather",
            Mode::Im2colMatmul => "im2col_matmul",
            Mode::Scatter => "scatter",
            Mode::GroupGather => "group_gather",
            Mode::GroupScatter => "group_scatter",
        }
    }

    pub fn is_group(self) -> bool {
        matches!(self, Mode::GroupGather | Mode::GroupScatter)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub in_channels: Vec<usize>,
    pub out_channels: Vec<usize>,
    /// Group size used by the group modes: 4 (p4) or 8 (p4m).
    pub orientations: usize,
    pub modes: Vec<Mode>,
    pub kernel: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![8, 16, 32, 64, 128],
            in_channels: vec![4, 16, 64],
            out_channels: vec![4, 16, 64],
            orientations: 4,
            modes: Mode::ALL.to_vec(),
            kernel: 3,
            repeats: 20,
            warmup: 3,
            workers: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn group(&self) -> Result<GroupSpec> {
        match self.orientations {
            4 => Ok(GroupSpec::p4()),
            8 => Ok(GroupSpec::p4m()),
            r => Err(Error::InvalidArgument(format!(
                "benchmark orientations must be 4 (p4) or 8 (p4m), got {r}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty()
            || self.in_channels.is_empty()
            || self.out_channels.is_empty()
            || self.modes.is_empty()
        {
            return Err(Error::InvalidArgument(
                "benchmark grid has an empty axis".into(),
            ));
        }
        if self.sizes.contains(&0)
            || self.in_channels.contains(&0)
            || self.out_channels.contains(&0)
        {
            return Err(Error::InvalidArgument(
                "sizes and channel counts must be >= 1".into(),
            ));
        }
        if self.kernel == 0 || self.repeats == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "kernel, repeats and workers must be >= 1".into(),
            ));
        }
        if self.modes.iter().any(|m| m.is_group()) {
            self.group()?.check_kernel(self.kernel, self.kernel)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: Mode,
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub orientations: usize,
    pub repeats: usize,
    /// Median wall time of the timed repeats.
    pub wall_ms: f64,
    pub mults: u64,
    pub peak_aux_bytes: u64,
}

/// A cell whose output disagreed with the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckFailure {
    pub mode: Mode,
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<CheckFailure>,
    /// Human-readable reasons for cells that were not run.
    pub skipped: Vec<String>,
}

impl SweepReport {
    pub fn all_checks_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `H·W·K²·C_in·C_out`, the count every single-orientation dataflow performs
/// at same padding.
pub fn single_orientation_mults(size: usize, kernel: usize, cin: usize, cout: usize) -> u64 {
    (size * size * kernel * kernel * cin * cout) as u64
}

struct Cell {
    x: Tensor3<f64>,
    w: FilterBank<f64>,
}

fn make_cell(size: usize, cin: usize, cout: usize, k: usize, seed: u64) -> Cell {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let x = Tensor3::from_fn(cin, size, size, |_, _, _| dist.sample(&mut rng));
    let w = FilterBank::from_fn(cout, cin, k, k, |_, _, _, _| dist.sample(&mut rng));
    Cell { x, w }
}

/// Output of one mode as a flat `C_out(·R)×H×W` buffer plus its counters.
fn run_mode<T: Real>(
    mode: Mode,
    x: &Tensor3<T>,
    w: &FilterBank<T>,
    group: GroupSpec,
    workers: usize,
) -> Result<(Vec<T>, MultCounter)> {
    let mut counter = MultCounter::new();
    let k = w.kernel_h();
    let out = match mode {
        Mode::Gather => {
            counter.scalar_multiplications =
                single_orientation_mults(x.height(), k, x.channels(), w.out_channels());
            conv_gather_same(x, w)?.into_data()
        }
        Mode::Im2colMatmul => {
            let padded = pad_zeros(x, w.kernel_h() / 2, w.kernel_w() / 2);
            let (y, aux) = conv_via_matmul_counted(&padded, w)?;
            counter.scalar_multiplications = (y.data().len() * x.channels() * k * k) as u64;
            counter.peak_aux_bytes = aux as u64;
            y.into_data()
        }
        Mode::Scatter if workers > 1 => {
            let plan = ScatterPlan::identity(w.kernel_h(), w.kernel_w());
            phase_parallel_scatter(x, w, &plan, workers, &mut counter)?
                .into_channels()
                .into_data()
        }
        Mode::Scatter => scatter_conv_multi(x, w, &mut counter)?.into_data(),
        Mode::GroupGather => {
            counter.scalar_multiplications = group.size as u64
                * single_orientation_mults(x.height(), k, x.channels(), w.out_channels());
            group_conv_gather(x, w, group)?.into_channels().into_data()
        }
        Mode::GroupScatter if workers > 1 => {
            group_conv_scatter_phased(x, w, group, workers, &mut counter)?
                .into_channels()
                .into_data()
        }
        Mode::GroupScatter => group_conv_scatter_reuse(x, w, group, &mut counter)?
            .into_channels()
            .into_data(),
    };
    Ok((out, counter))
}

fn reference_output(mode: Mode, cell: &Cell, group: GroupSpec) -> Result<Vec<f64>> {
    if mode.is_group() {
        Ok(group_conv_gather(&cell.x, &cell.w, group)?
            .into_channels()
            .into_data())
    } else {
        Ok(conv_gather_same(&cell.x, &cell.w)?.into_data())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every `(size, C_in, C_out, mode)` cell of the grid, one at a time.
pub fn run_sweep(cfg: &BenchConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let group = if cfg.modes.iter().any(|m| m.is_group()) {
        cfg.group()?
    } else {
        GroupSpec::trivial()
    };
    let mut report = SweepReport::default();
    for &size in &cfg.sizes {
        if cfg.kernel > size {
            let reason = format!(
                "size {size}: kernel {k}x{k} larger than input",
                k = cfg.kernel
            );
            warn!("skipping {reason}");
            report.skipped.push(reason);
            continue;
        }
        for &cin in &cfg.in_channels {
            for &cout in &cfg.out_channels {
                let cell_seed = cfg.seed ^ ((size as u64) << 40 | (cin as u64) << 20 | cout as u64);
                let cell = make_cell(size, cin, cout, cfg.kernel, cell_seed);
                let (x32, w32) = (cell.x.cast::<f32>(), cell.w.cast::<f32>());
                for &mode in &cfg.modes {
                    let (out64, counter) = run_mode(mode, &cell.x, &cell.w, group, cfg.workers)?;
                    let rel_error = max_rel_diff(&out64, &reference_output(mode, &cell, group)?);
                    if rel_error.is_nan() || rel_error >= CROSS_CHECK_TOL {
                        warn!("{mode} size={size} cin={cin} cout={cout}: cross-check failed ({rel_error:e})");
                        report.failures.push(CheckFailure {
                            mode,
                            input_size: size,
                            in_channels: cin,
                            out_channels: cout,
                            rel_error,
                        });
                        continue;
                    }
                    for _ in 0..cfg.warmup {
                        std::hint::black_box(run_mode(mode, &x32, &w32, group, cfg.workers)?);
                    }
                    let times = (0..cfg.repeats)
                        .map(|_| {
                            let start = Instant::now();
                            let out = run_mode(mode, &x32, &w32, group, cfg.workers)?;
                            let ms = start.elapsed().as_secs_f64() * 1e3;
                            std::hint::black_box(out);
                            Ok(ms.max(f64::MIN_POSITIVE))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let record = BenchRecord {
                        mode,
                        input_size: size,
                        in_channels: cin,
                        out_channels: cout,
                        orientations: if mode.is_group() { group.size } else { 1 },
                        repeats: cfg.repeats,
                        wall_ms: median(times),
                        mults: counter.scalar_multiplications,
                        peak_aux_bytes: counter.peak_aux_bytes,
                    };
                    info!(
                        "{mode} size={size} cin={cin} cout={cout}: {:.3} ms, {} mults",
                        record.wall_ms, record.mults
                    );
                    report.records.push(record);
                }
            }
        }
    }
    Ok(report)
}

fn require_records(records: &[BenchRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "no benchmark records to write".into(),
        ));
    }
    Ok(())
}

pub fn to_csv_string(records: &[BenchRecord]) -> Result<String> {
    require_records(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Writes records as CSV. Nothing is created when `records` is empty.
pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let text = to_csv_string(records)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_csv_str(text: &str) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn parse_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    parse_csv_str(&std::fs::read_to_string(path)?)
}

/// Wall time of the gather-type baseline for the record's cell: `gather`
/// for single-orientation modes, `group_gather` for group modes.
fn baseline_ms(records: &[BenchRecord], r: &BenchRecord) -> Option<f64> {
    let want = if r.mode.is_group() {
        Mode::GroupGather
    } else {
        Mode::Gather
    };
    records
        .iter()
        .find(|b| {
            b.mode == want
                && (b.input_size, b.in_channels, b.out_channels)
                    == (r.input_size, r.in_channels, r.out_channels)
        })
        .map(|b| b.wall_ms)
}

/// Markdown table of the records. The `speedup` column is the baseline
/// gather time of the cell divided by the row's time.
pub fn to_markdown(records: &[BenchRecord]) -> Result<String> {
    require_records(records)?;
    let mut s = String::new();
    s.push_str("| mode | input_size | in_channels | out_channels | orientations | repeats | wall_ms | mults | peak_aux_bytes | speedup |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in records {
        let speedup = baseline_ms(records, r)
            .map_or_else(|| "-".to_string(), |b| format!("{:.2}", b / r.wall_ms));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {:.4} | {} | {} | {} |",
            r.mode,
            r.input_size,
            r.in_channels,
            r.out_channels,
            r.orientations,
            r.repeats,
            r.wall_ms,
            r.mults,
            r.peak_aux_bytes,
            speedup
        );
    }
    Ok(s)
}

/// Writes the Markdown table. Nothing is created when `records` is empty.
pub fn emit_markdown(records: &[BenchRecord], path: &Path) -> Result<()> {
    let text = to_markdown(records)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(modes: Vec<Mode>) -> BenchConfig {
        BenchConfig {
            sizes: vec![8, 16, 32],
            in_channels: vec![4, 8],
            out_channels: vec![4, 8],
            modes,
            repeats: 1,
            warmup: 0,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn grid_counting() {
        let r = run_sweep(&small(vec![
            Mode::Gather,
            Mode::Scatter,
            Mode::Im2colMatmul,
        ]))
        .unwrap();
        assert_eq!(r.records.len(), 36);
        assert!(r.all_checks_passed());
        assert!(r.records.iter().all(|x| x.wall_ms > 0.0));
    }

    #[test]
    fn mult_counts_follow_formula() {
        let mut cfg = small(Mode::ALL.to_vec());
        cfg.sizes = vec![8];
        let r = run_sweep(&cfg).unwrap();
        for rec in &r.records {
            let base =
                single_orientation_mults(rec.input_size, 3, rec.in_channels, rec.out_channels);
            let expect = if rec.mode == Mode::GroupGather {
                4 * base
            } else {
                base
            };
            assert_eq!(rec.mults, expect, "{:?}", rec);
        }
        let im2col = r
            .records
            .iter()
            .find(|r| r.mode == Mode::Im2colMatmul)
            .unwrap();
        assert!(im2col.peak_aux_bytes > 0);
    }

    #[test]
    fn infeasible_cells_are_skipped() {
        let mut cfg = small(vec![Mode::Gather]);
        cfg.sizes = vec![2, 8];
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.records.len(), 4);
    }

    #[test]
    fn parallel_workers_pass_checks() {
        let mut cfg = small(vec![Mode::Scatter, Mode::GroupScatter]);
        cfg.workers = 3;
        cfg.orientations = 8;
        let r = run_sweep(&cfg).unwrap();
        assert!(r.all_checks_passed());
        assert!(r
            .records
            .iter()
            .filter(|x| x.mode == Mode::GroupScatter)
            .all(|x| x.orientations == 8));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(vec![Mode::GroupScatter]);
        cfg.orientations = 6;
        assert!(run_sweep(&cfg).is_err());
        let mut cfg = small(vec![Mode::Gather]);
        cfg.repeats = 0;
        assert!(run_sweep(&cfg).is_err());
    }

    #[test]
    fn emitters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        assert!(emit_csv(&[], &path).is_err());
        assert!(!path.exists());
        assert!(emit_markdown(&[], &path).is_err());
        assert!(!path.exists());

        let rec = BenchRecord {
            mode: Mode::Im2colMatmul,
            input_size: 8,
            in_channels: 4,
            out_channels: 4,
            orientations: 1,
            repeats: 2,
            wall_ms: 0.125,
            mults: 9216,
            peak_aux_bytes: 9216,
        };
        emit_csv(std::slice::from_ref(&rec), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            "mode,input_size,in_channels,out_channels,orientations,repeats,wall_ms,mults,peak_aux_bytes"
        );
        assert_eq!(parse_csv(&path).unwrap(), vec![rec]);
    }

    #[test]
    fn markdown_speedup() {
        let mk = |mode, wall_ms| BenchRecord {
            mode,
            input_size: 8,
            in_channels: 4,
            out_channels: 4,
            orientations: 1,
            repeats: 1,
            wall_ms,
            mults: 1,
            peak_aux_bytes: 0,
        };
        let md = to_markdown(&[mk(Mode::Gather, 2.0), mk(Mode::Scatter, 1.0)]).unwrap();
        assert!(md.lines().nth(3).unwrap().ends_with("| 2.00 |"));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("winograd".parse::<Mode>().is_err());
    }
}
