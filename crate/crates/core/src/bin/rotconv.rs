use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use rotconv::bench::{self, BenchConfig, Mode};
use rotconv::train::{self, NetConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "rotconv",
    version,
    about = "Scatter convolution benchmarks and rotation-invariant training demo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Time gather, im2col and scatter convolutions over a grid of shapes.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64, 128])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 64])]
        cin: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 64])]
        cout: Vec<usize>,
        /// Group size of the group modes: 4 (p4) or 8 (p4m).
        #[arg(long, default_value_t = 4)]
        orientations: usize,
        /// Comma-separated subset of gather, im2col_matmul, scatter, group_gather, group_scatter.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; the table goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Train the micro segmentation net on synthetic rotated shapes.
    Train {
        /// 1 (plain), 4 (p4), 8 or 16 (steerable).
        #[arg(long, default_value_t = 4)]
        orientations: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda_mag: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda_orth: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Channels of the hidden layers.
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 200)]
        train_samples: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_bench(cfg: BenchConfig, out: Option<PathBuf>, format: Format) -> rotconv::Result<bool> {
    let report = bench::run_sweep(&cfg)?;
    for f in &report.failures {
        error!(
            "cross-check failed: {} size={} cin={} cout={} rel_error={:e}",
            f.mode, f.input_size, f.in_channels, f.out_channels, f.rel_error
        );
    }
    if !report.records.is_empty() {
        match (out, format) {
            (Some(p), Format::Csv) => bench::emit_csv(&report.records, &p)?,
            (Some(p), Format::Md) => bench::emit_markdown(&report.records, &p)?,
            (None, Format::Csv) => print!("{}", bench::to_csv_string(&report.records)?),
            (None, Format::Md) => print!("{}", bench::to_markdown(&report.records)?),
        }
    }
    Ok(report.all_checks_passed())
}

fn run(cli: Cli) -> rotconv::Result<bool> {
    match cli.command {
        Command::Bench {
            sizes,
            cin,
            cout,
            orientations,
            modes,
            kernel,
            repeats,
            warmup,
            workers,
            seed,
            out,
            format,
        } => {
            let modes = match modes {
                Some(names) => names
                    .iter()
                    .map(|m| m.parse::<Mode>())
                    .collect::<rotconv::Result<_>>()?,
                None => Mode::ALL.to_vec(),
            };
            let cfg = BenchConfig {
                sizes,
                in_channels: cin,
                out_channels: cout,
                orientations,
                modes,
                kernel,
                repeats,
                warmup,
                workers,
                seed,
            };
            run_bench(cfg, out, format)
        }
        Command::Train {
            orientations,
            epochs,
            lr,
            lambda_mag,
            lambda_orth,
            seed,
            size,
            batch_size,
            hidden,
            train_samples,
            workers,
            out,
        } => {
            let cfg = TrainConfig {
                net: NetConfig {
                    orientations,
                    hidden,
                    ..NetConfig::default()
                },
                epochs,
                lr,
                lambda_mag,
                lambda_orth,
                seed,
                size,
                batch_size,
                n_train: train_samples,
                workers,
                ..TrainConfig::default()
            };
            let report = train::train(&cfg)?;
            if let Some(p) = out {
                train::write_metrics_csv(&report.metrics, &p)?;
            }
            println!("epoch,train_loss,val_acc,rot_test_acc");
            for m in &report.metrics {
                println!(
                    "{},{:.6},{:.4},{:.4}",
                    m.epoch, m.train_loss, m.val_acc, m.rot_test_acc
                );
            }
            println!(
                "test_acc={:.4} rot_test_acc={:.4}",
                report.test_acc, report.rot_test_acc
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
