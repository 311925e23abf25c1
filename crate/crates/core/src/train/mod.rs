//! Minibatch SGD training of [`MicroNet`] on synthetic rotated shapes.

mod data;
mod net;

use std::path::Path;
use std::thread;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steerable::DEFAULT_ORTH_EPS;

pub use data::{
    generate_dataset, generate_splits, rotated_copies, Splits, SynthSample, MAX_CLASSES, MIN_SIZE,
};
pub use net::{
    softmax_cross_entropy, ActivationPattern, Block1, MicroNet, NetConfig, Params, PoolKind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_mag: f64,
    pub lambda_orth: f64,
    pub orth_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Threads used for per-sample gradients and evaluation. Results do not
    /// depend on it: per-sample gradients are summed in sample order.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 30,
            lr: 0.05,
            lambda_mag: 0.1,
            lambda_orth: 0.1,
            orth_eps: DEFAULT_ORTH_EPS,
            batch_size: 8,
            seed: 0,
            size: 32,
            n_train: 200,
            n_val: 40,
            n_test: 40,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.lambda_mag < 0.0 || self.lambda_orth < 0.0 {
            return Err(Error::InvalidArgument(
                "regularization weights must be >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "batch size and workers must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub rot_test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub test_acc: f64,
    pub rot_test_acc: f64,
    pub model: MicroNet,
}

/// Runs `f` over `items` on up to `workers` threads, returning results in
/// input order.
fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mean per-pixel top-1 accuracy.
pub fn evaluate(model: &MicroNet, data: &[SynthSample]) -> Result<f64> {
    evaluate_with_workers(model, data, 1)
}

pub fn evaluate_with_workers(
    model: &MicroNet,
    data: &[SynthSample],
    workers: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let counts = par_map(data, workers, |s| {
        model.predict(&s.image).map(|p| {
            (
                p.iter().zip(&s.labels).filter(|(a, b)| a == b).count(),
                p.len(),
            )
        })
    });
    let (mut hit, mut total) = (0usize, 0usize);
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    Ok(hit as f64 / total as f64)
}

/// Generates the splits for `cfg` and trains on them.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let splits = generate_splits(
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.size,
        cfg.net.classes,
        cfg.seed,
    )?;
    train_on(cfg, &splits)
}

/// Trains a freshly initialized net on given splits with plain SGD at a
/// fixed learning rate. Aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train_on(cfg: &TrainConfig, splits: &Splits) -> Result<TrainReport> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut model = MicroNet::new(cfg.net, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05EE_D0F0_BDE2);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = par_map(batch, cfg.workers, |&i| {
                let s = &splits.train[i];
                model.loss_and_grad(&s.image, &s.labels)
            });
            let mut grad = model.params.zeros_like();
            let mut ce = 0.0;
            for r in per_sample {
                let (l, g) = r?;
                ce += l;
                grad.axpy(1.0, &g);
            }
            let inv = 1.0 / batch.len() as f64;
            ce *= inv;
            grad.scale(inv);
            let (reg, reg_grad) =
                model.regularizer(cfg.lambda_mag, cfg.lambda_orth, cfg.orth_eps)?;
            if let Some(g) = reg_grad {
                grad.axpy(1.0, &g);
            }
            let loss = ce + reg;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {batches}: loss is {loss} (lr {})",
                    cfg.lr
                )));
            }
            model.params.axpy(-cfg.lr, &grad);
            loss_sum += loss;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc: evaluate_with_workers(&model, &splits.val, cfg.workers)?,
            rot_test_acc: evaluate_with_workers(&model, &splits.rot_test, cfg.workers)?,
        };
        info!(
            "epoch {epoch}: loss {:.5}, val {:.4}, rotated test {:.4}",
            m.train_loss, m.val_acc, m.rot_test_acc
        );
        metrics.push(m);
    }
    Ok(TrainReport {
        metrics,
        test_acc: evaluate_with_workers(&model, &splits.test, cfg.workers)?,
        rot_test_acc: evaluate_with_workers(&model, &splits.rot_test, cfg.workers)?,
        model,
    })
}

/// Writes `epoch,train_loss,val_acc,rot_test_acc` rows.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if metrics.is_empty() {
        w.write_record(["epoch", "train_loss", "val_acc", "rot_test_acc"])?;
    }
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
