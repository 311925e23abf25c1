//! Synthetic rotated-shapes segmentation data.
//!
//! Class 0 is background. Class 1 marks thin strokes (straight bars and
//! L-shapes), class 2 filled wedges and class 3, when requested, filled
//! ellipses. Every shape is drawn at a uniformly random continuous
//! orientation, so shape class and local orientation are independent.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Largest class count the generator can draw.
pub const MAX_CLASSES: usize = 4;

/// Smallest image side the generator accepts.
pub const MIN_SIZE: usize = 4;

const NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `1×S×S` intensity image.
    pub image: Tensor3<f64>,
    /// Row-major `S×S` class grid.
    pub labels: Vec<usize>,
}

impl SynthSample {
    pub fn size(&self) -> usize {
        self.image.height()
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.size() + j]
    }

    /// Rotates image and labels together by `k` counterclockwise quarter turns.
    pub fn rot90(&self, k: i64) -> SynthSample {
        let n = self.size();
        let mut labels = self.labels.clone();
        for _ in 0..k.rem_euclid(4) {
            let prev = labels.clone();
            for i in 0..n {
                for j in 0..n {
                    labels[i * n + j] = prev[j * n + (n - 1 - i)];
                }
            }
        }
        SynthSample {
            image: self.image.rot90(k),
            labels,
        }
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Bar { len: f64, half_width: f64 },
    Ell { len: f64, half_width: f64 },
    Wedge { radius: f64, half_angle: f64 },
    Ellipse { a: f64, b: f64 },
}

impl Shape {
    fn class(self) -> usize {
        match self {
            Shape::Bar { .. } | Shape::Ell { .. } => 1,
            Shape::Wedge { .. } => 2,
            Shape::Ellipse { .. } => 3,
        }
    }

    /// Whether local point `(u, v)` (shape frame, `u` along the heading) is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Bar { len, half_width } => u.abs() <= len / 2.0 && v.abs() <= half_width,
            Shape::Ell { len, half_width } => {
                let arm = |a: f64, b: f64| {
                    (0.0..=len).contains(&(a + half_width)) && b.abs() <= half_width
                };
                arm(u, v) || arm(v, u)
            }
            Shape::Wedge { radius, half_angle } => {
                let r = u.hypot(v);
                r <= radius && v.atan2(u).abs() <= half_angle
            }
            Shape::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, class: usize, size: f64) -> Shape {
    match class {
        1 if rng.gen_bool(0.5) => Shape::Bar {
            len: rng.gen_range(0.35..0.65) * size,
            half_width: rng.gen_range(0.6..1.1),
        },
        1 => Shape::Ell {
            len: rng.gen_range(0.25..0.45) * size,
            half_width: rng.gen_range(0.6..1.1),
        },
        2 => Shape::Wedge {
            radius: rng.gen_range(0.2..0.35) * size,
            half_angle: rng.gen_range(0.3..0.6),
        },
        _ => Shape::Ellipse {
            a: rng.gen_range(0.12..0.22) * size,
            b: rng.gen_range(0.06..0.1) * size,
        },
    }
}

fn draw_sample(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> SynthSample {
    let s = size as f64;
    loop {
        let mut image = vec![0.0; size * size];
        let mut labels = vec![0usize; size * size];
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let class = rng.gen_range(1..classes);
            let shape = random_shape(rng, class, s);
            let phi: f64 = rng.gen_range(0.0..TAU);
            let (sin, cos) = phi.sin_cos();
            let cy = rng.gen_range(0.2..0.8) * s;
            let cx = rng.gen_range(0.2..0.8) * s;
            for i in 0..size {
                for j in 0..size {
                    let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    if shape.contains(u, v) {
                        image[i * size + j] = 1.0;
                        labels[i * size + j] = shape.class();
                    }
                }
            }
        }
        let foreground = labels.iter().filter(|&&l| l != 0).count();
        if foreground == 0 || foreground == labels.len() {
            continue;
        }
        for v in &mut image {
            *v += rng.gen_range(-NOISE..NOISE);
        }
        let image = Tensor3::new(1, size, size, image).expect("buffer matches shape");
        return SynthSample { image, labels };
    }
}

fn check_args(size: usize, classes: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image size must be >= {MIN_SIZE}, got {size}"
        )));
    }
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "class count must be in 2..={MAX_CLASSES}, got {classes}"
        )));
    }
    Ok(())
}

/// `n` samples of size `S×S`, deterministic in `seed`. Each sample holds
/// 1–3 shapes on background and at least one pixel of background and of
/// foreground.
pub fn generate_dataset(
    n: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    check_args(size, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| draw_sample(&mut rng, size, classes))
        .collect())
}

/// Every sample rotated by 90°, 180° and 270°, in that order per sample.
pub fn rotated_copies(samples: &[SynthSample]) -> Vec<SynthSample> {
    samples
        .iter()
        .flat_map(|s| (1..4).map(move |k| s.rot90(k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    /// Rotated copies of `test`.
    pub rot_test: Vec<SynthSample>,
}

/// Train, validation and test splits drawn from independent streams, plus
/// the rotated test split.
pub fn generate_splits(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Splits> {
    let stream = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let train = generate_dataset(n_train, size, classes, stream(1))?;
    let val = generate_dataset(n_val, size, classes, stream(2))?;
    let test = generate_dataset(n_test, size, classes, stream(3))?;
    let rot_test = rotated_copies(&test);
    Ok(Splits {
        train,
        val,
        test,
        rot_test,
    })
}
