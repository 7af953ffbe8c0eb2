//! Dataset ingestion and batching.
//!
//! Sources: IDX image/label files ([`idx`]), delimited numeric tables
//! ([`delimited`]), and built-in synthetic generators ([`synth_two_moons`],
//! [`synth_images`]). All of them produce the same in-memory [`Dataset`]:
//! `N x d` f64 features, dense class labels, optional normalization record.

pub mod delimited;
pub mod idx;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_indexed, StreamTag};
use crate::tensor::Tensor;

/// Per-feature normalization applied to a dataset, kept for audit.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    ZScore { mean: Vec<f64>, std: Vec<f64> },
    MinMax { min: Vec<f64>, max: Vec<f64> },
}

/// In-memory classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    d: usize,
    class_count: usize,
    normalization: Option<Normalization>,
    /// Original label spellings in first-appearance order, when the source
    /// had non-index labels.
    label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        d: usize,
        class_count: usize,
    ) -> Result<Dataset> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        if features.len() != n * d || d == 0 {
            return Err(Error::Shape {
                op: "dataset",
                left: vec![n, d],
                right: vec![features.len()],
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "dataset",
                message: "non-finite feature value".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain {
                op: "dataset",
                message: format!("label {bad} outside 0..{class_count}"),
            });
        }
        Ok(Dataset {
            features,
            labels,
            n,
            d,
            class_count,
            normalization: None,
            label_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    pub(crate) fn set_label_names(&mut self, names: Vec<String>) {
        self.label_names = Some(names);
    }

    /// The first `n` samples as a new dataset (deterministic subsetting).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.n {
            return Err(Error::Config(format!(
                "cannot take {n} samples from a dataset of {}",
                self.n
            )));
        }
        Ok(Dataset {
            features: self.features[..n * self.d].to_vec(),
            labels: self.labels[..n].to_vec(),
            n,
            d: self.d,
            class_count: self.class_count,
            normalization: self.normalization.clone(),
            label_names: self.label_names.clone(),
        })
    }

    /// Z-scores every feature in place. A second normalization call is
    /// rejected so scaling can never stack silently.
    pub fn normalize_zscore(&mut self) -> Result<()> {
        self.guard_unnormalized()?;
        let (n, d) = (self.n as f64, self.d);
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in self.features.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for row in self.features.chunks_exact(d) {
            for ((s, &v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0; // constant feature maps to zero
            }
        }
        for row in self.features.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        self.normalization = Some(Normalization::ZScore { mean, std });
        Ok(())
    }

    /// Min-max scales every feature to [0, 1] in place; same single-use guard
    /// as [`Dataset::normalize_zscore`].
    pub fn normalize_minmax(&mut self) -> Result<()> {
        self.guard_unnormalized()?;
        let d = self.d;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in self.features.chunks_exact(d) {
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        for row in self.features.chunks_exact_mut(d) {
            for ((v, lo), hi) in row.iter_mut().zip(&min).zip(&max) {
                let range = hi - lo;
                *v = if range == 0.0 { 0.0 } else { (*v - lo) / range };
            }
        }
        self.normalization = Some(Normalization::MinMax { min, max });
        Ok(())
    }

    fn guard_unnormalized(&self) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Contract {
                op: "normalize",
                message: "dataset is already normalized".to_string(),
            });
        }
        Ok(())
    }

    /// Feature rows `indices` as a `len x d` tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::Contract {
                    op: "gather",
                    message: format!("index {i} out of range for {} samples", self.n),
                });
            }
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), self.d, x)?, y))
    }
}

/// Seeded drop-last batching: each epoch is a fresh permutation of the whole
/// set, cut into `floor(N/B)` full batches (the remainder is dropped so every
/// iteration sees exactly `B` reference rows).
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl BatchPlan {
    /// The epoch's permutation of `0..n`; depends only on (seed, epoch).
    pub fn epoch_permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = stream_indexed(self.shuffle_seed, StreamTag::Shuffle, epoch as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// The epoch's batches under a plan. `B > N` is a config error.
pub fn batches(ds: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch>> {
    if plan.batch_size == 0 || plan.batch_size > ds.len() {
        return Err(Error::Config(format!(
            "batch size {} invalid for dataset of {}",
            plan.batch_size,
            ds.len()
        )));
    }
    let perm = plan.epoch_permutation(ds.len(), epoch);
    let full = ds.len() / plan.batch_size;
    let mut out = Vec::with_capacity(full);
    for b in 0..full {
        let idx = &perm[b * plan.batch_size..(b + 1) * plan.batch_size];
        let (x, y) = ds.gather(idx)?;
        out.push(Batch { x, y });
    }
    Ok(out)
}

/// Two interleaved half-circle classes of `n/2` points each, with Gaussian
/// displacement `noise_std`; deterministic in `seed`.
pub fn synth_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("two-moons size must be even and > 0, got {n}")));
    }
    if noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let half = n / 2;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut rng = stream(seed, StreamTag::Data);
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).expect("validated"))
    } else {
        None
    };
    let mut push = |x: f64, y: f64, label: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let (dx, dy) = match &noise {
            Some(dist) => (dist.sample(rng), dist.sample(rng)),
            None => (0.0, 0.0),
        };
        features.push(x + dx);
        features.push(y + dy);
        labels.push(label);
    };
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half.max(2) - 1) as f64;
        push(t.cos(), t.sin(), 0, &mut rng);
    }
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half.max(2) - 1) as f64;
        push(1.0 - t.cos(), 0.5 - t.sin(), 1, &mut rng);
    }
    Dataset::new(features, labels, 2, 2)
}

/// Knobs for the synthetic image benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthImagesConfig {
    pub classes: usize,
    pub side: usize,
    /// Maximum translation of the class template, in pixels, each axis.
    pub max_shift: i64,
    /// Per-pixel Gaussian noise std (image values live in [0, 1]).
    pub pixel_noise: f64,
    /// Stream for the fixed class templates (shared by train and test).
    pub template_seed: u64,
}

impl Default for SynthImagesConfig {
    fn default() -> Self {
        SynthImagesConfig {
            classes: 10,
            side: 28,
            max_shift: 4,
            pixel_noise: 0.18,
            template_seed: 900,
        }
    }
}

/// Synthetic image classification set: each class is a fixed smoothed random
/// template; each sample is that template randomly translated plus pixel
/// noise, clipped to [0, 1] and quantized to 256 levels (so IDX round trips
/// are exact). Classes appear round-robin, so any prefix is balanced.
pub fn synth_images(n: usize, seed: u64, cfg: &SynthImagesConfig) -> Result<Dataset> {
    if n == 0 || cfg.classes < 2 || cfg.side == 0 {
        return Err(Error::Config(format!(
            "synth_images needs n > 0 and >= 2 classes, got n={n}, classes={}",
            cfg.classes
        )));
    }
    if cfg.pixel_noise < 0.0 || cfg.max_shift < 0 {
        return Err(Error::Config("pixel_noise and max_shift must be >= 0".into()));
    }
    let side = cfg.side;
    let d = side * side;
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| class_template(side, cfg.template_seed, c as u64))
        .collect();

    let mut rng = stream(seed, StreamTag::Data);
    let noise = if cfg.pixel_noise > 0.0 {
        Some(Normal::new(0.0, cfg.pixel_noise).expect("validated"))
    } else {
        None
    };

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let template = &templates[class];
        let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift);
        let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift);
        for r in 0..side as i64 {
            for c in 0..side as i64 {
                let (sr, sc) = (r - dy, c - dx);
                let base = if sr >= 0 && sr < side as i64 && sc >= 0 && sc < side as i64 {
                    template[(sr as usize) * side + sc as usize]
                } else {
                    0.0
                };
                let v = match &noise {
                    Some(dist) => base + dist.sample(&mut rng),
                    None => base,
                };
                let v = v.clamp(0.0, 1.0);
                features.push((v * 255.0).round() / 255.0);
            }
        }
        labels.push(class);
    }
    Dataset::new(features, labels, d, cfg.classes)
}

/// Fixed per-class pattern: uniform noise box-blurred three times, then
/// min-max stretched to [0, 1].
fn class_template(side: usize, template_seed: u64, class: u64) -> Vec<f64> {
    let mut rng = stream_indexed(template_seed, StreamTag::Data, class);
    let mut img: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
    for _ in 0..3 {
        img = box_blur(&img, side);
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    img.iter().map(|v| (v - lo) / range).collect()
}

fn box_blur(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && rr < side as i64 && cc >= 0 && cc < side as i64 {
                        sum += img[(rr as usize) * side + cc as usize];
                        count += 1.0;
                    }
                }
            }
            out[r * side + c] = sum / count;
        }
    }
    out
}
