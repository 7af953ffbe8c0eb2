//! The training loop and its objective.
//!
//! Per iteration the scheduler draws lambda. Always: the primary loss I1 is
//! the mean cross-entropy of the raw batch rows. On lambda = 1 iterations a
//! split layer k is drawn, a fresh basis is generated, the batch is augmented
//! at layer k, and the conservative constraint I2 is added: the mean KL from
//! the (detached) reference predictions to their virtual points' predictions,
//! weighted by eta. With hard-label constraints I2 is instead the mean
//! cross-entropy of the virtual rows against their references' ground-truth
//! labels.
//!
//! Two update styles ship:
//!
//! - `combined` (default): one SGD step on `I1 + eta * I2`, where I1 comes
//!   from the raw rows of the same forward pass that processes the augmented
//!   batch.
//! - `sequential`: a step on I1 from a raw-batch pass, then (when lambda = 1)
//!   a second forward pass at the updated parameters and a step on
//!   `eta * I2`. The same minibatch, split draw, and basis serve both halves,
//!   and vicinity noise is drawn exactly once per iteration.
//!
//! Training modes are presets over one loop: baseline is omega = pi/2 (or
//! eta = 0), always-on batch augmentation is omega = 0, and the stochastic
//! variant is anything between. The loop itself never branches on the mode,
//! which is what makes the degeneracy equivalences bit-exact.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::data::{batches, Batch, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::inference::{evaluate_argmax, evaluate_both};
use crate::network::{draw_split, LayerStack, SplitChoice, TracedNet};
use crate::rng::{stream, StreamTag};
use crate::scheduler::{new_scheduler, SchedulerState};
use crate::tensor::{ops, Tape, Tensor};
use crate::vicinity::{augment_batch, make_basis, AugmentedBatch, BasisMatrix, VicinityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Ba,
    Sba,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Distilled soft labels: KL(reference || virtual) with a detached
    /// reference (Teacher follows the config).
    SoftKl,
    /// Hard labels: cross-entropy of virtual rows against the ground-truth
    /// label of their reference sample.
    HardCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStyle {
    Combined,
    Sequential,
}

/// Named seeds for every random stream a run owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub scheduler: u64,
    pub noise: u64,
    pub mask: u64,
    pub split: u64,
}

impl Seeds {
    /// One base value for all streams; the stream tags keep them isolated.
    pub fn from_base(base: u64) -> Seeds {
        Seeds {
            init: base,
            shuffle: base,
            scheduler: base,
            noise: base,
            mask: base,
            split: base,
        }
    }

    /// Shifts every named seed; used by sweep runners to derive per-seed
    /// configs.
    pub fn offset(&self, by: u64) -> Seeds {
        Seeds {
            init: self.init.wrapping_add(by),
            shuffle: self.shuffle.wrapping_add(by),
            scheduler: self.scheduler.wrapping_add(by),
            noise: self.noise.wrapping_add(by),
            mask: self.mask.wrapping_add(by),
            split: self.split.wrapping_add(by),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub loss_mode: LossMode,
    pub update_style: UpdateStyle,
    /// Balance weight on the conservative constraint.
    pub eta: f64,
    /// Scheduler skew; P(augment) = cos(omega).
    pub omega: f64,
    pub vicinity: VicinityConfig,
    pub widths: Vec<usize>,
    /// Eligible split layers; empty means every hidden layer.
    pub split_set: Vec<usize>,
    /// Pin the split layer instead of redrawing each augmented iteration
    /// (ablation).
    pub fixed_split: Option<usize>,
    /// Differentiate through the KL reference branch too (ablation of the
    /// soft-label stop-gradient).
    pub kl_full_grad: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Sba,
            loss_mode: LossMode::SoftKl,
            update_style: UpdateStyle::Combined,
            eta: 0.1,
            omega: std::f64::consts::FRAC_PI_3,
            vicinity: VicinityConfig::default(),
            widths: vec![784, 256, 128, 10],
            split_set: Vec::new(),
            fixed_split: None,
            kl_full_grad: false,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 30,
            batch_size: 50,
            seeds: Seeds::from_base(1),
        }
    }
}

impl RunConfig {
    /// The probability that an iteration augments.
    pub fn augment_probability(&self) -> f64 {
        crate::scheduler::augment_probability(self.omega)
    }

    fn augmentation_possible(&self) -> bool {
        self.augment_probability() > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..=FRAC_PI_2).contains(&self.omega) {
            return Err(Error::Config(format!(
                "omega must lie in [0, pi/2], got {}",
                self.omega
            )));
        }
        match self.mode {
            Mode::Ba if self.omega != 0.0 => {
                return Err(Error::Config(
                    "mode=ba requires omega = 0 (augment every iteration)".into(),
                ))
            }
            Mode::Baseline if self.eta != 0.0 && self.omega != FRAC_PI_2 => {
                return Err(Error::Config(
                    "mode=baseline requires eta = 0 or omega = pi/2".into(),
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::Config(format!("need >= 2 widths, got {:?}", self.widths)));
        }
        if self.augmentation_possible() {
            self.vicinity.validate()?;
            let eligible = self.effective_split_set();
            if eligible.is_empty() {
                return Err(Error::Config(
                    "augmentation enabled but the net has no eligible split layers".into(),
                ));
            }
            if let Some(k) = self.fixed_split {
                if !eligible.contains(&k) {
                    return Err(Error::Config(format!(
                        "fixed_split {k} not in eligible set {eligible:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The split set a net built from this config will carry.
    pub fn effective_split_set(&self) -> Vec<usize> {
        if self.split_set.is_empty() {
            (1..self.widths.len().saturating_sub(1)).collect()
        } else {
            self.split_set.clone()
        }
    }

    pub fn build_network(&self) -> Result<LayerStack> {
        LayerStack::init(&self.widths, self.seeds.init)?.with_split_set(&self.effective_split_set())
    }
}

/// Per-epoch results record.
///
/// `wall_clock_seconds` covers the training portion of the epoch only
/// (batching, forward/backward, updates); evaluation is measurement overhead
/// shared by every mode and is excluded so cost comparisons reflect training
/// cost.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean I1 over the epoch's iterations.
    pub train_loss_primary: f64,
    /// Mean I2 over augmented iterations; absent when none augmented.
    pub train_loss_constraint: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy_argmax: f64,
    pub test_accuracy_vote: f64,
    /// Fraction of iterations with lambda = 1.
    pub augmented_fraction: f64,
    pub wall_clock_seconds: f64,
}

/// Counters over a whole run, for cadence checks and cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub iterations: u64,
    pub augmented_iterations: u64,
    /// Basis matrices generated; equals `augmented_iterations` by
    /// construction (one fresh basis per lambda = 1 iteration).
    pub bases_generated: u64,
    /// Stamp of the most recent basis (the iteration that generated it).
    pub last_basis_stamp: Option<u64>,
}

/// SGD with classical momentum over the flat parameter vector:
/// `v = momentum * v + g; theta -= lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, param_count: usize) -> SgdMomentum {
        SgdMomentum {
            lr,
            momentum,
            velocity: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, net: &mut LayerStack, grads: &[f64]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: vec![self.velocity.len()],
                right: vec![grads.len()],
            });
        }
        let mut delta = Vec::with_capacity(grads.len());
        for (v, &g) in self.velocity.iter_mut().zip(grads) {
            *v = self.momentum * *v + g;
            delta.push(-self.lr * *v);
        }
        net.apply_delta(&delta)
    }
}

/// Flat gradient vector of a traced net in `param_vector` order; parameters
/// untouched by the backward pass contribute zeros.
pub fn collect_grads(traced: &TracedNet) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &traced.layers {
        match layer.w.grad() {
            Some(g) => out.extend_from_slice(&g),
            None => out.extend(std::iter::repeat(0.0).take(layer.w.numel())),
        }
        match layer.b.grad() {
            Some(g) => out.extend_from_slice(&g),
            None => out.extend(std::iter::repeat(0.0).take(layer.b.numel())),
        }
    }
    out
}

/// Where the KL teacher distribution comes from.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    /// The raw rows' own predictions, detached (the soft-label default).
    SelfDetached,
    /// The raw rows' predictions with gradient flowing through them
    /// (stop-gradient ablation).
    SelfTraced,
    /// Externally supplied log-probabilities, aligned with the virtual rows.
    /// This is also the seam the finite-difference oracle uses: it freezes
    /// the teacher at the expansion point.
    Fixed(&'a Tensor),
}

/// Losses of one iteration.
#[derive(Debug, Clone)]
pub struct IterationLosses {
    /// Mean cross-entropy over the raw rows.
    pub primary: Tensor,
    /// Mean constraint over the virtual rows; present only when augmented.
    pub constraint: Option<Tensor>,
}

/// Builds `(I1, I2)` from an already-augmented batch. The raw rows' logits
/// come from the same forward pass that processes the virtual rows.
pub fn losses_with_batch(
    tape: &Tape,
    traced: &TracedNet,
    aug: &AugmentedBatch,
    y: &[usize],
    k: SplitChoice,
    loss_mode: LossMode,
    teacher: Teacher<'_>,
) -> Result<(Tensor, Tensor)> {
    let b = aug.batch;
    let total_rows = aug.rows.rows();
    let logits = traced.forward_from(tape, &aug.rows, k)?;
    let log_probs = ops::log_softmax(tape, &logits)?;
    let lp_raw = ops::slice_rows(tape, &log_probs, 0, b)?;
    let primary = ops::cross_entropy_mean(tape, &lp_raw, y)?;

    let lp_virt = ops::slice_rows(tape, &log_probs, b, total_rows)?;
    let refs = aug.virtual_refs();
    let constraint = match loss_mode {
        LossMode::SoftKl => match teacher {
            Teacher::SelfDetached => {
                let ref_lp = ops::gather_rows(tape, &lp_raw.detach(), &refs)?;
                ops::kl_divergence_mean(tape, &ref_lp, &lp_virt)?
            }
            Teacher::SelfTraced => {
                let ref_lp = ops::gather_rows(tape, &lp_raw, &refs)?;
                ops::kl_divergence_mean_full(tape, &ref_lp, &lp_virt)?
            }
            Teacher::Fixed(ref_lp) => ops::kl_divergence_mean(tape, ref_lp, &lp_virt)?,
        },
        LossMode::HardCe => {
            let virt_labels: Vec<usize> = refs.iter().map(|&i| y[i]).collect();
            ops::cross_entropy_mean(tape, &lp_virt, &virt_labels)?
        }
    };
    Ok((primary, constraint))
}

/// The iteration objective: plain mean cross-entropy when `lambda = 0`;
/// with `lambda = 1`, the same plus the constraint over `M * B` virtual
/// points generated at split `k`.
#[allow(clippy::too_many_arguments)]
pub fn iteration_loss(
    tape: &Tape,
    traced: &TracedNet,
    x: &Tensor,
    y: &[usize],
    lambda: u8,
    k: Option<SplitChoice>,
    basis: Option<&BasisMatrix>,
    cfg: &RunConfig,
    noise_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<IterationLosses> {
    if lambda == 0 {
        let logits = traced.forward_full(tape, x)?;
        let lp = ops::log_softmax(tape, &logits)?;
        let primary = ops::cross_entropy_mean(tape, &lp, y)?;
        return Ok(IterationLosses {
            primary,
            constraint: None,
        });
    }
    let (Some(k), Some(basis)) = (k, basis) else {
        return Err(Error::Contract {
            op: "iteration_loss",
            message: "augmented iteration needs a split choice and a basis".into(),
        });
    };
    let h = traced.forward_to(tape, x, k)?;
    let aug = augment_batch(tape, &h, &cfg.vicinity, basis, noise_rng, mask_rng)?;
    let teacher = if cfg.kl_full_grad {
        Teacher::SelfTraced
    } else {
        Teacher::SelfDetached
    };
    let (primary, constraint) =
        losses_with_batch(tape, traced, &aug, y, k, cfg.loss_mode, teacher)?;
    Ok(IterationLosses {
        primary,
        constraint: Some(constraint),
    })
}

/// Mutable per-run state: scheduler, optimizer, streams, counters.
pub struct TrainContext {
    pub scheduler: SchedulerState,
    pub optimizer: SgdMomentum,
    pub stats: RunStats,
    noise_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    split_rng: ChaCha8Rng,
    /// Global iteration index t.
    t: u64,
    epoch: usize,
}

impl TrainContext {
    pub fn new(cfg: &RunConfig, param_count: usize) -> Result<TrainContext> {
        Ok(TrainContext {
            scheduler: new_scheduler(cfg.omega, cfg.seeds.scheduler)?,
            optimizer: SgdMomentum::new(cfg.learning_rate, cfg.momentum, param_count),
            stats: RunStats::default(),
            noise_rng: stream(cfg.seeds.noise, StreamTag::Noise),
            mask_rng: stream(cfg.seeds.mask, StreamTag::Mask),
            split_rng: stream(cfg.seeds.split, StreamTag::Split),
            t: 0,
            epoch: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }
}

/// What one step observed, for metrics accumulation.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub lambda: u8,
    pub primary: f64,
    pub constraint: Option<f64>,
}

fn ensure_finite(value: f64, ctx: &TrainContext, cfg: &RunConfig) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            iteration: ctx.t,
            epoch: ctx.epoch,
            eta: cfg.eta,
            sigma: cfg.vicinity.sigma,
            tau: cfg.vicinity.tau,
        })
    }
}

/// One training iteration: samples the scheduler exactly once, then updates
/// parameters per the configured style.
pub fn train_step(
    net: &mut LayerStack,
    batch: &Batch,
    ctx: &mut TrainContext,
    cfg: &RunConfig,
) -> Result<StepOutcome> {
    let lambda = ctx.scheduler.sample();
    ctx.stats.iterations += 1;

    let split_and_basis = if lambda == 1 {
        let k = match cfg.fixed_split {
            Some(k) => SplitChoice { k },
            None => draw_split(net.split_set(), &mut ctx.split_rng)?,
        };
        let basis = make_basis(
            net.width_at(k.k),
            cfg.vicinity.basis_mode,
            ctx.t,
            k.k,
            &mut ctx.noise_rng,
        );
        ctx.stats.augmented_iterations += 1;
        ctx.stats.bases_generated += 1;
        ctx.stats.last_basis_stamp = Some(basis.generation_stamp);
        Some((k, basis))
    } else {
        None
    };

    let outcome = match cfg.update_style {
        UpdateStyle::Combined => {
            let tape = Tape::new();
            let traced = net.traced();
            let losses = iteration_loss(
                &tape,
                &traced,
                &batch.x,
                &batch.y,
                lambda,
                split_and_basis.as_ref().map(|(k, _)| *k),
                split_and_basis.as_ref().map(|(_, b)| b),
                cfg,
                &mut ctx.noise_rng,
                &mut ctx.mask_rng,
            )?;
            let primary = ensure_finite(losses.primary.value(), ctx, cfg)?;
            let constraint = match &losses.constraint {
                Some(c) => Some(ensure_finite(c.value(), ctx, cfg)?),
                None => None,
            };
            let total = match &losses.constraint {
                Some(c) => {
                    let weighted = ops::scale(&tape, c, cfg.eta);
                    ops::add(&tape, &losses.primary, &weighted)?
                }
                None => losses.primary.clone(),
            };
            tape.backward(&total)?;
            let grads = collect_grads(&traced);
            ctx.optimizer.step(net, &grads)?;
            StepOutcome {
                lambda,
                primary,
                constraint,
            }
        }
        UpdateStyle::Sequential => {
            // Primary update from a raw-batch pass.
            let tape = Tape::new();
            let traced = net.traced();
            let losses = iteration_loss(
                &tape, &traced, &batch.x, &batch.y, 0, None, None, cfg,
                &mut ctx.noise_rng, &mut ctx.mask_rng,
            )?;
            let primary = ensure_finite(losses.primary.value(), ctx, cfg)?;
            tape.backward(&losses.primary)?;
            let grads = collect_grads(&traced);
            ctx.optimizer.step(net, &grads)?;

            // Constraint update at the post-step parameters, same batch,
            // same split and basis, fresh vicinity draws (once per
            // iteration).
            let mut constraint = None;
            if let Some((k, basis)) = &split_and_basis {
                let tape = Tape::new();
                let traced = net.traced();
                let losses = iteration_loss(
                    &tape,
                    &traced,
                    &batch.x,
                    &batch.y,
                    1,
                    Some(*k),
                    Some(basis),
                    cfg,
                    &mut ctx.noise_rng,
                    &mut ctx.mask_rng,
                )?;
                let c = losses.constraint.expect("augmented iteration has a constraint");
                constraint = Some(ensure_finite(c.value(), ctx, cfg)?);
                let weighted = ops::scale(&tape, &c, cfg.eta);
                tape.backward(&weighted)?;
                let grads = collect_grads(&traced);
                ctx.optimizer.step(net, &grads)?;
            }
            StepOutcome {
                lambda,
                primary,
                constraint,
            }
        }
    };

    ctx.t += 1;
    Ok(outcome)
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub net: LayerStack,
    pub metrics: Vec<EpochMetrics>,
    pub stats: RunStats,
}

/// Trains a fresh net on `train`, evaluating on `train` and `test` after
/// every epoch. Deterministic in the config's seeds except for the wall
/// clock.
pub fn run_training(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<TrainedRun> {
    cfg.validate()?;
    for (name, ds) in [("train", train), ("test", test)] {
        if ds.dim() != cfg.widths[0] {
            return Err(Error::Config(format!(
                "{name} dataset dim {} does not match input width {}",
                ds.dim(),
                cfg.widths[0]
            )));
        }
        if ds.class_count() != *cfg.widths.last().expect("widths nonempty") {
            return Err(Error::Config(format!(
                "{name} dataset has {} classes but the net outputs {}",
                ds.class_count(),
                cfg.widths.last().expect("widths nonempty")
            )));
        }
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train.len()
        )));
    }

    let mut net = cfg.build_network()?;
    let mut ctx = TrainContext::new(cfg, net.param_count())?;
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        shuffle_seed: cfg.seeds.shuffle,
    };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        ctx.epoch = epoch;
        let started = Instant::now();
        let mut primary_sum = 0.0;
        let mut constraint_sum = 0.0;
        let mut constraint_count = 0usize;
        let mut augmented = 0usize;
        let epoch_batches = batches(train, &plan, epoch)?;
        let iterations = epoch_batches.len();
        for batch in &epoch_batches {
            let out = train_step(&mut net, batch, &mut ctx, cfg)?;
            primary_sum += out.primary;
            if let Some(c) = out.constraint {
                constraint_sum += c;
                constraint_count += 1;
            }
            augmented += out.lambda as usize;
        }
        let wall_clock_seconds = started.elapsed().as_secs_f64();

        let train_accuracy = evaluate_argmax(&net, train)?;
        let (test_accuracy_argmax, test_accuracy_vote) = evaluate_both(
            &net,
            test,
            &cfg.vicinity,
            cfg.seeds.noise,
            cfg.seeds.mask,
            cfg.seeds.split,
            epoch as u64,
        )?;

        metrics.push(EpochMetrics {
            epoch,
            train_loss_primary: primary_sum / iterations as f64,
            train_loss_constraint: if constraint_count > 0 {
                Some(constraint_sum / constraint_count as f64)
            } else {
                None
            },
            train_accuracy,
            test_accuracy_argmax,
            test_accuracy_vote,
            augmented_fraction: augmented as f64 / iterations as f64,
            wall_clock_seconds,
        });
    }

    Ok(TrainedRun {
        net,
        metrics,
        stats: ctx.stats,
    })
}

/// Baseline preset: never augments; eta is irrelevant and forced to zero.
pub fn baseline_config(base: RunConfig) -> RunConfig {
    RunConfig {
        mode: Mode::Baseline,
        omega: FRAC_PI_2,
        eta: 0.0,
        ..base
    }
}

/// Always-on batch augmentation preset: omega = 0.
pub fn ba_config(base: RunConfig) -> RunConfig {
    RunConfig {
        mode: Mode::Ba,
        omega: 0.0,
        ..base
    }
}
