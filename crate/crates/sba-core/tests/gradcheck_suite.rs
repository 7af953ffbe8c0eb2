//! Finite-difference verification of the tape across randomized op
//! compositions and the full training objective.
//!
//! The vicinity sample and the KL teacher are data, not differentiable
//! functions of the parameters, so the oracle freezes both at the expansion
//! point: virtual rows are generated once from the unperturbed activations,
//! and the teacher log-probs are captured once and injected via
//! `Teacher::Fixed`. The analytic side uses the production builders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sba_core::network::{traced_from_flat, SplitChoice};
use sba_core::rng::{stream, StreamTag};
use sba_core::tensor::gradcheck::finite_difference_check;
use sba_core::tensor::{ops, Tape, Tensor};
use sba_core::trainer::{losses_with_batch, LossMode, Teacher};
use sba_core::vicinity::{augment_batch, make_basis, AugmentedBatch, BasisMode, VicinityConfig};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Loss touching every differentiable op: two affine+relu layers from the
/// flat parameters, log-softmax rows split/gathered/concatenated back
/// together, a cross-entropy term, a KL term against a constant teacher, and
/// scalar glue (mul/sum/scale/add).
fn omnibus_loss(
    tape: &Tape,
    theta: &Tensor,
    x: &Tensor,
    labels: &[usize],
    teacher: &Tensor,
) -> sba_core::Result<Tensor> {
    let widths = [3usize, 4, 3];
    let net = traced_from_flat(tape, theta, &widths, &[1])?;
    let lp = ops::log_softmax(tape, &net.forward_full(tape, x)?)?;

    let rows = lp.rows();
    let head = ops::slice_rows(tape, &lp, 0, rows - 1)?;
    let tail = ops::slice_rows(tape, &lp, rows - 1, rows)?;
    let rebuilt = ops::concat_rows(tape, &[&head, &tail])?;
    let shuffled = ops::gather_rows(tape, &rebuilt, &[1, 0, 1])?;

    let ce = ops::cross_entropy_mean(tape, &rebuilt, labels)?;
    let kl = ops::kl_divergence_mean(tape, teacher, &shuffled)?;
    let squared = ops::mul(tape, &ce, &ce)?;
    let mixed = ops::add(tape, &squared, &ops::scale(tape, &kl, 0.7))?;
    Ok(ops::sum(tape, &ops::reshape(tape, &mixed, vec![1, 1])?))
}

/// Relu kinks within a finite-difference step of zero make the comparison
/// meaningless; retry with fresh data until every hidden pre-activation is
/// safely away from the kink.
fn safe_instance(seed: u64) -> (Vec<f64>, Tensor, Vec<usize>, Tensor) {
    let mut rng = stream(seed, StreamTag::Data);
    for attempt in 0..200u64 {
        let _ = attempt;
        let theta = uniform(&mut rng, 3 * 4 + 4 + 4 * 3 + 3, -0.9, 0.9);
        let x_data = uniform(&mut rng, 3 * 3, -1.5, 1.5);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let teacher_logits = uniform(&mut rng, 9, -1.0, 1.0);

        // Pre-activations of the hidden layer at theta.
        let mut safe = true;
        for row in 0..3 {
            for j in 0..4 {
                let mut z = theta[12 + j]; // bias
                for r in 0..3 {
                    z += x_data[row * 3 + r] * theta[r * 4 + j];
                }
                if z.abs() < 1e-4 {
                    safe = false;
                }
            }
        }
        if !safe {
            continue;
        }

        let x = Tensor::matrix(3, 3, x_data).unwrap();
        let tape = Tape::new();
        let teacher = ops::log_softmax(&tape, &Tensor::matrix(3, 3, teacher_logits).unwrap())
            .unwrap()
            .detach();
        return (theta, x, labels, teacher);
    }
    panic!("could not find a kink-safe instance for seed {seed}");
}

#[test]
fn all_ops_match_finite_differences_on_100_instances() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (theta, x, labels, teacher) = safe_instance(seed);
        let err = finite_difference_check(
            |tape, t| omnibus_loss(tape, t, &x, &labels, &teacher),
            &theta,
            STEP,
        )
        .unwrap();
        worst = worst.max(err);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
    println!("omnibus op gradcheck worst relative error: {worst:.3e}");
}

struct ObjectiveInstance {
    widths: Vec<usize>,
    split: SplitChoice,
    theta: Vec<f64>,
    x: Tensor,
    labels: Vec<usize>,
    virt_rows: Tensor,
    ref_index: Vec<Option<usize>>,
    teacher: Tensor,
    fold: usize,
    batch: usize,
    eta: f64,
}

/// Builds a frozen augmented-iteration instance: the virtual rows and the
/// teacher distribution are captured at theta and become constants of the
/// objective, mirroring their data role in training.
fn objective_instance(seed: u64, widths: &[usize], split_k: usize) -> ObjectiveInstance {
    let mut rng = stream(seed, StreamTag::Data);
    let param_count: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    'outer: for _ in 0..200 {
        let theta = uniform(&mut rng, param_count, -0.9, 0.9);
        let batch = 2usize;
        let x_data = uniform(&mut rng, batch * widths[0], -1.5, 1.5);
        let labels: Vec<usize> =
            (0..batch).map(|_| rng.random_range(0..*widths.last().unwrap())).collect();

        let split = SplitChoice { k: split_k };
        let vicinity = VicinityConfig {
            p_gauss: 1,
            q_drop: 1,
            sigma: 0.2,
            tau: 0.4,
            keep_prob: 0.8,
            basis_mode: BasisMode::Orthonormal,
        };

        // Forward at theta to the split, generate the vicinity sample once.
        let tape = Tape::new();
        let t = Tensor::from_vec(vec![param_count], theta.clone()).unwrap();
        let net = traced_from_flat(&tape, &t, widths, &[split_k]).unwrap();
        let x = Tensor::matrix(batch, widths[0], x_data).unwrap();
        let h = net.forward_to(&tape, &x, split).unwrap();
        let mut noise = stream(seed ^ 0x5eed, StreamTag::Noise);
        let mut mask = stream(seed ^ 0x5eed, StreamTag::Mask);
        let basis = make_basis(widths[split_k], vicinity.basis_mode, 0, split_k, &mut noise);
        let aug = augment_batch(&tape, &h, &vicinity, &basis, &mut noise, &mut mask).unwrap();

        // Kink safety at theta for raw and virtual rows through every relu.
        let logits = net.forward_from(&tape, &aug.rows, split).unwrap();
        let probe = net.forward_full(&tape, &x).unwrap();
        let _ = (logits, probe);
        if !kink_safe(&theta, widths, &x, 1e-4) || !kink_safe_from(&theta, widths, split_k, &aug, 1e-4)
        {
            continue 'outer;
        }

        let teacher = {
            let lp = ops::log_softmax(&tape, &net.forward_full(&tape, &x).unwrap()).unwrap();
            let refs = aug.virtual_refs();
            ops::gather_rows(&tape, &lp.detach(), &refs).unwrap()
        };
        let fold = aug.fold;
        let virt_rows = Tensor::matrix(
            fold * batch,
            widths[split_k],
            aug.rows.data()[batch * widths[split_k]..].to_vec(),
        )
        .unwrap();

        return ObjectiveInstance {
            widths: widths.to_vec(),
            split,
            theta,
            x,
            labels,
            virt_rows,
            ref_index: aug.ref_index.clone(),
            teacher,
            fold,
            batch,
            eta: 0.3,
        };
    }
    panic!("could not build a kink-safe objective instance for seed {seed}");
}

/// True when all hidden pre-activations of the full forward at `theta` are
/// at least `margin` from zero.
fn kink_safe(theta: &[f64], widths: &[usize], x: &Tensor, margin: f64) -> bool {
    let mut rows: Vec<Vec<f64>> = x
        .data()
        .chunks_exact(widths[0])
        .map(|r| r.to_vec())
        .collect();
    let mut at = 0usize;
    for (l, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = &theta[at..at + fan_in * fan_out];
        at += fan_in * fan_out;
        let b = &theta[at..at + fan_out];
        at += fan_out;
        let last = l + 1 == widths.len() - 1;
        for row in rows.iter_mut() {
            let mut z = b.to_vec();
            for (r, &xv) in row.iter().enumerate() {
                for (j, zv) in z.iter_mut().enumerate() {
                    *zv += xv * w[r * fan_out + j];
                }
            }
            if !last {
                for zv in &z {
                    if zv.abs() < margin {
                        return false;
                    }
                }
                for zv in z.iter_mut() {
                    if *zv < 0.0 {
                        *zv = 0.0;
                    }
                }
            }
            *row = z;
        }
    }
    true
}

/// Kink safety for the virtual rows' tail pass (layers k..).
fn kink_safe_from(
    theta: &[f64],
    widths: &[usize],
    k: usize,
    aug: &AugmentedBatch,
    margin: f64,
) -> bool {
    let width = widths[k];
    let mut rows: Vec<Vec<f64>> = aug
        .rows
        .data()
        .chunks_exact(width)
        .map(|r| r.to_vec())
        .collect();
    // Skip parameter bytes of layers before k.
    let mut at = 0usize;
    for pair in widths[..k + 1].windows(2) {
        at += pair[0] * pair[1] + pair[1];
    }
    for (l, pair) in widths[k..].windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = &theta[at..at + fan_in * fan_out];
        at += fan_in * fan_out;
        let b = &theta[at..at + fan_out];
        at += fan_out;
        let last = k + l + 1 == widths.len() - 1;
        for row in rows.iter_mut() {
            let mut z = b.to_vec();
            for (r, &xv) in row.iter().enumerate() {
                for (j, zv) in z.iter_mut().enumerate() {
                    *zv += xv * w[r * fan_out + j];
                }
            }
            if !last {
                for zv in &z {
                    if zv.abs() < margin {
                        return false;
                    }
                }
                for zv in z.iter_mut() {
                    if *zv < 0.0 {
                        *zv = 0.0;
                    }
                }
            }
            *row = z;
        }
    }
    true
}

fn combined_objective(
    tape: &Tape,
    t: &Tensor,
    inst: &ObjectiveInstance,
    loss_mode: LossMode,
    include_primary: bool,
    include_constraint: bool,
) -> sba_core::Result<Tensor> {
    let net = traced_from_flat(tape, t, &inst.widths, &[inst.split.k])?;
    let h = net.forward_to(tape, &inst.x, inst.split)?;
    let rows = ops::concat_rows(tape, &[&h, &inst.virt_rows])?;
    let aug = AugmentedBatch {
        rows,
        ref_index: inst.ref_index.clone(),
        batch: inst.batch,
        fold: inst.fold,
    };
    let (i1, i2) = losses_with_batch(
        tape,
        &net,
        &aug,
        &inst.labels,
        inst.split,
        loss_mode,
        Teacher::Fixed(&inst.teacher),
    )?;
    let weighted = ops::scale(tape, &i2, inst.eta);
    match (include_primary, include_constraint) {
        (true, true) => ops::add(tape, &i1, &weighted),
        (true, false) => Ok(i1),
        (false, true) => Ok(weighted),
        (false, false) => unreachable!("empty objective"),
    }
}

#[test]
fn combined_objective_matches_finite_differences_both_loss_modes() {
    for (i, seed) in (300..330).enumerate() {
        let widths = if i % 2 == 0 { vec![3, 5, 4, 3] } else { vec![2, 6, 3] };
        let split_k = if i % 2 == 0 { 1 + (i / 2) % 2 } else { 1 };
        let inst = objective_instance(seed, &widths, split_k);
        for loss_mode in [LossMode::SoftKl, LossMode::HardCe] {
            let err = finite_difference_check(
                |tape, t| combined_objective(tape, t, &inst, loss_mode, true, true),
                &inst.theta,
                STEP,
            )
            .unwrap();
            assert!(err < TOLERANCE, "seed {seed} {loss_mode:?}: error {err}");
        }
    }
}

#[test]
fn sequential_style_loss_expressions_match_finite_differences() {
    // The sequential style's two updates differentiate I1 and eta*I2 as
    // separate objectives; check each against the oracle.
    let inst = objective_instance(777, &[3, 5, 4, 3], 1);
    let err_primary = finite_difference_check(
        |tape, t| combined_objective(tape, t, &inst, LossMode::SoftKl, true, false),
        &inst.theta,
        STEP,
    )
    .unwrap();
    assert!(err_primary < TOLERANCE, "primary: {err_primary}");

    let err_constraint = finite_difference_check(
        |tape, t| combined_objective(tape, t, &inst, LossMode::SoftKl, false, true),
        &inst.theta,
        STEP,
    )
    .unwrap();
    assert!(err_constraint < TOLERANCE, "constraint: {err_constraint}");
}

#[test]
fn detached_teacher_gradient_equals_fixed_teacher_gradient() {
    // At the expansion point the production path (SelfDetached) and the
    // frozen-teacher path compute identical gradients: the teacher is a
    // constant either way.
    let inst = objective_instance(901, &[3, 5, 4, 3], 1);

    let grad_with = |teacher_fixed: bool| {
        let tape = Tape::new();
        let t = Tensor::param(vec![inst.theta.len()], inst.theta.clone()).unwrap();
        let net = traced_from_flat(&tape, &t, &inst.widths, &[inst.split.k]).unwrap();
        let h = net.forward_to(&tape, &inst.x, inst.split).unwrap();
        let rows = ops::concat_rows(&tape, &[&h, &inst.virt_rows]).unwrap();
        let aug = AugmentedBatch {
            rows,
            ref_index: inst.ref_index.clone(),
            batch: inst.batch,
            fold: inst.fold,
        };
        let teacher = if teacher_fixed {
            Teacher::Fixed(&inst.teacher)
        } else {
            Teacher::SelfDetached
        };
        let (i1, i2) = losses_with_batch(
            &tape, &net, &aug, &inst.labels, inst.split, LossMode::SoftKl, teacher,
        )
        .unwrap();
        let total = ops::add(&tape, &i1, &ops::scale(&tape, &i2, inst.eta)).unwrap();
        tape.backward(&total).unwrap();
        t.grad().unwrap()
    };

    let fixed = grad_with(true);
    let detached = grad_with(false);
    assert_eq!(
        fixed.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        detached.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn kl_constraint_has_zero_gradient_on_reference_branch() {
    // Feed the teacher as a trainable tensor through the stop-gradient KL:
    // its gradient never materializes while the virtual branch's does.
    let tape = Tape::new();
    let ref_lp = Tensor::param(
        vec![2, 2],
        vec![0.6f64.ln(), 0.4f64.ln(), 0.3f64.ln(), 0.7f64.ln()],
    )
    .unwrap();
    let virt_lp = Tensor::param(
        vec![2, 2],
        vec![0.5f64.ln(), 0.5f64.ln(), 0.2f64.ln(), 0.8f64.ln()],
    )
    .unwrap();
    let kl = ops::kl_divergence_mean(&tape, &ref_lp, &virt_lp).unwrap();
    tape.backward(&kl).unwrap();
    assert!(ref_lp.grad().is_none());
    assert!(virt_lp.grad().unwrap().iter().any(|&g| g != 0.0));

    // And the KL-alone objective still passes the oracle (gradient flows
    // only through the virtual branch).
    let inst = objective_instance(555, &[2, 6, 3], 1);
    let err = finite_difference_check(
        |tape, t| combined_objective(tape, t, &inst, LossMode::SoftKl, false, true),
        &inst.theta,
        STEP,
    )
    .unwrap();
    assert!(err < TOLERANCE, "kl-only error {err}");
}
