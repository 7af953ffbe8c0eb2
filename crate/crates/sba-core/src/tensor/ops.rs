//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value, and records a
//! backward closure on the tape when any input participates in gradient
//! flow. Log-domain ops subtract the row max before exponentiation so all
//! outputs stay finite on finite inputs.

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{GradStore, Tape, Tensor};
use crate::error::{Error, Result};

/// `x @ w + b` over rows: `x: B x n`, `w: n x m`, `b: m`.
pub fn affine(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "affine",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape().len() != 1 || b.cols() != w.cols() {
        return Err(Error::Shape {
            op: "affine",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (rows, inner, out_cols) = (x.rows(), x.cols(), w.cols());
    let mut data = Vec::with_capacity(rows * out_cols);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    matmul_acc(x.data(), w.data(), rows, inner, out_cols, &mut data);

    let x_id = tape.input_id(x);
    let w_id = tape.input_id(w);
    let b_id = tape.input_id(b);
    let out = Tensor::output(
        vec![rows, out_cols],
        data,
        x_id.is_some() || w_id.is_some() || b_id.is_some(),
    );
    if !out.requires_grad() {
        return Ok(out);
    }

    let x_saved = x.clone();
    let w_saved = w.clone();
    Ok(tape.record(
        out,
        Box::new(move |g: &[f64], store: &mut GradStore| {
            if let Some(id) = x_id {
                let slot = store.slot(id, rows * inner);
                matmul_nt_acc(g, w_saved.data(), rows, out_cols, inner, slot);
            }
            if let Some(id) = w_id {
                let slot = store.slot(id, inner * out_cols);
                matmul_tn_acc(x_saved.data(), g, rows, inner, out_cols, slot);
            }
            if let Some(id) = b_id {
                let slot = store.slot(id, out_cols);
                for row in g.chunks_exact(out_cols) {
                    for (s, &gv) in slot.iter_mut().zip(row) {
                        *s += gv;
                    }
                }
            }
        }),
    ))
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let x_id = tape.input_id(x);
    let out = Tensor::output(x.shape().to_vec(), data, x_id.is_some());
    let Some(x_id) = x_id else { return out };

    let x_saved = x.clone();
    let n = x_saved.numel();
    tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, n);
            for ((s, &gv), &xv) in slot.iter_mut().zip(g).zip(x_saved.data()) {
                if xv > 0.0 {
                    *s += gv;
                }
            }
        }),
    )
}

/// Row-wise log softmax with max subtraction: `out[i,j] = x[i,j] - lse(x[i,:])`.
pub fn log_softmax(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() < 2 {
        return Err(Error::Domain {
            op: "log_softmax",
            message: format!("need a B x k matrix with k >= 2, got {:?}", x.shape()),
        });
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for row in x.data().chunks_exact(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        data.extend(row.iter().map(|&v| v - lse));
    }

    let x_id = tape.input_id(x);
    let out = Tensor::output(vec![rows, cols], data, x_id.is_some());
    let Some(x_id) = x_id else { return Ok(out) };

    let out_saved = out.clone();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, rows * cols);
            for i in 0..rows {
                let r = i * cols..(i + 1) * cols;
                let g_row = &g[r.clone()];
                let lp_row = &out_saved.data()[r.clone()];
                let g_sum: f64 = g_row.iter().sum();
                for ((s, &gv), &lp) in slot[r].iter_mut().zip(g_row).zip(lp_row) {
                    *s += gv - lp.exp() * g_sum;
                }
            }
        }),
    ))
}

/// Mean negative log-likelihood: `-(1/B) sum_i log_probs[i, labels[i]]`.
pub fn cross_entropy_mean(tape: &Tape, log_probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if log_probs.shape().len() != 2 || log_probs.rows() != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy_mean",
            left: log_probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (rows, cols) = (log_probs.rows(), log_probs.cols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::Domain {
                op: "cross_entropy_mean",
                message: format!("label {y} at row {i} out of range for {cols} classes"),
            });
        }
    }
    let value = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_probs.data()[i * cols + y])
        .sum::<f64>()
        / rows as f64;

    let lp_id = tape.input_id(log_probs);
    let out = Tensor::output(vec![1], vec![value], lp_id.is_some());
    let Some(lp_id) = lp_id else { return Ok(out) };

    let labels = labels.to_vec();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(lp_id, rows * cols);
            let scale = g[0] / rows as f64;
            for (i, &y) in labels.iter().enumerate() {
                slot[i * cols + y] -= scale;
            }
        }),
    ))
}

/// Mean KL divergence over aligned rows of log-distributions, natural log:
/// `(1/R) sum_r sum_c p_ref (lp_ref - lp_virt)`.
///
/// The reference rows act as a soft-label teacher: they are read as constants
/// and receive no gradient, whatever their grad status. Gradient flows only
/// through `virt_log_probs`. See [`kl_divergence_mean_full`] for the variant
/// that differentiates both sides.
pub fn kl_divergence_mean(tape: &Tape, ref_log_probs: &Tensor, virt_log_probs: &Tensor) -> Result<Tensor> {
    kl_impl(tape, ref_log_probs, virt_log_probs, false)
}

/// [`kl_divergence_mean`] without the stop-gradient: the reference branch is
/// differentiated too. Ships for ablation of the teacher-detach choice.
pub fn kl_divergence_mean_full(tape: &Tape, ref_log_probs: &Tensor, virt_log_probs: &Tensor) -> Result<Tensor> {
    kl_impl(tape, ref_log_probs, virt_log_probs, true)
}

fn kl_impl(tape: &Tape, ref_lp: &Tensor, virt_lp: &Tensor, grad_ref: bool) -> Result<Tensor> {
    if ref_lp.shape() != virt_lp.shape() || ref_lp.shape().len() != 2 {
        return Err(Error::Shape {
            op: "kl_divergence_mean",
            left: ref_lp.shape().to_vec(),
            right: virt_lp.shape().to_vec(),
        });
    }
    let (rows, cols) = (ref_lp.rows(), ref_lp.cols());
    let value = ref_lp
        .data()
        .iter()
        .zip(virt_lp.data())
        .map(|(&r, &v)| r.exp() * (r - v))
        .sum::<f64>()
        / rows as f64;

    let ref_id = if grad_ref { tape.input_id(ref_lp) } else { None };
    let virt_id = tape.input_id(virt_lp);
    let out = Tensor::output(vec![1], vec![value], ref_id.is_some() || virt_id.is_some());
    if !out.requires_grad() {
        return Ok(out);
    }

    let ref_saved = ref_lp.clone();
    let virt_saved = virt_lp.clone();
    let n = rows * cols;
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let scale = g[0] / rows as f64;
            if let Some(id) = virt_id {
                let slot = store.slot(id, n);
                for (s, &r) in slot.iter_mut().zip(ref_saved.data()) {
                    *s -= scale * r.exp();
                }
            }
            if let Some(id) = ref_id {
                let slot = store.slot(id, n);
                for ((s, &r), &v) in slot.iter_mut().zip(ref_saved.data()).zip(virt_saved.data()) {
                    *s += scale * r.exp() * (1.0 + r - v);
                }
            }
        }),
    ))
}

/// Sum of all elements as a scalar.
pub fn sum(tape: &Tape, x: &Tensor) -> Tensor {
    let value: f64 = x.data().iter().sum();
    let x_id = tape.input_id(x);
    let out = Tensor::output(vec![1], vec![value], x_id.is_some());
    let Some(x_id) = x_id else { return out };
    let n = x.numel();
    tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, n);
            for s in slot.iter_mut() {
                *s += g[0];
            }
        }),
    )
}

/// Elementwise product of same-shape tensors.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let a_id = tape.input_id(a);
    let b_id = tape.input_id(b);
    let out = Tensor::output(a.shape().to_vec(), data, a_id.is_some() || b_id.is_some());
    if !out.requires_grad() {
        return Ok(out);
    }
    let a_saved = a.clone();
    let b_saved = b.clone();
    let n = a_saved.numel();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            if let Some(id) = a_id {
                let slot = store.slot(id, n);
                for ((s, &gv), &bv) in slot.iter_mut().zip(g).zip(b_saved.data()) {
                    *s += gv * bv;
                }
            }
            if let Some(id) = b_id {
                let slot = store.slot(id, n);
                for ((s, &gv), &av) in slot.iter_mut().zip(g).zip(a_saved.data()) {
                    *s += gv * av;
                }
            }
        }),
    ))
}

/// Elementwise sum of same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let a_id = tape.input_id(a);
    let b_id = tape.input_id(b);
    let out = Tensor::output(a.shape().to_vec(), data, a_id.is_some() || b_id.is_some());
    if !out.requires_grad() {
        return Ok(out);
    }
    let n = a.numel();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            for id in [a_id, b_id].into_iter().flatten() {
                let slot = store.slot(id, n);
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
        }),
    ))
}

/// `c * x` for a constant `c`.
pub fn scale(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| c * v).collect();
    let x_id = tape.input_id(x);
    let out = Tensor::output(x.shape().to_vec(), data, x_id.is_some());
    let Some(x_id) = x_id else { return out };
    let n = x.numel();
    tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, n);
            for (s, &gv) in slot.iter_mut().zip(g) {
                *s += c * gv;
            }
        }),
    )
}

/// Same data under a new shape (row-major); gradient passes through.
pub fn reshape(tape: &Tape, x: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() || new_shape.is_empty() || new_shape.len() > 2 {
        return Err(Error::Shape {
            op: "reshape",
            left: x.shape().to_vec(),
            right: new_shape,
        });
    }
    let x_id = tape.input_id(x);
    let out = Tensor::output(new_shape, x.data().to_vec(), x_id.is_some());
    let Some(x_id) = x_id else { return Ok(out) };
    let n = x.numel();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, n);
            for (s, &gv) in slot.iter_mut().zip(g) {
                *s += gv;
            }
        }),
    ))
}

/// Stacks matrices with equal column counts on top of each other.
pub fn concat_rows(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Contract {
        op: "concat_rows",
        message: "need at least one part".to_string(),
    })?;
    let cols = first.cols();
    let mut rows = 0;
    for p in parts {
        if p.shape().len() != 2 || p.cols() != cols {
            return Err(Error::Shape {
                op: "concat_rows",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }

    let ids: Vec<(Option<usize>, usize)> = parts.iter().map(|p| (tape.input_id(p), p.rows())).collect();
    let any = ids.iter().any(|(id, _)| id.is_some());
    let out = Tensor::output(vec![rows, cols], data, any);
    if !any {
        return Ok(out);
    }
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let mut offset = 0;
            for &(id, part_rows) in &ids {
                let len = part_rows * cols;
                if let Some(id) = id {
                    let slot = store.slot(id, len);
                    for (s, &gv) in slot.iter_mut().zip(&g[offset..offset + len]) {
                        *s += gv;
                    }
                }
                offset += len;
            }
        }),
    ))
}

/// Rows `[r0, r1)` of a matrix.
pub fn slice_rows(tape: &Tape, x: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || r0 >= r1 || r1 > x.rows() {
        return Err(Error::Contract {
            op: "slice_rows",
            message: format!("range {r0}..{r1} invalid for {} rows", x.rows()),
        });
    }
    let cols = x.cols();
    let data = x.data()[r0 * cols..r1 * cols].to_vec();
    let x_id = tape.input_id(x);
    let out = Tensor::output(vec![r1 - r0, cols], data, x_id.is_some());
    let Some(x_id) = x_id else { return Ok(out) };
    let total = x.numel();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, total);
            for (s, &gv) in slot[r0 * cols..r1 * cols].iter_mut().zip(g) {
                *s += gv;
            }
        }),
    ))
}

/// New matrix whose row `i` is row `indices[i]` of `x`; repeats allowed.
pub fn gather_rows(tape: &Tape, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::Contract {
            op: "gather_rows",
            message: format!("need a matrix, got shape {:?}", x.shape()),
        });
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(indices.len() * cols);
    for (at, &i) in indices.iter().enumerate() {
        if i >= rows {
            return Err(Error::Contract {
                op: "gather_rows",
                message: format!("index {i} at position {at} out of range for {rows} rows"),
            });
        }
        data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    let x_id = tape.input_id(x);
    let out = Tensor::output(vec![indices.len(), cols], data, x_id.is_some());
    let Some(x_id) = x_id else { return Ok(out) };
    let indices = indices.to_vec();
    Ok(tape.record(
        out,
        Box::new(move |g, store| {
            let slot = store.slot(x_id, rows * cols);
            for (r, &i) in indices.iter().enumerate() {
                let g_row = &g[r * cols..(r + 1) * cols];
                for (s, &gv) in slot[i * cols..(i + 1) * cols].iter_mut().zip(g_row) {
                    *s += gv;
                }
            }
        }),
    ))
}
