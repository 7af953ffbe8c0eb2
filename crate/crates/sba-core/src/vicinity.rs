//! Latent vicinity generation.
//!
//! Around each reference activation `x_k` (one row of the split-layer batch),
//! two kinds of virtual points are produced:
//!
//! - projection points: `x_k + S * clip(eps, tau)` with `eps ~ N(0, sigma^2 I)`
//!   clipped componentwise to `[-tau, tau]` and projected through a random
//!   basis matrix `S`;
//! - deletion points: `mask .* x_k` with an independent Bernoulli keep mask.
//!   There is deliberately no `1/keep_prob` rescaling (unlike inverted
//!   dropout): the virtual point must stay close to its reference.
//!
//! The basis is orthonormal by default (QR of a square Gaussian matrix with
//! a fixed column-sign convention), which makes the projection an isometry
//! and bounds every projection point within `sqrt(Q_k) * tau` of its
//! reference. A cheaper column-normalized Gaussian basis is available behind
//! [`BasisMode::ColumnNormalized`].
//!
//! Virtual points are data, not differentiable functions of the network:
//! they are built from the raw activation values and enter the tape as
//! constants. Only the reference rows of an [`AugmentedBatch`] carry
//! gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor};

/// How many virtual points to generate per reference sample and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicinityConfig {
    /// Projection (Gaussian) points per sample.
    pub p_gauss: usize,
    /// Deletion (dropout) points per sample.
    pub q_drop: usize,
    /// Std of the pre-clip Gaussian noise, in activation units.
    pub sigma: f64,
    /// Componentwise clip bound on the noise, in activation units.
    pub tau: f64,
    /// Probability of keeping a feature in a deletion mask.
    pub keep_prob: f64,
    /// Basis construction for the projection points.
    pub basis_mode: BasisMode,
}

impl Default for VicinityConfig {
    fn default() -> Self {
        VicinityConfig {
            p_gauss: 2,
            q_drop: 2,
            sigma: 0.1,
            tau: 0.3,
            keep_prob: 0.9,
            basis_mode: BasisMode::Orthonormal,
        }
    }
}

impl VicinityConfig {
    /// Total augmented fold `M = p + q`.
    pub fn fold(&self) -> usize {
        self.p_gauss + self.q_drop
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold() == 0 {
            return Err(Error::Config(
                "vicinity fold M = p_gauss + q_drop must be >= 1".to_string(),
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisMode {
    /// Q factor of a Gaussian matrix, sign-fixed; an isometry.
    Orthonormal,
    /// Gaussian matrix with unit-norm columns; cheaper, not an isometry.
    ColumnNormalized,
}

/// A `Q_k x Q_k` projection basis plus provenance for cadence accounting.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    matrix: Vec<f64>,
    width: usize,
    /// Iteration index at which this basis was generated.
    pub generation_stamp: u64,
    /// Split layer the basis belongs to.
    pub layer: usize,
}

impl BasisMatrix {
    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `width x width` entries.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

/// Generates a fresh projection basis from the noise stream.
///
/// Orthonormal mode takes the Q factor of a standard-Gaussian square matrix
/// and applies a fixed column-sign convention, making the result a
/// deterministic function of the drawn matrix (width 1 always yields
/// `[[1]]`).
pub fn make_basis(
    width: usize,
    mode: BasisMode,
    stamp: u64,
    layer: usize,
    rng: &mut impl Rng,
) -> BasisMatrix {
    assert!(width >= 1, "basis width must be >= 1");
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let mut gauss: Vec<f64> = (0..width * width).map(|_| normal.sample(rng)).collect();

    let matrix = match mode {
        // The canonical orthonormal basis of R^1 is exactly [[1]]; skip the
        // factorization's rounding (the Gaussian draw above still happens,
        // keeping stream consumption uniform across widths).
        BasisMode::Orthonormal if width == 1 => vec![1.0],
        BasisMode::Orthonormal => orthonormal_from_gaussian(&mut gauss, width),
        BasisMode::ColumnNormalized => {
            for j in 0..width {
                let norm: f64 = (0..width).map(|i| gauss[i * width + j].powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for i in 0..width {
                        gauss[i * width + j] /= norm;
                    }
                }
            }
            gauss
        }
    };
    BasisMatrix {
        matrix,
        width,
        generation_stamp: stamp,
        layer,
    }
}

/// Householder QR returning the explicit Q under a fixed sign convention.
fn orthonormal_from_gaussian(a: &mut [f64], n: usize) -> Vec<f64> {
    let mut q: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut v = vec![0.0; n];

    for j in 0..n {
        // Householder vector for column j below the diagonal.
        let mut norm2 = 0.0;
        for i in j..n {
            let x = a[i * n + j];
            v[i] = x;
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[j] >= 0.0 { -norm } else { norm };
        v[j] -= alpha;
        let vtv: f64 = (j..n).map(|i| v[i] * v[i]).sum();
        if vtv == 0.0 {
            continue;
        }

        // A := H A on the trailing block (we only need R's diagonal sign,
        // but the full update keeps the factorization honest).
        for col in j..n {
            let mut dot = 0.0;
            for i in j..n {
                dot += v[i] * a[i * n + col];
            }
            let s = 2.0 * dot / vtv;
            for i in j..n {
                a[i * n + col] -= s * v[i];
            }
        }
        // Q := Q H (accumulating Q = H_0 H_1 ... H_{n-1}).
        for row in 0..n {
            let mut dot = 0.0;
            for i in j..n {
                dot += q[row * n + i] * v[i];
            }
            let s = 2.0 * dot / vtv;
            for i in j..n {
                q[row * n + i] -= s * v[i];
            }
        }
    }

    // Sign canonicalization: flip columns so Q's diagonal is nonnegative.
    // Any fixed column-sign rule makes the basis a deterministic function of
    // the drawn matrix while preserving orthonormality; this one also keeps
    // the 1x1 basis at [[1]] regardless of the draw's sign.
    for j in 0..n {
        if q[j * n + j] < 0.0 {
            for row in 0..n {
                q[row * n + j] = -q[row * n + j];
            }
        }
    }
    q
}

/// `x_k + S * clip(eps, tau)` for an explicit noise vector.
pub(crate) fn project_clipped(x_k: &[f64], basis: &BasisMatrix, eps: &[f64], tau: f64) -> Vec<f64> {
    debug_assert_eq!(x_k.len(), basis.width);
    debug_assert_eq!(eps.len(), basis.width);
    let clipped: Vec<f64> = eps.iter().map(|&e| e.clamp(-tau, tau)).collect();
    let projected = crate::tensor::kernels::matvec(&basis.matrix, &clipped, basis.width, basis.width);
    x_k.iter().zip(&projected).map(|(&x, &p)| x + p).collect()
}

/// Projection virtual point: draw `eps ~ N(0, sigma^2 I)`, clip to
/// `[-tau, tau]`, project through the basis, and offset the reference.
pub fn gaussian_virtual(
    x_k: &[f64],
    basis: &BasisMatrix,
    sigma: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated by VicinityConfig");
    let eps: Vec<f64> = (0..basis.width).map(|_| normal.sample(rng)).collect();
    project_clipped(x_k, basis, &eps, tau)
}

/// Deletion virtual point: independent Bernoulli(keep_prob) mask, elementwise
/// product, no rescaling.
pub fn dropout_virtual(x_k: &[f64], keep_prob: f64, rng: &mut impl Rng) -> Vec<f64> {
    x_k.iter()
        .map(|&x| {
            let keep: f64 = rng.random();
            if keep < keep_prob {
                x
            } else {
                0.0
            }
        })
        .collect()
}

/// The split-layer batch together with its virtual replicas.
///
/// Row layout: the `B` reference rows first (bitwise equal to `X_k` and
/// carrying its gradient), then all projection points grouped by reference
/// sample, then all deletion points grouped by reference sample.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    /// `(M+1)*B x Q_k` rows on the tape; virtual rows are constants.
    pub rows: Tensor,
    /// Reference row index for each row; `None` for the reference rows
    /// themselves.
    pub ref_index: Vec<Option<usize>>,
    /// Reference batch size `B`.
    pub batch: usize,
    /// Augmented fold `M`.
    pub fold: usize,
}

impl AugmentedBatch {
    /// Reference row index for each virtual row, aligned with rows `B..`.
    pub fn virtual_refs(&self) -> Vec<usize> {
        self.ref_index.iter().flatten().copied().collect()
    }
}

/// Builds `[X_k; V_g; V_d]` with `p_gauss + q_drop` virtual points per
/// reference row. Projection noise draws come from `noise_rng` (row-major:
/// all of sample 0's points, then sample 1's, ...), deletion masks from
/// `mask_rng` in the same order.
pub fn augment_batch(
    tape: &Tape,
    x_k: &Tensor,
    cfg: &VicinityConfig,
    basis: &BasisMatrix,
    noise_rng: &mut impl Rng,
    mask_rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    cfg.validate()?;
    if x_k.shape().len() != 2 || x_k.cols() != basis.width {
        return Err(Error::Shape {
            op: "augment_batch",
            left: x_k.shape().to_vec(),
            right: vec![basis.width, basis.width],
        });
    }
    let batch = x_k.rows();
    let width = basis.width;
    let fold = cfg.fold();

    let mut virt = Vec::with_capacity(fold * batch * width);
    let mut ref_index: Vec<Option<usize>> = vec![None; batch];

    for i in 0..batch {
        let reference = &x_k.data()[i * width..(i + 1) * width];
        for _ in 0..cfg.p_gauss {
            virt.extend(gaussian_virtual(reference, basis, cfg.sigma, cfg.tau, noise_rng));
            ref_index.push(Some(i));
        }
    }
    for i in 0..batch {
        let reference = &x_k.data()[i * width..(i + 1) * width];
        for _ in 0..cfg.q_drop {
            virt.extend(dropout_virtual(reference, cfg.keep_prob, mask_rng));
            ref_index.push(Some(i));
        }
    }

    let virt_tensor = Tensor::matrix(fold * batch, width, virt)?;
    let rows = ops::concat_rows(tape, &[x_k, &virt_tensor])?;
    Ok(AugmentedBatch {
        rows,
        ref_index,
        batch,
        fold,
    })
}
