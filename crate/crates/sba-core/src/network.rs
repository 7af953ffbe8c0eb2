//! Layered MLP classifiers with an explicit split point.
//!
//! A [`LayerStack`] is an ordered list of affine layers, relu after every
//! layer except the final logits layer. A split choice `k` (1-based count of
//! leading layers) cuts the net into the input-side mapping (`forward_to`,
//! producing the post-activation of layer `k`) and the output-side mapping
//! (`forward_from`, producing logits). The eligible split set `S` holds only
//! hidden post-activation indices — never 0 (the input) and never the final
//! logits layer — so augmentation happens on fully connected hidden
//! representations.
//!
//! Forward passes run on [`Tensor`]s via a [`TracedNet`] view, trainable or
//! frozen; applying `forward_to` then `forward_from` executes the same op
//! sequence as `forward_full`, so the two are bitwise equal.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::tensor::{ops, Tape, Tensor};

/// One affine layer: `in_dim x out_dim` weights (row-major), `out_dim` bias.
#[derive(Debug, Clone)]
struct Layer {
    weights: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    relu: bool,
}

/// An eligible split layer index, `k in S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitChoice {
    pub k: usize,
}

/// Fully-connected classifier with a split set `S` of eligible hidden layers.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<Layer>,
    widths: Vec<usize>,
    split_set: Vec<usize>,
}

impl LayerStack {
    /// Builds a net with the given layer widths. Weights are drawn uniformly
    /// from `[-sqrt(6/fan_in), sqrt(6/fan_in)]` on the init stream of `seed`;
    /// biases start at zero. The default split set is every hidden
    /// post-activation layer, `{1, ..., L-1}`.
    pub fn init(widths: &[usize], seed: u64) -> Result<LayerStack> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layer widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero width in {widths:?}")));
        }
        let mut rng = stream(seed, StreamTag::Init);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weights,
                bias: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
                relu: l + 1 < widths.len() - 1,
            });
        }
        let split_set = (1..widths.len() - 1).collect();
        Ok(LayerStack {
            layers,
            widths: widths.to_vec(),
            split_set,
        })
    }

    /// Restricts the eligible split set. Indices must name hidden
    /// post-activation layers: `1 <= k < L`.
    pub fn with_split_set(mut self, split_set: &[usize]) -> Result<LayerStack> {
        let layer_count = self.layers.len();
        let mut set: Vec<usize> = split_set.to_vec();
        set.sort_unstable();
        set.dedup();
        for &k in &set {
            if k == 0 || k >= layer_count {
                return Err(Error::Config(format!(
                    "split index {k} outside hidden layers 1..{layer_count}"
                )));
            }
        }
        self.split_set = set;
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn split_set(&self) -> &[usize] {
        &self.split_set
    }

    /// Width of the activation at split `k`.
    pub fn width_at(&self, k: usize) -> usize {
        self.widths[k]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().expect("widths nonempty")
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters as one flat vector: per layer, weights then bias.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat vector (see
    /// [`LayerStack::param_vector`]).
    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                op: "set_param_vector",
                left: vec![self.param_count()],
                right: vec![flat.len()],
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Adds `delta` to the parameters in flat `param_vector` order.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::Shape {
                op: "apply_delta",
                left: vec![self.param_count()],
                right: vec![delta.len()],
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in &mut l.weights {
                *w += delta[at];
                at += 1;
            }
            for b in &mut l.bias {
                *b += delta[at];
                at += 1;
            }
        }
        Ok(())
    }

    /// Trainable tensor view of the parameters for one forward/backward pass.
    pub fn traced(&self) -> TracedNet {
        self.as_tensors(true)
    }

    /// Read-only tensor view for evaluation.
    pub fn frozen(&self) -> TracedNet {
        self.as_tensors(false)
    }

    fn as_tensors(&self, requires_grad: bool) -> TracedNet {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w_shape = vec![l.in_dim, l.out_dim];
                let w = if requires_grad {
                    Tensor::param(w_shape, l.weights.clone())
                } else {
                    Tensor::from_vec(w_shape, l.weights.clone())
                }
                .expect("layer weights are valid");
                let b = if requires_grad {
                    Tensor::param(vec![l.out_dim], l.bias.clone())
                } else {
                    Tensor::vector(l.bias.clone())
                }
                .expect("layer bias is valid");
                TracedLayer { w, b, relu: l.relu }
            })
            .collect();
        TracedNet {
            layers,
            split_set: self.split_set.clone(),
        }
    }
}

/// One layer of a [`TracedNet`].
#[derive(Debug, Clone)]
pub struct TracedLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub relu: bool,
}

impl TracedLayer {
    fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Tensor view of a [`LayerStack`] for building forward passes on a tape.
#[derive(Debug, Clone)]
pub struct TracedNet {
    pub layers: Vec<TracedLayer>,
    split_set: Vec<usize>,
}

impl TracedNet {
    fn check_split(&self, k: SplitChoice) -> Result<()> {
        if self.split_set.contains(&k.k) {
            Ok(())
        } else {
            Err(Error::Contract {
                op: "forward_split",
                message: format!("split {} not in eligible set {:?}", k.k, self.split_set),
            })
        }
    }

    fn apply_range(&self, tape: &Tape, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers[from..to] {
            h = ops::affine(tape, &h, &layer.w, &layer.b)?;
            if layer.relu {
                h = ops::relu(tape, &h);
            }
        }
        Ok(h)
    }

    /// The post-activation representation at layer `k` for a `B x d` batch.
    pub fn forward_to(&self, tape: &Tape, x: &Tensor, k: SplitChoice) -> Result<Tensor> {
        self.check_split(k)?;
        self.apply_range(tape, x, 0, k.k)
    }

    /// Logits from a (possibly augmented, `R != B`) representation at layer
    /// `k`.
    pub fn forward_from(&self, tape: &Tape, h: &Tensor, k: SplitChoice) -> Result<Tensor> {
        self.check_split(k)?;
        let expected = self.layers[k.k].in_dim();
        if h.cols() != expected {
            return Err(Error::Shape {
                op: "forward_from",
                left: h.shape().to_vec(),
                right: vec![expected],
            });
        }
        self.apply_range(tape, h, k.k, self.layers.len())
    }

    /// Logits of the unsplit forward pass.
    pub fn forward_full(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.apply_range(tape, x, 0, self.layers.len())
    }
}

/// A traced net whose layer tensors are views into one flat parameter
/// tensor (same layout as [`LayerStack::param_vector`]). Gradients of any
/// loss built on the result flow back into `theta`, which is what the
/// finite-difference oracle differentiates.
pub fn traced_from_flat(
    tape: &Tape,
    theta: &Tensor,
    widths: &[usize],
    split_set: &[usize],
) -> Result<TracedNet> {
    if widths.len() < 2 {
        return Err(Error::Config(format!("need >= 2 widths, got {widths:?}")));
    }
    let expected: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    if theta.numel() != expected {
        return Err(Error::Shape {
            op: "traced_from_flat",
            left: vec![expected],
            right: vec![theta.numel()],
        });
    }
    let col = ops::reshape(tape, theta, vec![expected, 1])?;
    let mut layers = Vec::with_capacity(widths.len() - 1);
    let mut at = 0usize;
    for (l, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w_slice = ops::slice_rows(tape, &col, at, at + fan_in * fan_out)?;
        let w = ops::reshape(tape, &w_slice, vec![fan_in, fan_out])?;
        at += fan_in * fan_out;
        let b_slice = ops::slice_rows(tape, &col, at, at + fan_out)?;
        let b = ops::reshape(tape, &b_slice, vec![fan_out])?;
        at += fan_out;
        layers.push(TracedLayer {
            w,
            b,
            relu: l + 1 < widths.len() - 1,
        });
    }
    Ok(TracedNet {
        layers,
        split_set: split_set.to_vec(),
    })
}

/// Uniform draw from the eligible split set; call once per augmented
/// iteration.
pub fn draw_split(split_set: &[usize], rng: &mut impl Rng) -> Result<SplitChoice> {
    if split_set.is_empty() {
        return Err(Error::Config("empty split set".to_string()));
    }
    let k = split_set[rng.random_range(0..split_set.len())];
    Ok(SplitChoice { k })
}

// --- Checkpoint format -------------------------------------------------
//
// Little-endian flat file:
//   bytes 0..4    magic "SBA1"
//   u32           number of widths (>= 2)
//   u32 * n       widths
//   u32           split set size
//   u32 * s       split indices
//   f64 * p       parameters in param_vector order
// The parameter count is implied by the widths.

const MAGIC: &[u8; 4] = b"SBA1";

/// Writes a checkpoint of the full model.
pub fn save_checkpoint(net: &LayerStack, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(net.widths.len() as u32).to_le_bytes());
    for &w in &net.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(net.split_set.len() as u32).to_le_bytes());
    for &s in &net.split_set {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for v in net.param_vector() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LayerStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = path.display().to_string();
    let mut at = 0usize;

    fn take<'a>(bytes: &'a [u8], name: &str, at: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *at + n > bytes.len() {
            return Err(Error::format(
                name,
                format!("truncated at byte {} (wanted {} more)", *at, n),
            ));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    }
    fn read_u32(bytes: &[u8], name: &str, at: &mut usize) -> Result<u32> {
        Ok(u32::from_le_bytes(take(bytes, name, at, 4)?.try_into().unwrap()))
    }

    if take(&bytes, &name, &mut at, 4)? != MAGIC {
        return Err(Error::format(&name, "bad magic at byte 0 (want \"SBA1\")"));
    }
    let n_widths = read_u32(&bytes, &name, &mut at)? as usize;
    if n_widths < 2 {
        return Err(Error::format(&name, format!("width count {n_widths} < 2 at byte 4")));
    }
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(read_u32(&bytes, &name, &mut at)? as usize);
    }
    let n_split = read_u32(&bytes, &name, &mut at)? as usize;
    let mut split_set = Vec::with_capacity(n_split);
    for _ in 0..n_split {
        split_set.push(read_u32(&bytes, &name, &mut at)? as usize);
    }

    let mut net = LayerStack::init(&widths, 0)?.with_split_set(&split_set)?;
    let mut params = Vec::with_capacity(net.param_count());
    for _ in 0..net.param_count() {
        let v = f64::from_le_bytes(take(&bytes, &name, &mut at, 8)?.try_into().unwrap());
        params.push(v);
    }
    if at != bytes.len() {
        return Err(Error::format(
            &name,
            format!("{} trailing bytes at byte {at}", bytes.len() - at),
        ));
    }
    net.set_param_vector(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_builds_expected_shapes() {
        let net = LayerStack::init(&[4, 3, 2], 7).unwrap();
        assert_eq!(net.layer_count(), 2);
        assert_eq!(net.param_count(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(net.split_set(), &[1]);
        assert_eq!(net.class_count(), 2);
    }

    #[test]
    fn init_is_deterministic() {
        let a = LayerStack::init(&[4, 3, 2], 7).unwrap();
        let b = LayerStack::init(&[4, 3, 2], 7).unwrap();
        let bits =
            |n: &LayerStack| n.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn init_biases_are_zero() {
        let net = LayerStack::init(&[4, 3, 2], 7).unwrap();
        let flat = net.param_vector();
        // Per-layer layout: weights then bias.
        assert!(flat[12..15].iter().all(|&v| v == 0.0));
        assert!(flat[21..23].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_single_width() {
        assert!(matches!(LayerStack::init(&[4], 7), Err(Error::Config(_))));
    }

    #[test]
    fn split_zero_is_outside_eligible_set() {
        let net = LayerStack::init(&[4, 3, 2], 7).unwrap();
        let tape = Tape::new();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let err = net
            .frozen()
            .forward_to(&tape, &x, SplitChoice { k: 0 })
            .unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn identity_layer_with_relu_clips_negatives() {
        let mut net = LayerStack::init(&[2, 2, 2], 1).unwrap();
        let mut flat = net.param_vector();
        // First layer = identity weights, zero bias.
        flat[0] = 1.0;
        flat[1] = 0.0;
        flat[2] = 0.0;
        flat[3] = 1.0;
        flat[4] = 0.0;
        flat[5] = 0.0;
        net.set_param_vector(&flat).unwrap();

        let tape = Tape::new();
        let x = Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap();
        let h = net
            .frozen()
            .forward_to(&tape, &x, SplitChoice { k: 1 })
            .unwrap();
        assert_eq!(h.data(), &[0.0, 2.0]);
    }

    #[test]
    fn split_composition_is_bitwise_equal_to_full_forward() {
        let net = LayerStack::init(&[5, 7, 6, 3], 42).unwrap();
        let mut data_rng = rng::stream(3, rng::StreamTag::Data);
        let x_data: Vec<f64> = (0..4 * 5).map(|_| data_rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(4, 5, x_data).unwrap();

        let frozen = net.frozen();
        let tape = Tape::new();
        let full = frozen.forward_full(&tape, &x).unwrap();
        for &k in net.split_set() {
            let split = SplitChoice { k };
            let h = frozen.forward_to(&tape, &x, split).unwrap();
            let out = frozen.forward_from(&tape, &h, split).unwrap();
            let full_bits: Vec<u64> = full.data().iter().map(|v| v.to_bits()).collect();
            let out_bits: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(full_bits, out_bits, "split at k={k}");
        }
    }

    #[test]
    fn forward_from_accepts_augmented_row_counts() {
        let net = LayerStack::init(&[5, 7, 6, 3], 42).unwrap();
        let frozen = net.frozen();
        let tape = Tape::new();
        for rows in [1usize, 4, 20] {
            let h = Tensor::matrix(rows, 7, vec![0.1; rows * 7]).unwrap();
            let out = frozen.forward_from(&tape, &h, SplitChoice { k: 1 }).unwrap();
            assert_eq!(out.rows(), rows);
            assert_eq!(out.cols(), 3);
        }
    }

    #[test]
    fn forward_from_checks_width() {
        let net = LayerStack::init(&[5, 7, 6, 3], 42).unwrap();
        let tape = Tape::new();
        let h = Tensor::matrix(2, 6, vec![0.0; 12]).unwrap();
        let err = net
            .frozen()
            .forward_from(&tape, &h, SplitChoice { k: 1 })
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn draw_split_singleton_always_returns_it() {
        let mut r = rng::stream(5, rng::StreamTag::Split);
        for _ in 0..100 {
            assert_eq!(draw_split(&[2], &mut r).unwrap().k, 2);
        }
    }

    #[test]
    fn draw_split_two_way_frequency() {
        let mut r = rng::stream(11, rng::StreamTag::Split);
        let n = 10_000;
        let mut ones = 0usize;
        for _ in 0..n {
            if draw_split(&[1, 2], &mut r).unwrap().k == 1 {
                ones += 1;
            }
        }
        let f = ones as f64 / n as f64;
        assert!((0.485..=0.515).contains(&f), "frequency {f}");
    }

    #[test]
    fn draw_split_is_reproducible() {
        let seq = |seed| {
            let mut r = rng::stream(seed, rng::StreamTag::Split);
            (0..32).map(|_| draw_split(&[1, 2, 3], &mut r).unwrap().k).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert!(draw_split(&[], &mut rng::stream(0, rng::StreamTag::Split)).is_err());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sba");
        let net = LayerStack::init(&[4, 3, 2], 7).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.widths(), net.widths());
        assert_eq!(back.split_set(), net.split_set());
        let bits =
            |n: &LayerStack| n.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sba");
        let net = LayerStack::init(&[4, 3, 2], 7).unwrap();
        save_checkpoint(&net, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        bytes[0] = b'S';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
