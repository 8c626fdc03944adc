//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order; [`Graph::backward`] walks the tape in reverse. Values are shared
//! behind `Arc` so binding a parameter never copies it, and no operation
//! mutates its inputs.

use std::sync::Arc;

use rand::Rng;

use super::conv::{conv1d_backward_input, conv1d_backward_weight, conv1d_forward};
use super::params::{matrix_dims, SpectralState};
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};
use crate::features::{reflect_index, Stft, StftCache};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Prelu {
        x: Var,
        alpha: Var,
    },
    Tanh {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        g: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    PhaseShuffle {
        x: Var,
        shifts: Vec<isize>,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    Reshape {
        x: Var,
    },
    ChannelsLast {
        x: Var,
    },
    Mse {
        x: Var,
        target: Arc<Tensor>,
        mask: Option<Arc<Vec<f64>>>,
        denom: f64,
    },
    Power {
        x: Var,
        stft: Arc<Stft>,
        caches: Vec<StftCache>,
        diffs: Vec<f64>,
        scale: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g))
    }
}

/// Output index map of a reflection-padded shift: `out[i] = x[map[i]]`.
pub fn phase_shuffle_indices(len: usize, shift: isize) -> Vec<usize> {
    (0..len)
        .map(|i| reflect_index(i as isize - shift, len))
        .collect()
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    kinks: Option<Kinks>,
}

/// PReLU branch patterns, one mask per call in graph order.
enum Kinks {
    Record(Vec<Vec<bool>>),
    Frozen(Arc<Vec<Vec<bool>>>, usize),
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_check(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Record which PReLU branch every input element takes.
    pub fn with_kink_tracking(mut self) -> Self {
        self.kinks = Some(Kinks::Record(Vec::new()));
        self
    }

    /// Evaluate every PReLU on the branches of a recorded pattern instead of
    /// the sign of its input. Finite-difference probes use this to stay on
    /// the smooth piece containing the base point.
    pub fn with_frozen_kinks(mut self, pattern: Arc<Vec<Vec<bool>>>) -> Self {
        self.kinks = Some(Kinks::Frozen(pattern, 0));
        self
    }

    /// The pattern recorded under [`Graph::with_kink_tracking`].
    pub fn kink_pattern(&self) -> Option<&[Vec<bool>]> {
        match &self.kinks {
            Some(Kinks::Record(p)) => Some(p),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value produced by node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// A differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    pub fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv_dims(&self, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<(usize, usize, usize, usize, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 3 {
            return shape_err(format!("conv expects rank-3 input and weight, got {xs:?} and {ws:?}"));
        }
        let (bsz, c, l) = (xs[0], xs[1], xs[2]);
        // Forward conv weight is [O, C, K]; transposed weight is [C, O, K].
        let (w_in, c_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if w_in != c {
            return shape_err(format!("conv input has {c} channels, weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return shape_err(format!("bias {:?} for {c_out} output channels", self.shape(b)));
            }
        }
        Ok((bsz, c, l, c_out, ws[2]))
    }

    /// Strided cross-correlation: `[B, C, L] * [O, C, K] -> [B, O, L_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, c, l, o, k) = self.conv_dims(x, w, b, false)?;
        if l + 2 * pad < k {
            return shape_err(format!("input length {l} shorter than kernel {k}"));
        }
        let bias = b.map(|b| self.value_arc(b));
        let (y, lo) = conv1d_forward(
            self.value(x).data(),
            bsz,
            c,
            l,
            self.value(w).data(),
            o,
            k,
            bias.as_ref().map(|t| t.data()),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![bsz, o, lo], y), Op::Conv1d { x, w, b, stride, pad }, ng)
    }

    /// Adjoint of [`Graph::conv1d`] with output length `L * stride`.
    /// Weight layout is `[C_in, C_out, K]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, c, l, o, k) = self.conv_dims(x, w, b, true)?;
        let lo = l * stride;
        if super::conv::conv_out_len(lo, k, stride, pad) != l {
            return shape_err(format!("transposed conv of length {l} is not invertible with k={k}, s={stride}, p={pad}"));
        }
        let mut y = conv1d_backward_input(self.value(x).data(), bsz, c, l, self.value(w).data(), o, k, lo, stride, pad);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in y.chunks_mut(lo).enumerate() {
                let bv = bias[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![bsz, o, lo], y), Op::ConvTranspose1d { x, w, b, stride, pad }, ng)
    }

    /// Per-channel PReLU along axis 1: `x` for `x >= 0`, `alpha[c] x` otherwise.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(alpha) != [xs[1]] {
            return shape_err(format!("prelu slopes {:?} for input {xs:?}", self.shape(alpha)));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let xa = self.value_arc(x);
        let xv = xa.data();
        let positive: Vec<bool> = match &mut self.kinks {
            Some(Kinks::Frozen(p, k)) => {
                let m = p.get(*k).filter(|m| m.len() == xv.len()).cloned();
                *k += 1;
                match m {
                    Some(m) => m,
                    None => return shape_err(format!("frozen PReLU pattern does not match input {xs:?}")),
                }
            }
            _ => xv.iter().map(|&v| v >= 0.0).collect(),
        };
        let a = self.value(alpha).data();
        let y: Vec<f64> = xv
            .iter()
            .zip(&positive)
            .enumerate()
            .map(|(i, (&v, &pos))| if pos { v } else { a[(i / inner) % c] * v })
            .collect();
        if let Some(Kinks::Record(p)) = &mut self.kinks {
            p.push(positive);
        }
        let ng = self.ng(x) || self.ng(alpha);
        self.push(Tensor::new(xs, y), Op::Prelu { x, alpha }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect());
        let ng = self.ng(x);
        self.push(y, Op::Tanh { x }, ng)
    }

    /// `[N, in] x [out, in]^T + b -> [N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear input {xs:?} with weight {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return shape_err(format!("linear bias {:?} for {dout} outputs", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; n * dout];
        par::for_each_chunk_mut(&mut y, dout, |r, row| {
            let xr = &xv[r * din..(r + 1) * din];
            for (o, out) in row.iter_mut().enumerate() {
                *out = dot(xr, &wv[o * din..(o + 1) * din]) + bv.map_or(0.0, |b| b[o]);
            }
        });
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, dout], y), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let y: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, y), Op::Add { a, b }, ng)
    }

    /// Multiply channel `c` of `[B, C, T]` by `g[c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(g) != [xs[1]] {
            return shape_err(format!("channel gains {:?} for input {xs:?}", self.shape(g)));
        }
        let (c, t) = (xs[1], xs[2]);
        let gv = self.value(g).data();
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[(i / t) % c])
            .collect();
        let ng = self.ng(x) || self.ng(g);
        self.push(Tensor::new(xs, y), Op::ScaleChannels { x, g }, ng)
    }

    /// Concatenate `[B, C_i, T]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return shape_err(format!("concat expects rank 3, got {first:?}"));
        }
        let (bsz, t) = (first[0], first[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != bsz || s[2] != t {
                return shape_err(format!("concat {first:?} with {s:?}"));
            }
            c_total += s[1];
        }
        let mut y = Vec::with_capacity(bsz * c_total * t);
        for b in 0..bsz {
            for &p in parts {
                let c = self.shape(p)[1];
                y.extend_from_slice(&self.value(p).data()[b * c * t..(b + 1) * c * t]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![bsz, c_total, t], y),
            Op::Concat { parts: parts.to_vec() },
            ng,
        )
    }

    /// Shift every channel of batch item `b` by `shifts[b]` with reflection
    /// at the boundaries.
    pub fn phase_shuffle(&mut self, x: Var, shifts: Vec<isize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || shifts.len() != xs[0] {
            return shape_err(format!("{} shifts for input {xs:?}", shifts.len()));
        }
        let (c, t) = (xs[1], xs[2]);
        if let Some(&s) = shifts.iter().find(|s| s.unsigned_abs() >= t) {
            return shape_err(format!("shift {s} too large for length {t}"));
        }
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for (b, &s) in shifts.iter().enumerate() {
            let map = phase_shuffle_indices(t, s);
            for ch in 0..c {
                let off = (b * c + ch) * t;
                for (i, &j) in map.iter().enumerate() {
                    y[off + i] = xv[off + j];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(xs, y), Op::PhaseShuffle { x, shifts }, ng)
    }

    /// Draw one shift in `[-n, n]` per batch item and apply it.
    pub fn random_phase_shuffle<R: Rng + ?Sized>(&mut self, x: Var, n: usize, rng: &mut R) -> Result<Var> {
        let b = self.shape(x)[0];
        let n = n as i64;
        let shifts = (0..b).map(|_| rng.random_range(-n..=n) as isize).collect();
        self.phase_shuffle(x, shifts)
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed power-iteration vectors.
    pub fn spectral_norm(&mut self, w: Var, state: &SpectralState) -> Result<Var> {
        let wt = self.value(w);
        let (rows, cols) = matrix_dims(wt);
        if state.u.len() != rows || state.v.len() != cols {
            return shape_err(format!("spectral state {}x{} for weight {:?}", state.u.len(), state.v.len(), wt.shape()));
        }
        let sigma = state.sigma(wt);
        let y = Tensor::new(wt.shape().to_vec(), wt.data().iter().map(|x| x / sigma).collect());
        let ng = self.ng(w);
        self.push(
            y,
            Op::SpectralNorm {
                w,
                u: state.u.clone(),
                v: state.v.clone(),
                sigma,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", t.shape()));
        }
        let y = Tensor::new(shape, t.data().to_vec());
        let ng = self.ng(x);
        self.push(y, Op::Reshape { x }, ng)
    }

    /// `[B, C, T] -> [B, T, C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return shape_err(format!("channels_last expects rank 3, got {xs:?}"));
        }
        let (bsz, c, t) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                for i in 0..t {
                    y[(b * t + i) * c + ch] = xv[(b * c + ch) * t + i];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![bsz, t, c], y), Op::ChannelsLast { x }, ng)
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, x: Var, target: Arc<Tensor>) -> Result<Var> {
        self.masked_mse(x, target, None)
    }

    /// Mean squared difference over entries with nonzero `mask` (weights in
    /// `{0, 1}`); the mean is taken over the unmasked count.
    pub fn masked_mse(&mut self, x: Var, target: Arc<Tensor>, mask: Option<Arc<Vec<f64>>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err(format!("mse between {:?} and {:?}", xv.shape(), target.shape()));
        }
        if mask.as_ref().is_some_and(|m| m.len() != xv.len()) {
            return shape_err("mask length differs from input".into());
        }
        let denom = mask.as_ref().map_or(xv.len() as f64, |m| m.iter().sum());
        let mut acc = 0.0;
        for (i, (a, b)) in xv.data().iter().zip(target.data()).enumerate() {
            let m = mask.as_ref().map_or(1.0, |m| m[i]);
            acc += m * (a - b) * (a - b);
        }
        let loss = if denom > 0.0 { acc / denom } else { 0.0 };
        let ng = self.ng(x);
        self.push(Tensor::scalar(loss), Op::Mse { x, target, mask, denom }, ng)
    }

    /// `alpha * mean((Phi(x_b) - target_b)^2)` over every batch item and
    /// time-frequency cell, where `Phi` is the dB STFT magnitude of `stft`.
    /// `x` is `[B, 1, L]`; `targets[b]` is the frame-major dB grid of item `b`.
    pub fn power_loss(&mut self, x: Var, stft: Arc<Stft>, targets: &[Vec<f64>], alpha: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != 1 || targets.len() != xs[0] {
            return shape_err(format!("power loss input {xs:?} with {} targets", targets.len()));
        }
        let l = xs[2];
        let xv = self.value_arc(x);
        let per_item: Vec<_> = par::map_range(xs[0], |b| stft.magnitude_db_cached(&xv.data()[b * l..(b + 1) * l]));
        let mut caches = Vec::with_capacity(xs[0]);
        let mut diffs = Vec::new();
        for ((spec, cache), target) in per_item.into_iter().zip(targets) {
            if spec.magnitude_db.len() != target.len() {
                return shape_err(format!("power loss target has {} cells, expected {}", target.len(), spec.magnitude_db.len()));
            }
            diffs.extend(spec.magnitude_db.iter().zip(target).map(|(a, b)| a - b));
            caches.push(cache);
        }
        let scale = alpha / diffs.len().max(1) as f64;
        let loss = scale * diffs.iter().map(|d| d * d).sum::<f64>();
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(loss),
            Op::Power {
                x,
                stft,
                caches,
                diffs,
                scale,
            },
            ng,
        )
    }

    /// `sum_i w_i * t_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return shape_err(format!("weighted_sum term of shape {:?}", t.shape()));
            }
            s += w * t.item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => axpy(acc, 1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv1d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let (bsz, c, l) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(w);
                let (o, k) = (ws[0], ws[2]);
                let lo = node.value.dim(2);
                if self.ng(x) {
                    let gx = conv1d_backward_input(gy, bsz, o, lo, self.value(w).data(), c, k, l, stride, pad);
                    self.accumulate(grads, x, gx);
                }
                if self.ng(w) {
                    let gw = conv1d_backward_weight(gy, self.value(x).data(), bsz, c, l, o, k, lo, stride, pad);
                    self.accumulate(grads, w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, channel_sums(gy, bsz, o, lo));
                }
            }
            &Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let (bsz, c, l) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(w);
                let (o, k) = (ws[1], ws[2]);
                let lo = node.value.dim(2);
                if self.ng(x) {
                    let (gx, _) = conv1d_forward(gy, bsz, o, lo, self.value(w).data(), c, k, None, stride, pad);
                    self.accumulate(grads, x, gx);
                }
                if self.ng(w) {
                    // The transposed op is the input-adjoint of a conv mapping
                    // y [B, O, lo] to x [B, C, l] with weight [C, O, K].
                    let gw = conv1d_backward_weight(self.value(x).data(), gy, bsz, o, lo, c, k, l, stride, pad);
                    self.accumulate(grads, w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, channel_sums(gy, bsz, o, lo));
                }
            }
            &Op::Prelu { x, alpha } => {
                let xs = self.shape(x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let xv = self.value(x).data();
                let a = self.value(alpha).data();
                if self.ng(x) {
                    let gx = xv
                        .iter()
                        .zip(gy)
                        .enumerate()
                        .map(|(i, (&v, &g))| if v >= 0.0 { g } else { a[(i / inner) % c] * g })
                        .collect();
                    self.accumulate(grads, x, gx);
                }
                if self.ng(alpha) {
                    let mut ga = vec![0.0; c];
                    for (i, (&v, &g)) in xv.iter().zip(gy).enumerate() {
                        if v < 0.0 {
                            ga[(i / inner) % c] += v * g;
                        }
                    }
                    self.accumulate(grads, alpha, ga);
                }
            }
            &Op::Tanh { x } => {
                let gx = node.value.data().iter().zip(gy).map(|(y, g)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = self.shape(w)[0];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                if self.ng(x) {
                    let mut gx = vec![0.0; n * din];
                    par::for_each_chunk_mut(&mut gx, din, |r, row| {
                        for o in 0..dout {
                            axpy(row, gy[r * dout + o], &wv[o * din..(o + 1) * din]);
                        }
                    });
                    self.accumulate(grads, x, gx);
                }
                if self.ng(w) {
                    let mut gw = vec![0.0; dout * din];
                    par::for_each_chunk_mut(&mut gw, din, |o, row| {
                        for r in 0..n {
                            axpy(row, gy[r * dout + o], &xv[r * din..(r + 1) * din]);
                        }
                    });
                    self.accumulate(grads, w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for r in 0..n {
                        axpy(&mut gb, 1.0, &gy[r * dout..(r + 1) * dout]);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, gy.to_vec());
                self.accumulate(grads, b, gy.to_vec());
            }
            &Op::ScaleChannels { x, g } => {
                let xs = self.shape(x);
                let (c, t) = (xs[1], xs[2]);
                let gv = self.value(g).data();
                if self.ng(x) {
                    let gx = gy.iter().enumerate().map(|(i, &d)| d * gv[(i / t) % c]).collect();
                    self.accumulate(grads, x, gx);
                }
                if self.ng(g) {
                    let xv = self.value(x).data();
                    let mut gg = vec![0.0; c];
                    for (i, chunk) in gy.chunks(t).enumerate() {
                        gg[i % c] += dot(chunk, &xv[i * t..(i + 1) * t]);
                    }
                    self.accumulate(grads, g, gg);
                }
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let (bsz, c_total, t) = (s[0], s[1], s[2]);
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(bsz * c * t);
                        for b in 0..bsz {
                            let start = (b * c_total + off) * t;
                            gp.extend_from_slice(&gy[start..start + c * t]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::PhaseShuffle { x, shifts } => {
                let s = node.value.shape();
                let (c, t) = (s[1], s[2]);
                let mut gx = vec![0.0; gy.len()];
                for (b, &sh) in shifts.iter().enumerate() {
                    let map = phase_shuffle_indices(t, sh);
                    for ch in 0..c {
                        let off = (b * c + ch) * t;
                        for (i, &j) in map.iter().enumerate() {
                            gx[off + j] += gy[off + i];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/s) with s = u^T W v: (G - <G, W/s> u v^T) / s.
                let ip = dot(gy, node.value.data());
                let cols = v.len();
                let gw = gy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| (g - ip * u[i / cols] * v[i % cols]) / sigma)
                    .collect();
                self.accumulate(grads, *w, gw);
            }
            &Op::Reshape { x } => self.accumulate(grads, x, gy.to_vec()),
            &Op::ChannelsLast { x } => {
                let xs = self.shape(x);
                let (bsz, c, t) = (xs[0], xs[1], xs[2]);
                let mut gx = vec![0.0; gy.len()];
                for b in 0..bsz {
                    for ch in 0..c {
                        for i in 0..t {
                            gx[(b * c + ch) * t + i] = gy[(b * t + i) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Mse { x, target, mask, denom } => {
                if *denom <= 0.0 {
                    return;
                }
                let k = 2.0 * gy[0] / denom;
                let xv = self.value(*x).data();
                let gx = xv
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (a, b))| k * mask.as_ref().map_or(1.0, |m| m[i]) * (a - b))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Power {
                x,
                stft,
                caches,
                diffs,
                scale,
            } => {
                let l = self.shape(*x)[2];
                let cells = diffs.len() / caches.len().max(1);
                let k = 2.0 * scale * gy[0];
                let parts: Vec<Vec<f64>> = par::map_range(caches.len(), |b| {
                    let gdb: Vec<f64> = diffs[b * cells..(b + 1) * cells].iter().map(|d| k * d).collect();
                    stft.backward_db(&caches[b], &gdb, l)
                });
                self.accumulate(grads, *x, parts.concat());
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, vec![w * gy[0]]);
                }
            }
        }
    }
}

fn channel_sums(gy: &[f64], bsz: usize, c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..bsz {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += gy[(b * c + ch) * t..(b * c + ch + 1) * t].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn phase_shuffle_matches_index_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.phase_shuffle(x, vec![2]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0, 1.0, 2.0, 3.0]);
        let y = g.phase_shuffle(x, vec![-2]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 4.0, 3.0]);
        let y = g.phase_shuffle(x, vec![0]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn phase_shuffle_keeps_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 20], 0.7));
        let y = g.random_phase_shuffle(x, 5, &mut rng::from_seed(1)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn prelu_and_tanh_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![2.0, -4.0, 0.0]));
        let a = g.constant(Tensor::new(vec![1], vec![0.25]));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -1.0, 0.0]);
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 30.0, -30.0]));
        let y = g.tanh(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!(v[1] <= 1.0 && v[1] > 1.0 - 1e-12);
        assert!(v[2] >= -1.0 && v[2] < -1.0 + 1e-12);
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = g.linear(x, eye, None).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let zero = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let y = g.linear(x, zero, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 16]));
        let w = g.constant(Tensor::zeros(&[4, 3, 31]));
        assert!(matches!(g.conv1d(x, w, None, 4, 15), Err(Error::Shape(_))));
        let a = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(x, a), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 16], data.clone()));
        let mut k = vec![0.0; 31];
        k[15] = 1.0;
        let w = g.constant(Tensor::new(vec![1, 1, 31], k));
        let y = g.conv1d(x, w, None, 1, 15).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let mut r = rng::from_seed(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 64], 1.0, &mut r));
        let w = g.constant(Tensor::randn(&[5, 3, 31], 1.0, &mut r));
        let y = g.constant(Tensor::randn(&[2, 5, 16], 1.0, &mut r));
        let wt = g.constant(Tensor::new(vec![5, 3, 31], g.value(w).data().to_vec()));
        let cx = g.conv1d(x, w, None, 4, 15).unwrap();
        let ty = g.conv_transpose1d(y, wt, None, 4, 15).unwrap();
        let lhs = g.value(cx).dot(g.value(y));
        let rhs = g.value(x).dot(g.value(ty));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        assert_eq!(g.shape(ty), &[2, 3, 64]);
    }

    #[test]
    fn stride_four_transposed_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 16]));
        let w = g.constant(Tensor::zeros(&[2, 3, 31]));
        let y = g.conv_transpose1d(x, w, None, 4, 15).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 64]);
    }

    #[test]
    fn finite_check_rejects_nan() {
        let mut g = Graph::new().with_finite_check();
        let a = g.constant(Tensor::new(vec![1], vec![f64::NAN]));
        let b = g.constant(Tensor::new(vec![1], vec![1.0]));
        assert!(matches!(g.add(a, b), Err(Error::Data(_))));
    }

    #[test]
    fn masked_mse_counts_unmasked_only() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 100.0]));
        let t = Arc::new(Tensor::new(vec![4], vec![0.0, 1.0, 2.0, 0.0]));
        let l = g.masked_mse(x, t, Some(Arc::new(vec![1.0, 1.0, 1.0, 0.0]))).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap()[3], 0.0);
    }
}
