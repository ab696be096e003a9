use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, inverse_perm, permute, strides};
use super::{dim_err, Result, Tensor, TensorError};

/// Stand-in for −∞ in masked attention scores.
pub const MASK_SENTINEL: f64 = -1e30;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var },
    MaskedFill { a: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Relu { a: Var },
    Dropout { a: Var, scale: Vec<f64> },
    Sum { a: Var },
    MseLoss { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run tape. Build one per forward pass, then call
/// [`Graph::backward`] exactly once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 {
        0
    } else {
        shape.iter().product::<usize>() / last
    };
    (rows, last)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Expands a boolean mask to `target` using numpy broadcasting rules.
fn broadcast_mask(mask_shape: &[usize], mask: &[bool], target: &[usize]) -> Result<Vec<bool>> {
    if mask_shape.len() > target.len() {
        return dim_err(format!("mask {mask_shape:?} has higher rank than {target:?}"));
    }
    let pad = target.len() - mask_shape.len();
    let full: Vec<usize> = std::iter::repeat(1)
        .take(pad)
        .chain(mask_shape.iter().copied())
        .collect();
    for (m, t) in full.iter().zip(target) {
        if *m != *t && *m != 1 {
            return dim_err(format!("mask {mask_shape:?} not broadcastable to {target:?}"));
        }
    }
    if mask.len() != full.iter().product::<usize>() {
        return dim_err("mask data does not match its shape");
    }
    let mstr = strides(&full);
    let n: usize = target.iter().product();
    let tstr = strides(target);
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut off = 0;
        for ax in 0..target.len() {
            let i = (flat / tstr[ax]) % target[ax];
            if full[ax] != 1 {
                off += i * mstr[ax];
            }
        }
        out.push(mask[off]);
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables NaN/Inf verification after every primitive.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::DeadGraph);
        }
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true).expect("leaf insertion")
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false).expect("leaf insertion")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[..., m, k] · b[k, n]`; `b` is shared across the leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (rows, k) = split_last(sa);
        let n = sb[1];
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            rows,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg)
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("bmm of {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!("bmm inner dims {sa:?} and {sb:?}"));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return dim_err(format!("{what} of {sa:?} and {sb:?}"));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_op(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_op(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_op(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg)
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`
    /// (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let bd = self.value(b).data();
        let bl = bd.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bl])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::AddBroadcast { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.node(a)?.value.clone();
        let shape = t.shape().to_vec();
        let out = t.into_data().into_iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Scale { a, factor }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(a)?.value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape { a }, rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.node(a)?.value.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return dim_err(format!("permutation {perm:?} for shape {shape:?}"));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return dim_err(format!("repeated axis in permutation {perm:?}"));
            }
        }
        let (s, d) = permute(self.value(a).data(), shape, perm);
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(s, d)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.node(v)?.value.shape().to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return dim_err(format!("concat of {first:?} and {s:?} along {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let blk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.node(a)?.value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return dim_err(format!("slice {start}..{} on axis {axis} of {s:?}", start + len));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, rg)
    }

    /// Numerically stable softmax along `axis`. A row made only of masked
    /// sentinels is an error: there is no key left to attend to.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.node(a)?.value.rank();
        if axis >= rank {
            return dim_err(format!("softmax axis {axis} for rank {rank}"));
        }
        if axis + 1 == rank {
            return self.softmax_last(a, None);
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis, rank - 1);
        let t = self.permute(a, &perm)?;
        let s = self.softmax_last(t, None)?;
        self.permute(s, &perm)
    }

    /// Softmax over the last axis restricted to unmasked entries (`mask`
    /// true = excluded). Masked entries are exactly zero; a fully masked row
    /// yields an all-zero row, so attention through it contributes nothing.
    pub fn masked_softmax(&mut self, a: Var, mask_shape: &[usize], mask: &[bool]) -> Result<Var> {
        let target = self.node(a)?.value.shape().to_vec();
        let full = broadcast_mask(mask_shape, mask, &target)?;
        self.softmax_last(a, Some(full))
    }

    fn softmax_last(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (rows, n) = split_last(t.shape());
        if n == 0 {
            return dim_err("softmax over an empty axis");
        }
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| !m[r * n + j]);
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                // every entry masked out
                continue;
            }
            if mask.is_none() && mx <= MASK_SENTINEL / 2.0 {
                return Err(TensorError::DegenerateMask);
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg)
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(
        &mut self,
        a: Var,
        mask_shape: &[usize],
        mask: &[bool],
        value: f64,
    ) -> Result<Var> {
        let target = self.node(a)?.value.shape().to_vec();
        let full = broadcast_mask(mask_shape, mask, &target)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(&full)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(target, out)?, Op::MaskedFill { a, mask: full }, rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return dim_err("layer_norm eps must be positive");
        }
        let sx = self.node(x)?.value.shape().to_vec();
        let (rows, n) = split_last(&sx);
        if self.node(gain)?.value.shape() != [n] || self.node(bias)?.value.shape() != [n] {
            return dim_err(format!("layer_norm gain/bias must have shape [{n}]"));
        }
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let out = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let out = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Relu { a }, rg)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return dim_err("dropout probability must be < 1");
        }
        let t = &self.node(a)?.value;
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Dropout { a, scale }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).len();
        if n == 0 {
            return dim_err("mse_loss of empty tensors");
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred, target]);
        self.push(
            Tensor::scalar(s / n as f64),
            Op::MseLoss { pred, target },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call
    /// fails with [`TensorError::DeadGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::DeadGraph);
        }
        let lt = &self.node(loss)?.value;
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                }
                (Op::Leaf, None) if n.requires_grad => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, k) = split_last(av.shape());
                let n = bv.shape()[1];
                self.accumulate(grads, *a, |ga| gemm_nt(g, bv.data(), ga, rows, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av.data(), g, gb, rows, k, n));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                self.accumulate(grads, *a, |ga| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            // b is [n,k]: dA = G·B
                            gemm_nn(gt, bt, out, m, n, k);
                        } else {
                            // b is [k,n]: dA = G·Bᵀ
                            gemm_nt(gt, bt, out, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            // dB[n,k] = Gᵀ·A
                            gemm_tn(gt, at, out, m, n, k);
                        } else {
                            // dB[k,n] = Aᵀ·G
                            gemm_tn(at, gt, out, m, k, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddBroadcast { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accumulate(grads, *b, |gb| {
                    let bl = gb.len();
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % bl] += y;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Permute { a, perm } => {
                let (_, back) = permute(g, node.value.shape(), &inverse_perm(perm));
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y)
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let d = self.value(p).shape()[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * d * inner;
                            for j in 0..d * inner {
                                gp[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.value(*a).shape();
                let (outer, dim, inner) = axis_split(src_shape, *axis);
                let len = node.value.shape()[*axis];
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        for j in 0..len * inner {
                            ga[base + j] += g[o * len * inner + j];
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let (rows, n) = split_last(node.value.shape());
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for j in 0..g.len() {
                        if !mask[j] {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, n) = split_last(node.value.shape());
                let gd = self.value(*gain).data();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = g[r * n + j] * gd[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        let (m1, m2) = (s1 / n as f64, s2 / n as f64);
                        for j in 0..n {
                            let dh = g[r * n + j] * gd[j];
                            gx[r * n + j] += rstd[r] * (dh - m1 - xhat[r * n + j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % n] += gv * h;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % n] += gv;
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..g.len() {
                        let v = x[j];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        ga[j] += g[j] * d;
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Dropout { a, scale } => {
                self.accumulate(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * scale[j];
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let c = 2.0 * g[0] / p.len() as f64;
                self.accumulate(grads, *pred, |gp| {
                    for j in 0..p.len() {
                        gp[j] += c * (p[j] - t[j]);
                    }
                });
                self.accumulate(grads, *target, |gt| {
                    for j in 0..p.len() {
                        gt[j] -= c * (p[j] - t[j]);
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let c = g.constant(t2(&[&[5.0], &[6.0]]));
        let q = g.matmul(m, c).unwrap();
        assert_eq!(g.value(q).shape(), &[2, 1]);
        assert_eq!(g.value(q).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_grad_rows_equal_b_transposed() {
        let mut g = Graph::new();
        let a = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t2(&[&[5.0], &[6.0]]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(y, 0).unwrap();
        let d = g.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_non_last_axis_columns_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, -1.0]]));
        let s = g.softmax(x, 0).unwrap();
        let d = g.value(s).data();
        for c in 0..3 {
            assert!((d[c] + d[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn masked_fill_then_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let f = g.masked_fill(x, &[2], &[false, true], MASK_SENTINEL).unwrap();
        let s = g.softmax(f, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);

        let same = g.masked_fill(x, &[2], &[false, false], MASK_SENTINEL).unwrap();
        assert_eq!(g.value(same), g.value(x));

        let all = g.masked_fill(x, &[2], &[true, true], MASK_SENTINEL).unwrap();
        assert_eq!(g.softmax(all, 0), Err(TensorError::DegenerateMask));
    }

    #[test]
    fn masked_softmax_zero_rows_for_fully_masked() {
        let mut g = Graph::new();
        let x = g.param(t2(&[&[0.3, -0.2], &[1.0, 2.0]]));
        let s = g
            .masked_softmax(x, &[2, 2], &[true, true, false, true])
            .unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0, 1.0, 0.0]);
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_broadcasts_over_leading_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        let f = g.masked_fill(x, &[2, 2], &[false, true, false, false], -5.0).unwrap();
        let d = g.value(f).data();
        for b in 0..3 {
            assert_eq!(&d[b * 4..b * 4 + 4], &[0.0, -5.0, 0.0, 0.0]);
        }
        assert!(g.masked_fill(x, &[3], &[false; 3], 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(t2(&[&[4.0, 4.0]]));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let x = g.constant(t2(&[&[1.0, 3.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let t = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);
        let l0 = g.mse_loss(p, p).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
        let short = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.mse_loss(p, short).is_err());

        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![2.0]));
        let t = g.constant(Tensor::vector(vec![0.0]));
        let l = g.mse_loss(p, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_square_and_softmax_sum() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.2, -1.0, 2.5]));
        let s = g.softmax(x, 0).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            g.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::DeadGraph);
        assert_eq!(g.sum(x).unwrap_err(), TensorError::DeadGraph);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let unused = g.param(Tensor::vector(vec![1.0, 1.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_detected_when_checking() {
        let mut g = Graph::new();
        g.set_finite_checks(true);
        let x = g.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(g.scale(x, 1e300), Err(TensorError::NonFinite(_))));
    }
}
