use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, permute};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom op: `(upstream grad, input grad accumulator)`.
pub type CustomBackward = Box<dyn Fn(&[f64], &mut [f64])>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// The right operand's shape is a suffix of the left's.
    RightRepeats,
    /// The left operand's shape is a suffix of the right's.
    LeftRepeats,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Dropout { input: Var, mask: Vec<f64> },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Custom { input: Var, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is always a topological order,
/// so [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if a.ends_with(b) {
        Ok((a.to_vec(), Broadcast::RightRepeats))
    } else if b.ends_with(a) {
        Ok((b.to_vec(), Broadcast::LeftRepeats))
    } else {
        Err(TensorError::Shape(format!(
            "cannot broadcast {a:?} with {b:?}"
        )))
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let inner = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel / inner, inner)
}

/// Adds `src` into `dst`, folding repeated blocks when `dst` is smaller.
fn accumulate_reduced(dst: &mut [f64], src: &[f64]) {
    if dst.len() == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for chunk in src.chunks_exact(dst.len()) {
            for (d, s) in dst.iter_mut().zip(chunk) {
                *d += s;
            }
        }
    }
}

impl Graph {
    /// An inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// A training-mode graph whose dropout masks come from `seed`.
    pub fn with_dropout_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Switches to training mode with a fresh dropout stream.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (shape, mode) = broadcast(self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightRepeats => av
                .chunks_exact(bv.len())
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
            Broadcast::LeftRepeats => bv
                .chunks_exact(av.len())
                .flat_map(|chunk| av.iter().zip(chunk).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, make(a, b, mode), rg)
    }

    /// Elementwise sum; one operand may broadcast over the other's leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b, _| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b, _| Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a);
        let data = value.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// `[.., m, k] · [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = sa.iter().product::<usize>() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg)
    }

    /// Batched product over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(TensorError::Shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if k != kb {
            return Err(TensorError::Shape(format!(
                "batch_matmul inner dims {k} vs {kb}"
            )));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa;
        shape[ra - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a);
        let data = value.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a);
        let (_, n) = split_last(value.shape());
        let mut data = value.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Softmax over the last axis restricted to positions where `mask` is true.
    ///
    /// `mask` covers the whole input or a trailing block of it that repeats
    /// over the leading axes. Masked entries come out exactly zero. A row with
    /// no live entry is a domain error.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = self.value(a);
        let (_, n) = split_last(value.shape());
        if let Some(mask) = mask {
            if mask.is_empty() || value.numel() % mask.len() != 0 || mask.len() % n != 0 {
                return Err(TensorError::Shape(format!(
                    "mask of length {} does not tile input of shape {:?}",
                    mask.len(),
                    value.shape()
                )));
            }
        }
        let mut data = value.data().to_vec();
        for (r, row) in data.chunks_exact_mut(n).enumerate() {
            let live = |j: usize| match mask {
                Some(m) => m[(r * n + j) % m.len()],
                None => true,
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if live(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Domain(format!("softmax row {r} is fully masked")));
            }
            let mut total = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if live(j) { (*x - max).exp() } else { 0.0 };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let t = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self.value(x);
        let (_, d) = split_last(value.shape());
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?} / {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = value.data().to_vec();
        let mut rstd = Vec::with_capacity(xhat.len() / d);
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_exact_mut(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for ((h, o), (gi, bi)) in row.iter_mut().zip(orow.iter_mut()).zip(g.iter().zip(b)) {
                *h = (*h - mean) * r;
                *o = *h * gi + bi;
            }
        }
        let t = Tensor::new(value.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Gathers rows of a `[n, d]` table: output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(TensorError::Shape(format!("embedding table {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(TensorError::Shape("embedding with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "id {bad} out of range for table of {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::Shape(format!("concat {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape(format!(
                "slice {start}..{} of axis {axis} on {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(input);
        self.push(Tensor::new(out_shape, data)?, Op::Slice { input, axis, start }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Inverted dropout. Identity in inference mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(a);
        let data = value.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Dropout { input: a, mask }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = permute(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, data)?, Op::Permute { input: a, perm: perm.to_vec() }, rg)
    }

    /// Records an op whose forward value was computed elsewhere.
    ///
    /// `backward(upstream, input_grad)` must add the vector-Jacobian product
    /// into `input_grad`.
    pub fn custom(&mut self, input: Var, value: Tensor, backward: CustomBackward) -> Result<Var> {
        let rg = self.rg(input);
        self.push(value, Op::Custom { input, backward }, rg)
    }

    /// Accumulates d(loss)/d(leaf) into every trainable leaf.
    ///
    /// Gradients add onto whatever earlier calls left; use
    /// [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        accumulate_reduced(ga, &g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        if sign > 0.0 {
                            accumulate_reduced(gb, &g);
                        } else {
                            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                            accumulate_reduced(gb, &neg);
                        }
                    }
                }
                Op::Mul(a, b, mode) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let (na, nb) = (av.len(), bv.len());
                    let at = |j: usize| match mode {
                        Broadcast::LeftRepeats => av[j % na],
                        _ => av[j],
                    };
                    let bt = |j: usize| match mode {
                        Broadcast::RightRepeats => bv[j % nb],
                        _ => bv[j],
                    };
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let prod: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * bt(j)).collect();
                        accumulate_reduced(ga, &prod);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let prod: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * at(j)).collect();
                        accumulate_reduced(gb, &prod);
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (d, x) in ga.iter_mut().zip(&g) {
                            *d += x * f;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bs = nodes[b.0].value.shape();
                    let (k, n) = (bs[0], bs[1]);
                    let m = av.len() / k;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        // ga[m,k] += g[m,n] · bᵀ
                        let bv = nodes[b.0].value.data();
                        gemm(m, n, k, &g, n, 1, bv, 1, n, 1.0, ga);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        // gb[k,n] += aᵀ · g
                        gemm(k, m, n, av, 1, k, &g, n, 1, 1.0, gb);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let sa = nodes[a.0].value.shape();
                    let r = sa.len();
                    let (m, k) = (sa[r - 2], sa[r - 1]);
                    let n = node.value.shape()[r - 1];
                    let batch = nodes[a.0].value.numel() / (m * k);
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            let gai = &mut ga[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // b stored [n,k]: ga += g · b
                                gemm(m, n, k, gi, n, 1, bi, k, 1, 1.0, gai);
                            } else {
                                // b stored [k,n]: ga += g · bᵀ
                                gemm(m, n, k, gi, n, 1, bi, 1, n, 1.0, gai);
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // gb[n,k] += gᵀ · a
                                gemm(n, m, k, gi, 1, n, ai, k, 1, 1.0, gbi);
                            } else {
                                // gb[k,n] += aᵀ · g
                                gemm(k, m, n, ai, 1, k, gi, n, 1, 1.0, gbi);
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let out = node.value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((d, x), y) in ga.iter_mut().zip(&g).zip(out) {
                            if *y > 0.0 {
                                *d += x;
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let out = node.value.data();
                    let n = node.value.last_dim();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((grow, yrow), drow) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                            let total: f64 = grow.iter().sum();
                            for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += gv - y.exp() * total;
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let out = node.value.data();
                    let n = node.value.last_dim();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((grow, yrow), drow) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                            for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (gv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let d = node.value.last_dim();
                    let gv = nodes[gain.0].value.data();
                    if let Some(gg) = slot(&mut grads, nodes, *gain) {
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((acc, gi), h) in gg.iter_mut().zip(grow).zip(hrow) {
                                *acc += gi * h;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for grow in g.chunks_exact(d) {
                            for (acc, gi) in gb.iter_mut().zip(grow) {
                                *acc += gi;
                            }
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let mut dh = vec![0.0; d];
                        for (((grow, hrow), drow), r) in g
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .zip(rstd)
                        {
                            for ((o, gi), w) in dh.iter_mut().zip(grow).zip(gv) {
                                *o = gi * w;
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for ((o, dhi), h) in drow.iter_mut().zip(&dh).zip(hrow) {
                                *o += r * (dhi - mean_dh - h * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = node.value.last_dim();
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        for (row, &id) in g.chunks_exact(d).zip(ids) {
                            for (acc, x) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    let row = shape[*axis] * inner;
                    for v in inputs {
                        let len = nodes[v.0].value.shape()[*axis] * inner;
                        if let Some(gv) = slot(&mut grads, nodes, *v) {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + len];
                                for (acc, x) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                    *acc += x;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = nodes[input.0].value.shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let full = in_shape[*axis];
                    if let Some(gi) = slot(&mut grads, nodes, *input) {
                        for o in 0..outer {
                            let off = (o * full + start) * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            for (acc, x) in gi[off..off + len * inner].iter_mut().zip(src) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for acc in ga.iter_mut() {
                            *acc += g[0] * scale;
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    if let Some(gi) = slot(&mut grads, nodes, *input) {
                        for ((acc, x), m) in gi.iter_mut().zip(&g).zip(mask) {
                            *acc += x * m;
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        accumulate_reduced(ga, &g);
                    }
                }
                Op::Permute { input, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute(&g, node.value.shape(), &inverse);
                    if let Some(gi) = slot(&mut grads, nodes, *input) {
                        accumulate_reduced(gi, &back);
                    }
                }
                Op::Custom { input, backward } => {
                    if let Some(gi) = slot(&mut grads, nodes, *input) {
                        backward(&g, gi);
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => accumulate_reduced(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Relu(_) => "relu",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Softmax(_) => "masked_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Dropout { .. } => "dropout",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Custom { .. } => "custom",
    }
}
