//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! bound as leaves with [`Tape::param`]; the borrow keeps them alive and
//! unmodified for the tape's lifetime. [`Tape::backward`] consumes the tape
//! and returns [`Gradients`], which are then written back into the bound
//! parameters with [`Gradients::apply_to`].

use std::collections::HashMap;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Natural-log floor applied inside cross-entropy and KL terms (`ln 1e-12`).
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a tape.
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
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        active: Vec<bool>,
    },
    KlDivergence {
        p: Var,
        q: Var,
        probs_p: Vec<f64>,
        probs_q: Vec<f64>,
        active_p: Vec<bool>,
        active_q: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder for a single forward/backward pass.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    matmuls: usize,
    _params: PhantomData<&'p Tensor>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            matmuls: 0,
            _params: PhantomData,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a parameter tensor as a leaf. Binding the same tensor twice
    /// returns the same variable, so shared weights accumulate one gradient.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        if let Some(&v) = self.bound.get(&addr(t)) {
            return v;
        }
        let v = self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf);
        self.bound.insert(addr(t), v);
        v
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, false, Op::Leaf)
    }

    /// Copies a value into a fresh non-differentiable leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Number of matrix multiplications recorded so far.
    pub fn matmul_count(&self) -> usize {
        self.matmuls
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if trans_b {
            gemm_nt(av, bv, &mut out, m, k, n);
        } else {
            gemm_nn(av, bv, &mut out, m, k, n);
        }
        self.matmuls += 1;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, trans_b }))
    }

    /// Batched `a · b` (or `a · bᵀ`) over the leading dimension of 3-d operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; nb * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..nb {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        self.matmuls += 1;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![nb, m, n], out, rg, Op::BatchMatMul { a, b, trans_b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != n {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bv = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = sx.to_vec();
        Ok(self.push(shape, value, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, Op::Scale { x, c })
    }

    /// Exact GeLU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, Op::Gelu(x))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("non-scalar");
        let mut value = self.value(x).to_vec();
        value.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, Op::Softmax(x))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().expect("non-scalar");
        for p in [gain, bias] {
            if self.shape(p).iter().product::<usize>() != n {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / n;
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            sx,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let value = transpose(self.value(x), s[0], s[1]);
        let rg = self.rg(x);
        Ok(self.push(vec![s[1], s[0]], value, rg, Op::Transpose(x)))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * seq || !s[1].is_multiple_of(heads) {
            return Err(Error::dim("split_heads", &s, &[batch, seq, heads]));
        }
        let dh = s[1] / heads;
        let value = permute_heads(self.value(x), batch, seq, heads, dh, true);
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * heads, seq, dh],
            value,
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::dim("merge_heads", &s, &[batch, seq, heads]));
        }
        let dh = s[2];
        let value = permute_heads(self.value(x), batch, seq, heads, dh, false);
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * seq, heads * dh],
            value,
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather", &s, &[2]));
        }
        let d = s[1];
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(Error::Index {
                    what: "gather",
                    index: id,
                    bound: s[0],
                });
            }
            value.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks rows of a `[n, d]` matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("select_rows", &s, &[2]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Index {
                what: "select_rows",
                index: bad,
                bound: s[0],
            });
        }
        let d = s[1];
        let xv = self.value(x);
        let value = rows
            .iter()
            .flat_map(|&r| xv[r * d..(r + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), d],
            value,
            rg,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, with the log
    /// clamped below at `ln PROB_FLOOR`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: bad,
                bound: c,
            });
        }
        let floor = PROB_FLOOR.ln();
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut active = vec![false; b];
        let mut total = 0.0;
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let ls = log_softmax(row);
            let ly = ls[labels[r]];
            active[r] = ly > floor;
            total -= ly.max(floor);
            for (p, l) in probs[r * c..(r + 1) * c].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                active,
            },
        ))
    }

    /// Mean over the batch of `KL(softmax(p) ‖ softmax(q))`, logs clamped at
    /// `ln PROB_FLOOR`. Gradients flow into both arguments.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || s != self.shape(q) {
            return Err(Error::dim("kl_divergence", &s, self.shape(q)));
        }
        let (b, c) = (s[0], s[1]);
        let floor = PROB_FLOOR.ln();
        let (pv, qv) = (self.value(p), self.value(q));
        let mut probs_p = vec![0.0; b * c];
        let mut probs_q = vec![0.0; b * c];
        let mut active_p = vec![false; b * c];
        let mut active_q = vec![false; b * c];
        let mut total = 0.0;
        for r in 0..b {
            let lp = log_softmax(&pv[r * c..(r + 1) * c]);
            let lq = log_softmax(&qv[r * c..(r + 1) * c]);
            for i in 0..c {
                let idx = r * c + i;
                let pi = lp[i].exp();
                probs_p[idx] = pi;
                probs_q[idx] = lq[i].exp();
                active_p[idx] = lp[i] > floor;
                active_q[idx] = lq[i] > floor;
                total += pi * (lp[i].max(floor) - lq[i].max(floor));
            }
        }
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            rg,
            Op::KlDivergence {
                p,
                q,
                probs_p,
                probs_q,
                active_p,
                active_q,
            },
        ))
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            bound: self.bound,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                if self.rg(*a) {
                    // dA = G · Bᵀ (or G · B when B was transposed)
                    let mut da = vec![0.0; m * k];
                    if *trans_b {
                        gemm_nn(g, self.value(*b), &mut da, m, n, k);
                    } else {
                        gemm_nt(g, self.value(*b), &mut da, m, n, k);
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; sb[0] * sb[1]];
                    if *trans_b {
                        // dB = Gᵀ · A
                        let gt = transpose(g, m, n);
                        gemm_nn(&gt, self.value(*a), &mut db, n, m, k);
                    } else {
                        let at = transpose(self.value(*a), m, k);
                        gemm_nn(&at, g, &mut db, k, m, n);
                    }
                    acc(*b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (nb, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; nb * m * k];
                    for i in 0..nb {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let di = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bi, di, m, n, k);
                        } else {
                            gemm_nt(gi, bi, di, m, n, k);
                        }
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; nb * k * n];
                    for i in 0..nb {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            let gt = transpose(gi, m, n);
                            gemm_nn(&gt, ai, di, n, m, k);
                        } else {
                            let at = transpose(ai, m, k);
                            gemm_nn(&at, gi, di, k, m, n);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias { x, bias } => {
                acc(*x, g.to_vec());
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*bias, db);
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, g.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((y, gr), d) in node
                    .value
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        d[i] = y[i] * (gr[i] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = self.value(*gain);
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = k * (n as f64 * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                }
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let s = &node.shape;
                acc(*x, transpose(g, s[0], s[1]));
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.shape[2];
                acc(*x, permute_heads(g, *batch, *seq, *heads, dh, false));
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.shape[1] / heads;
                acc(*x, permute_heads(g, *batch, *seq, *heads, dh, true));
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                acc(*table, dt);
            }
            Op::SelectRows { x, rows } => {
                let d = node.shape[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (row, &r) in g.chunks(d).zip(rows) {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                active,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl = vec![0.0; probs.len()];
                for r in 0..b {
                    if !active[r] {
                        continue;
                    }
                    for i in 0..c {
                        let onehot = if i == labels[r] { 1.0 } else { 0.0 };
                        dl[r * c + i] = scale * (probs[r * c + i] - onehot);
                    }
                }
                acc(*logits, dl);
            }
            Op::KlDivergence {
                p,
                q,
                probs_p,
                probs_q,
                active_p,
                active_q,
            } => {
                let s = self.shape(*p);
                let (b, c) = (s[0], s[1]);
                let scale = g[0] / b as f64;
                let floor = PROB_FLOOR.ln();
                if self.rg(*p) {
                    let mut dp = vec![0.0; b * c];
                    for r in 0..b {
                        let range = r * c..(r + 1) * c;
                        let pr = &probs_p[range.clone()];
                        let qr = &probs_q[range.clone()];
                        // dKL/dp_i, then through the softmax Jacobian.
                        let gp: Vec<f64> = (0..c)
                            .map(|i| {
                                let idx = r * c + i;
                                let lp = if active_p[idx] { pr[i].ln() } else { floor };
                                let lq = if active_q[idx] { qr[i].ln() } else { floor };
                                lp - lq + if active_p[idx] { 1.0 } else { 0.0 }
                            })
                            .collect();
                        let dot: f64 = pr.iter().zip(&gp).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            dp[r * c + i] = scale * pr[i] * (gp[i] - dot);
                        }
                    }
                    acc(*p, dp);
                }
                if self.rg(*q) {
                    let mut dq = vec![0.0; b * c];
                    for r in 0..b {
                        let pr = &probs_p[r * c..(r + 1) * c];
                        let qr = &probs_q[r * c..(r + 1) * c];
                        let act = &active_q[r * c..(r + 1) * c];
                        let mass: f64 = (0..c).filter(|&i| act[i]).map(|i| pr[i]).sum();
                        for i in 0..c {
                            let own = if act[i] { pr[i] } else { 0.0 };
                            dq[r * c + i] = scale * (qr[i] * mass - own);
                        }
                    }
                    acc(*q, dq);
                }
            }
        }
    }
}

/// Gradients produced by one backward pass, keyed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of a leaf variable, when it requires one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound parameter tensor.
    pub fn for_param(&self, t: &Tensor) -> Option<&[f64]> {
        self.bound.get(&addr(t)).and_then(|&v| self.wrt(v))
    }

    /// Accumulates this pass's gradient into `t.grad`. Frozen tensors end
    /// up with no gradient buffer.
    pub fn apply_to(&self, t: &mut Tensor) {
        if !t.requires_grad {
            t.grad = None;
            return;
        }
        if let Some(g) = self.for_param(t) {
            let g = g.to_vec();
            t.accumulate_grad(&g);
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `out += a[m,k] · b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m,k] · b[n,k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Moves between `[b, s, h, dh]` and `[b, h, s, dh]` layouts.
fn permute_heads(x: &[f64], b: usize, s: usize, h: usize, dh: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for si in 0..s {
            for hi in 0..h {
                let merged = ((bi * s + si) * h + hi) * dh;
                let split_at = ((bi * h + hi) * s + si) * dh;
                let (src, dst) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}
