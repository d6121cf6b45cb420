//! Vector-level reverse-mode differentiation.
//!
//! A [`Tape`] records operations on dense vectors (scalars are length-1
//! vectors) over a borrowed set of parameter tensors. [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] shaped like the
//! parameters. Parameters enter the graph either through fused ops
//! ([`Tape::linear`], [`Tape::embed_sum`]) or as explicit leaves
//! ([`Tape::param`]).

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix (vectors are `cols == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Parameter-shaped gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            blocks: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.blocks.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flatten().copied()
    }

    /// Sums a sequence of gradients in iteration order.
    pub fn sum<'a>(params: &[Tensor], items: impl IntoIterator<Item = &'a Gradients>) -> Self {
        let mut acc = Self::zeros_like(params);
        for g in items {
            acc.add_assign(g);
        }
        acc
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Linear { w: usize, b: usize, x: usize },
    EmbedSum { table: usize, tokens: Vec<usize> },
    Tanh(usize),
    Concat(Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar { s: usize, v: usize },
    Sum(usize),
    Dot(usize, usize),
    SqNorm(usize),
    Norm(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

pub struct Tape<'p> {
    id: u64,
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [Tensor] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.check(v)].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &[f64] {
        &self.nodes[i].value
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        self.constant(value)
    }

    pub fn param(&mut self, block: usize) -> Var {
        let value = self.params[block].data.clone();
        self.push(Op::Param(block), value)
    }

    /// `W x + b` with `W` and `b` taken from parameter blocks.
    pub fn linear(&mut self, w: usize, b: usize, x: Var) -> Var {
        let xi = self.check(x);
        let (wt, bt) = (&self.params[w], &self.params[b]);
        let xv = self.val(xi);
        assert_eq!(wt.cols, xv.len(), "linear input width");
        let out = (0..wt.rows)
            .map(|r| {
                let row = wt.row(r);
                row.iter().zip(xv).fold(bt.data[r], |acc, (a, b)| acc + a * b)
            })
            .collect();
        self.push(Op::Linear { w, b, x: xi }, out)
    }

    /// Sum of the rows of `table` selected by `tokens`.
    pub fn embed_sum(&mut self, table: usize, tokens: &[usize]) -> Var {
        let t = &self.params[table];
        let mut out = vec![0.0; t.cols];
        for &tok in tokens {
            for (o, v) in out.iter_mut().zip(t.row(tok)) {
                *o += v;
            }
        }
        self.push(
            Op::EmbedSum {
                table,
                tokens: tokens.to_vec(),
            },
            out,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let out = self.val(xi).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(xi), out)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let out = idx.iter().flat_map(|&i| self.val(i).iter().copied()).collect();
        self.push(Op::Concat(idx), out)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let (ai, bi) = (self.check(a), self.check(b));
        let (av, bv) = (self.val(ai), self.val(bi));
        assert_eq!(av.len(), bv.len(), "elementwise length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        (ai, bi, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, out) = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(ai, bi), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, out) = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(ai, bi), out)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ai = self.check(a);
        let out = self.val(ai).iter().map(|v| v * k).collect();
        self.push(Op::Scale(ai, k), out)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let ai = self.check(a);
        let out = self.val(ai).iter().map(|v| v + k).collect();
        self.push(Op::AddConst(ai), out)
    }

    /// Scalar `s` times vector `v`.
    pub fn mul_scalar(&mut self, s: Var, v: Var) -> Var {
        let (si, vi) = (self.check(s), self.check(v));
        assert_eq!(self.val(si).len(), 1, "mul_scalar expects a scalar");
        let k = self.val(si)[0];
        let out = self.val(vi).iter().map(|x| k * x).collect();
        self.push(Op::MulScalar { s: si, v: vi }, out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let out = vec![self.val(ai).iter().sum()];
        self.push(Op::Sum(ai), out)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let d = self.val(ai).iter().zip(self.val(bi)).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(ai, bi), vec![d])
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let s = self.val(ai).iter().map(|x| x * x).sum();
        self.push(Op::SqNorm(ai), vec![s])
    }

    /// Euclidean norm; its gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let s = self.val(ai).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::Norm(ai), vec![s])
    }

    /// Sum of scalar nodes, left to right.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Option<Var> {
        let mut it = items.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, v| self.add(acc, v)))
    }

    /// Reverse pass from scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoGraph("tape is empty".into()));
        }
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::NoGraph("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::NoGraph("backward requires a scalar loss".into()));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        adj[loss.idx] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, g: impl Iterator<Item = f64>, len: usize) {
            match &mut adj[i] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                slot @ None => {
                    let mut v: Vec<f64> = g.collect();
                    debug_assert_eq!(v.len(), len);
                    v.resize(len, 0.0);
                    *slot = Some(v);
                }
            }
        }

        for i in (0..=loss.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(b) => {
                    grads.blocks[*b].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::Linear { w, b, x } => {
                    let wt = &self.params[*w];
                    let xv = &self.nodes[*x].value;
                    let gw = &mut grads.blocks[*w];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            let row = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                            row.iter_mut().zip(xv).for_each(|(a, xx)| *a += gr * xx);
                        }
                    }
                    grads.blocks[*b].iter_mut().zip(&g).for_each(|(a, y)| *a += y);
                    let mut gx = vec![0.0; wt.cols];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            gx.iter_mut().zip(wt.row(r)).for_each(|(a, w)| *a += gr * w);
                        }
                    }
                    acc(&mut adj, *x, gx.into_iter(), wt.cols);
                }
                Op::EmbedSum { table, tokens } => {
                    let cols = self.params[*table].cols;
                    let gt = &mut grads.blocks[*table];
                    for &tok in tokens {
                        gt[tok * cols..(tok + 1) * cols].iter_mut().zip(&g).for_each(|(a, y)| *a += y);
                    }
                }
                Op::Tanh(x) => {
                    let it = g.iter().zip(&node.value).map(|(gi, y)| gi * (1.0 - y * y));
                    acc(&mut adj, *x, it, g.len());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        acc(&mut adj, p, g[off..off + n].iter().copied(), n);
                        off += n;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.iter().copied(), g.len());
                    acc(&mut adj, *b, g.iter().copied(), g.len());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.iter().copied(), g.len());
                    acc(&mut adj, *b, g.iter().map(|x| -x), g.len());
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.iter().map(|x| x * k), g.len()),
                Op::AddConst(a) => acc(&mut adj, *a, g.iter().copied(), g.len()),
                Op::MulScalar { s, v } => {
                    let k = self.nodes[*s].value[0];
                    let vv = &self.nodes[*v].value;
                    let ds: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                    acc(&mut adj, *s, std::iter::once(ds), 1);
                    acc(&mut adj, *v, g.iter().map(|x| x * k), g.len());
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    acc(&mut adj, *a, std::iter::repeat_n(g[0], n), n);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut adj, *a, bv.iter().map(|y| g[0] * y), bv.len());
                    acc(&mut adj, *b, av.iter().map(|x| g[0] * x), av.len());
                }
                Op::SqNorm(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *a, av.iter().map(|x| 2.0 * g[0] * x), av.len());
                }
                Op::Norm(a) => {
                    let av = &self.nodes[*a].value;
                    let n = node.value[0];
                    let k = if n > 0.0 { g[0] / n } else { 0.0 };
                    acc(&mut adj, *a, av.iter().map(|x| k * x), av.len());
                }
            }
        }
        Ok(grads)
    }
}
