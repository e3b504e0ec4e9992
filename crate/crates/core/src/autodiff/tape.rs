//! Reverse-mode gradient tape.
//!
//! Forward ops record one [`Op`] node each; [`Tape::backward`] replays the
//! node list in reverse, applying each op's vector-Jacobian product. A tape
//! is built once and consumed by a single backward pass; the next training
//! step starts a fresh tape.

use std::sync::{Arc, Mutex};

use super::raw;
use crate::error::{Error, Result};

/// Parent handle: `None` means the operand does not participate in gradients.
pub(crate) type P = Option<usize>;
/// Saved operand values (shared with the tensors that produced them).
pub(crate) type V = Arc<Vec<f64>>;

/// Sentinel gather index producing a zero output element with no gradient.
pub const GATHER_PAD: usize = usize::MAX;

pub(crate) enum Op {
    Leaf,
    Add { a: P, b: P },
    Sub { a: P, b: P },
    Mul { a: P, av: V, b: P, bv: V },
    Affine { a: P, scale: f64 },
    Matmul { a: P, av: V, b: P, bv: V, m: usize, k: usize, n: usize },
    AddRow { a: P, b: P, rows: usize, cols: usize },
    MulCol { a: P, av: V, b: P, bv: V, rows: usize, cols: usize },
    Relu { a: P, av: V },
    Abs { a: P, av: V },
    SqrtZ { a: P, out: V },
    Exp { a: P, out: V },
    Recip { a: P, out: V },
    Sin { a: P, av: V },
    Cos { a: P, av: V },
    SoftmaxRows { a: P, out: V, rows: usize, cols: usize, temp: f64 },
    Sum { a: P, len: usize },
    RowSum { a: P, rows: usize, cols: usize },
    SumGroups { a: P, groups: usize, group: usize, cols: usize },
    Gather { a: P, idx: Arc<Vec<usize>>, in_len: usize },
    ConcatCols { parts: Vec<(P, usize)>, rows: usize },
    Bilinear2d { src: P, sv: V, h: usize, w: usize, xs: P, xv: V, ys: P, yv: V },
    BoxSum { a: P, h: usize, w: usize, r: usize },
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Op>,
    consumed: bool,
}

/// Shared handle to one recording. Clones refer to the same tape.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Arc<Mutex<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(Mutex::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op) -> Result<usize> {
        let mut inner = self.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        inner.nodes.push(op);
        Ok(inner.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Consumes the tape: a second call (or further recording) errors.
    pub fn backward(&self, loss: &crate::autodiff::Tensor) -> Result<Gradients> {
        let loss_id = match loss.ctx() {
            Some((tape, id)) if tape.same_tape(self) => id,
            Some(_) => return Err(Error::Tape("loss recorded on a different tape".into())),
            None => return Err(Error::Tape("loss is not on the tape".into())),
        };
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let is_leaf = matches!(inner.nodes[id], Op::Leaf);
            let g = if is_leaf {
                continue; // leaves keep their gradient
            } else {
                grads[id].take().unwrap()
            };
            backprop_node(&inner.nodes[id], &g, &mut grads);
        }

        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], parent: P, len: usize, add: impl Fn(&mut [f64])) {
    if let Some(p) = parent {
        let slot = grads[p].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }
}

fn backprop_node(op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            acc(grads, *a, g.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, *b, g.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
        }
        Op::Sub { a, b } => {
            acc(grads, *a, g.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, *b, g.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si -= gi;
                }
            });
        }
        Op::Mul { a, av, b, bv } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            acc(grads, *b, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::Affine { a, scale } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * scale;
                }
            });
        }
        Op::Matmul { a, av, b, bv, m, k, n } => {
            acc(grads, *a, m * k, |s| raw::matmul_bt_acc(s, g, bv, *m, *k, *n));
            acc(grads, *b, k * n, |s| raw::matmul_at_acc(s, av, g, *m, *k, *n));
        }
        Op::AddRow { a, b, rows, cols } => {
            acc(grads, *a, rows * cols, |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, *b, *cols, |s| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        s[j] += g[i * cols + j];
                    }
                }
            });
        }
        Op::MulCol { a, av, b, bv, rows, cols } => {
            acc(grads, *a, rows * cols, |s| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        s[i * cols + j] += g[i * cols + j] * bv[i];
                    }
                }
            });
            acc(grads, *b, *rows, |s| {
                for i in 0..*rows {
                    let mut acc = 0.0;
                    for j in 0..*cols {
                        acc += g[i * cols + j] * av[i * cols + j];
                    }
                    s[i] += acc;
                }
            });
        }
        Op::Relu { a, av } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Abs { a, av } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    } else if av[i] < 0.0 {
                        s[i] -= g[i];
                    }
                }
            });
        }
        Op::SqrtZ { a, out } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    if out[i] > 0.0 {
                        s[i] += g[i] / (2.0 * out[i]);
                    }
                }
            });
        }
        Op::Exp { a, out } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i];
                }
            });
        }
        Op::Recip { a, out } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] -= g[i] * out[i] * out[i];
                }
            });
        }
        Op::Sin { a, av } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * av[i].cos();
                }
            });
        }
        Op::Cos { a, av } => {
            acc(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] -= g[i] * av[i].sin();
                }
            });
        }
        Op::SoftmaxRows { a, out, rows, cols, temp } => {
            acc(grads, *a, rows * cols, |s| {
                for i in 0..*rows {
                    let srow = &out[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..*cols {
                        s[i * cols + j] += (grow[j] - dot) * srow[j] / temp;
                    }
                }
            });
        }
        Op::Sum { a, len } => {
            acc(grads, *a, *len, |s| {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            });
        }
        Op::RowSum { a, rows, cols } => {
            acc(grads, *a, rows * cols, |s| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        s[i * cols + j] += g[i];
                    }
                }
            });
        }
        Op::SumGroups { a, groups, group, cols } => {
            acc(grads, *a, groups * group * cols, |s| {
                for gi in 0..*groups {
                    let grow = &g[gi * cols..(gi + 1) * cols];
                    for r in 0..*group {
                        let base = (gi * group + r) * cols;
                        for j in 0..*cols {
                            s[base + j] += grow[j];
                        }
                    }
                }
            });
        }
        Op::Gather { a, idx, in_len } => {
            acc(grads, *a, *in_len, |s| {
                for (i, &src) in idx.iter().enumerate() {
                    if src != GATHER_PAD {
                        s[src] += g[i];
                    }
                }
            });
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|(_, c)| c).sum();
            let mut offset = 0;
            for (parent, cols) in parts {
                acc(grads, *parent, rows * cols, |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[i * total + offset + j];
                        }
                    }
                });
                offset += cols;
            }
        }
        Op::Bilinear2d { src, sv, h, w, xs, xv, ys, yv } => {
            let inb = |x: f64, y: f64| {
                (0.0..=(*w - 1) as f64).contains(&x) && (0.0..=(*h - 1) as f64).contains(&y)
            };
            acc(grads, *src, h * w, |s| {
                for i in 0..xv.len() {
                    let (x, y) = (xv[i], yv[i]);
                    if !inb(x, y) {
                        continue;
                    }
                    let x0 = x.floor() as usize;
                    let y0 = y.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let fx = x - x0 as f64;
                    let fy = y - y0 as f64;
                    s[y0 * w + x0] += g[i] * (1.0 - fx) * (1.0 - fy);
                    s[y0 * w + x1] += g[i] * fx * (1.0 - fy);
                    s[y1 * w + x0] += g[i] * (1.0 - fx) * fy;
                    s[y1 * w + x1] += g[i] * fx * fy;
                }
            });
            let spatial = |s: &mut [f64], axis: usize| {
                for i in 0..xv.len() {
                    let (x, y) = (xv[i], yv[i]);
                    if !inb(x, y) {
                        continue;
                    }
                    let (dx, dy) = raw::bilerp_grad(sv, *h, *w, x, y);
                    s[i] += g[i] * if axis == 0 { dx } else { dy };
                }
            };
            acc(grads, *xs, xv.len(), |s| spatial(s, 0));
            acc(grads, *ys, yv.len(), |s| spatial(s, 1));
        }
        Op::BoxSum { a, h, w, r } => {
            acc(grads, *a, h * w, |s| {
                // Adjoint of a valid box sum: box-sum the zero-padded gradient.
                let oh = h - 2 * r;
                let ow = w - 2 * r;
                let ph = oh + 4 * r;
                let pw = ow + 4 * r;
                let mut padded = vec![0.0; ph * pw];
                for y in 0..oh {
                    for x in 0..ow {
                        padded[(y + 2 * r) * pw + (x + 2 * r)] = g[y * ow + x];
                    }
                }
                let full = raw::box_sum_valid(&padded, ph, pw, *r);
                for (si, fi) in s.iter_mut().zip(&full) {
                    *si += fi;
                }
            });
        }
    }
}

/// Result of a backward pass: per-leaf gradients keyed by tape node id.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is a leaf of this
    /// tape that the loss reaches.
    pub fn get(&self, t: &crate::autodiff::Tensor) -> Option<&[f64]> {
        match t.ctx() {
            Some((tape, id)) if tape.same_tape(&self.tape) => {
                self.grads.get(id).and_then(|g| g.as_deref())
            }
            _ => None,
        }
    }

    /// Like [`Gradients::get`] but treats a missing gradient as an error.
    pub fn wrt(&self, t: &crate::autodiff::Tensor) -> Result<&[f64]> {
        self.get(t)
            .ok_or_else(|| Error::Tape("no gradient recorded for tensor".into()))
    }
}
