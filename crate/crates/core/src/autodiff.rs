//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the computed value and enough saved state to run its backward rule.
//! Handles to nodes are [`Var`]s. Because nodes are appended in evaluation
//! order, the tape is already topologically sorted; [`Tape::backward`]
//! walks it once in reverse and consumes it.
//!
//! Parameters enter a tape through [`Tape::param`], which records each
//! [`ParamId`] at most once per tape so its gradient is accumulated in a
//! single slot.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Maps an output element of a broadcast op to the flat index of its source.
#[derive(Clone, Debug)]
enum SourceMap {
    Same,
    /// The source repeats with this period (broadcast over leading axes).
    Tile(usize),
    Explicit(Vec<usize>),
}

impl SourceMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            SourceMap::Same => i,
            SourceMap::Tile(period) => i % period,
            SourceMap::Explicit(map) => map[i],
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        a_map: SourceMap,
        b_map: SourceMap,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        winners: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        len: usize,
    },
    Repeat {
        x: Var,
        copies: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        row_weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Single writer; freed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad_shape(a, rank), pad_shape(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn pad_shape(s: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1; rank - s.len()];
    padded.extend_from_slice(s);
    padded
}

fn source_map(out: &[usize], src: &[usize]) -> SourceMap {
    let src = pad_shape(src, out.len());
    if src == out {
        return SourceMap::Same;
    }
    let first = src.iter().position(|&e| e != 1).unwrap_or(src.len());
    if src[first..] == out[first..] {
        return SourceMap::Tile(src[first..].iter().product::<usize>().max(1));
    }
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for ax in (0..src.len()).rev() {
        strides[ax] = if src[ax] == 1 { 0 } else { acc };
        acc *= src[ax];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0; out.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            index[ax] += 1;
            if index[ax] < out[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    SourceMap::Explicit(map)
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn var(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a registered parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Matrix product over the last axis of `a`: `[.., k] x [k, n] -> [.., n]`.
    ///
    /// Leading axes of `a` are treated as rows, so a `[N, K, c]` neighbor
    /// tensor runs through a shared pointwise layer without reshaping.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = sa.iter().product::<usize>() / k;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: "elementwise",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let a_map = source_map(&shape, sa);
        let b_map = source_map(&shape, sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: usize = shape.iter().product();
        let out: Vec<f64> = (0..total)
            .map(|i| {
                let (x, y) = (av[a_map.at(i)], bv[b_map.at(i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            &[a, b],
        ))
    }

    /// Elementwise sum with right-aligned broadcasting over extent-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Reduces `axis` to extent 1 by maximum. Returns the pooled values and,
    /// per output slot, the winning position along `axis` (lowest on ties).
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "max_pool_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut values = Vec::with_capacity(outer * inner);
        let mut winners = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for j in 0..inner {
                let mut best = 0;
                let mut best_val = data[base + j];
                for l in 1..extent {
                    let v = data[base + l * inner + j];
                    if v > best_val {
                        best = l;
                        best_val = v;
                    }
                }
                values.push(best_val);
                argmax.push(best);
                winners.push(base + best * inner + j);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(out_shape, values)?;
        Ok((self.push(value, Op::MaxPool { x, winners }, &[x]), argmax))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total_extent = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total_extent += s[axis];
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let chunks: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for (&x, &chunk) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_extent;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                chunks,
            },
            xs,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "slice_axis",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Index {
                op: "slice_axis",
                index: start + len,
                extent: shape[axis],
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let (src_chunk, offset, chunk) = (extent * inner, start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let s = o * src_chunk + offset;
            out.extend_from_slice(&data[s..s + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                src_chunk,
                offset,
                len: chunk,
            },
            &[x],
        ))
    }

    /// Stacks `copies` copies of a `[1, ..]` tensor along the first axis.
    pub fn repeat_rows(&mut self, x: Var, copies: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape[0] != 1 {
            return Err(Error::Shape {
                op: "repeat_rows",
                lhs: shape,
                rhs: vec![1],
            });
        }
        if copies == 0 {
            return Err(Error::invalid("repeat_rows: copy count must be at least 1"));
        }
        let row = self.value(x).data();
        let out = row.repeat(copies);
        let mut out_shape = shape;
        out_shape[0] = copies;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Repeat { x, copies }, &[x]))
    }

    /// Row lookup `x[rows[i]]`. `lead` is the shape of the index array
    /// (`[m]` or `[m, k]`); the result has shape `lead ++ x.shape[1..]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize], lead: &[usize]) -> Result<Var> {
        if lead.iter().product::<usize>() != rows.len() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: lead.to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: n,
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&data[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                rows: rows.to_vec(),
                row_len,
            },
            &[x],
        ))
    }

    /// Inverted dropout. Identity (no node recorded) outside training or at
    /// rate zero; in training each element is zeroed with probability `rate`
    /// and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Weighted mean negative log-likelihood of `labels` under
    /// `softmax(logits)`, evaluated with a max-shifted log-sum-exp.
    ///
    /// With `class_weights = None` every row has weight one and the result is
    /// the plain mean over rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: vec![classes],
                    rhs: vec![w.len()],
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: classes,
            });
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(data.len());
        let mut row_weights = Vec::with_capacity(labels.len());
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * classes..(i + 1) * classes];
            let shift = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - shift).exp()).sum();
            let log_denom = denom.ln();
            probs.extend(row.iter().map(|v| (v - shift).exp() / denom));
            let w = class_weights.map_or(1.0, |w| w[label]);
            loss += w * (log_denom - (row[label] - shift));
            total_weight += w;
            row_weights.push(w);
        }
        if total_weight <= 0.0 {
            return Err(Error::invalid("cross_entropy: total class weight is zero"));
        }
        let value = Tensor::scalar(loss / total_weight);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                row_weights,
                probs,
                total_weight,
            },
            &[logits],
        ))
    }

    /// Runs every recorded backward rule in reverse order from a scalar loss.
    ///
    /// Every differentiable leaf and every parameter on the tape ends up with
    /// a gradient; those the loss does not reach get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss_shape.to_vec(),
                rhs: vec![1],
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let arp = av[r * k + p];
                                if arp == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += arp * gv;
                                }
                            }
                        }
                    }
                }
                Op::Binary {
                    kind,
                    a,
                    b,
                    a_map,
                    b_map,
                } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for (j, &gj) in g.iter().enumerate() {
                            ga[a_map.at(j)] += match kind {
                                Binary::Add | Binary::Sub => gj,
                                Binary::Mul => gj * bv[b_map.at(j)],
                            };
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for (j, &gj) in g.iter().enumerate() {
                            gb[b_map.at(j)] += match kind {
                                Binary::Add => gj,
                                Binary::Sub => -gj,
                                Binary::Mul => gj * av[a_map.at(j)],
                            };
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (o, gj) in gx.iter_mut().zip(&g) {
                            *o += factor * gj;
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for ((o, gj), &v) in gx.iter_mut().zip(&g).zip(xv) {
                            if v > 0.0 {
                                *o += gj;
                            }
                        }
                    }
                }
                Op::MaxPool { x, winners } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (&w, gj) in winners.iter().zip(&g) {
                            gx[w] += gj;
                        }
                    }
                }
                Op::Concat { xs, outer, chunks } => {
                    let total: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&x, &chunk) in xs.iter().zip(chunks) {
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                for (d, s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += chunk;
                    }
                }
                Op::Slice {
                    x,
                    outer,
                    src_chunk,
                    offset,
                    len,
                } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for o in 0..*outer {
                            let dst = &mut gx[o * src_chunk + offset..o * src_chunk + offset + len];
                            for (d, s) in dst.iter_mut().zip(&g[o * len..(o + 1) * len]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Repeat { x, copies } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let row = gx.len();
                        for c in 0..*copies {
                            for (d, s) in gx.iter_mut().zip(&g[c * row..(c + 1) * row]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Gather { x, rows, row_len } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (i, &r) in rows.iter().enumerate() {
                            let dst = &mut gx[r * row_len..(r + 1) * row_len];
                            for (d, s) in dst.iter_mut().zip(&g[i * row_len..(i + 1) * row_len]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for ((o, gj), m) in gx.iter_mut().zip(&g).zip(mask) {
                            *o += gj * m;
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for o in gx.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (o, gj) in gx.iter_mut().zip(&g) {
                            *o += gj;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    row_weights,
                    probs,
                    total_weight,
                } => {
                    if let Some(gl) = slot(&mut grads, &nodes, *logits) {
                        let classes = probs.len() / labels.len();
                        for (r, (&label, &w)) in labels.iter().zip(row_weights).enumerate() {
                            let scale = g[0] * w / total_weight;
                            for c in 0..classes {
                                let target = if c == label { 1.0 } else { 0.0 };
                                gl[r * classes + c] += scale * (probs[r * classes + c] - target);
                            }
                        }
                    }
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                let leaf = node.requires_grad && matches!(node.op, Op::Leaf | Op::Param);
                match (leaf, g) {
                    (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                    (true, None) => Some(Tensor::zeros(node.value.shape())),
                    (false, _) => None,
                }
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }
}

/// Gradients of one backward pass, keyed by leaf [`Var`] or [`ParamId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf created by [`Tape::var`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, if it was placed on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// One gradient per registered parameter, in registry order. Parameters
    /// that never entered the tape get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect()
    }
}
