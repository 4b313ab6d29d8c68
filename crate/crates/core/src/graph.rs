//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the tape in reverse from caller-supplied output gradients; losses are
//! computed outside the graph and enter as those seeds.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, ConvGeom};
use crate::error::{bail, Result};
use crate::math;
use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Embed { table: Var, labels: Vec<usize> },
    FoldDepth(Var),
    UnfoldDepth(Var),
    GlobalAvgPool(Var),
    Channels { x: Var, start: usize },
    IntervalHead { x: Var, depth: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv_transpose3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + math::exp(-v)));
        self.push(out, Op::Sigmoid(x))
    }

    /// Smooth rectifier `ln(1 + e^x)`; unlike ReLU its gradient never vanishes exactly.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Concatenate rank-5 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let [n, _, d, h, w] = self.value(first).dims5()?;
        let sp = d * h * w;
        let mut total = 0;
        for &p in parts {
            let [pn, pc, pd, ph, pw] = self.value(p).dims5()?;
            if (pn, pd, ph, pw) != (n, d, h, w) {
                bail!(Shape, "concat extents disagree: {:?} vs {:?}", self.value(p).shape(), self.value(first).shape());
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * sp);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[i * c * sp..(i + 1) * c * sp]);
            }
        }
        let out = Tensor::new(&[n, total, d, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Look up one row of `table` (`[rows, E]`) per batch item and broadcast it over
    /// `spatial`, giving `[labels.len(), E, d, h, w]`.
    pub fn embed(&mut self, table: Var, labels: &[usize], spatial: [usize; 3]) -> Result<Var> {
        let t = self.value(table);
        let &[rows, e] = t.shape() else {
            bail!(Shape, "embedding table must be rank 2, got {:?}", t.shape());
        };
        let sp: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(labels.len() * e * sp);
        for &l in labels {
            if l >= rows {
                bail!(OutOfRange, "embedding label {} >= {}", l, rows);
            }
            for j in 0..e {
                let v = t.data()[l * e + j];
                data.extend(core::iter::repeat_n(v, sp));
            }
        }
        let out = Tensor::new(&[labels.len(), e, spatial[0], spatial[1], spatial[2]], data)?;
        Ok(self.push(out, Op::Embed { table, labels: labels.to_vec() }))
    }

    /// `[N, C, D, H, W] → [N·D, C, 1, H, W]`: every depth slice becomes its own batch item.
    pub fn fold_depth(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let src = self.value(x).data();
        let hw = h * w;
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                for z in 0..d {
                    let s = ((i * c + ch) * d + z) * hw;
                    let t = ((i * d + z) * c + ch) * hw;
                    data[t..t + hw].copy_from_slice(&src[s..s + hw]);
                }
            }
        }
        let out = Tensor::new(&[n * d, c, 1, h, w], data)?;
        Ok(self.push(out, Op::FoldDepth(x)))
    }

    /// Inverse of [`Graph::fold_depth`] for batch size `n`.
    pub fn unfold_depth(&mut self, x: Var, n: usize) -> Result<Var> {
        let [nd, c, one, h, w] = self.value(x).dims5()?;
        if one != 1 || n == 0 || nd % n != 0 {
            bail!(Shape, "cannot unfold {:?} into batch {}", self.value(x).shape(), n);
        }
        let d = nd / n;
        let out = Tensor::new(&[n, c, d, h, w], unfold(self.value(x).data(), n, c, d, h * w))?;
        Ok(self.push(out, Op::UnfoldDepth(x)))
    }

    /// Mean over the three spatial axes: `[N, C, D, H, W] → [N, C, 1, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let sp = d * h * w;
        let data = self.value(x).data().chunks(sp).map(|ch| ch.iter().sum::<f64>() / sp as f64).collect();
        let out = Tensor::new(&[n, c, 1, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Channels `start..start+len` of a rank-5 tensor.
    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if start + len > c {
            bail!(Shape, "channel range {}..{} exceeds {}", start, start + len, c);
        }
        let sp = d * h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * sp);
        for i in 0..n {
            data.extend_from_slice(&src[(i * c + start) * sp..(i * c + start + len) * sp]);
        }
        let out = Tensor::new(&[n, len, d, h, w], data)?;
        Ok(self.push(out, Op::Channels { x, start }))
    }

    /// Map head activations `[N, 2, 1, 1, 1]` holding `(s, len)` to `[N, 2]` slice
    /// indices `(s·depth, (s + len)·depth)`.
    pub fn interval_head(&mut self, x: Var, depth: f64) -> Result<Var> {
        let t = self.value(x);
        let [n, two, ..] = t.dims5()?;
        if two != 2 || t.len() != 2 * n {
            bail!(Shape, "interval head expects [N, 2, 1, 1, 1], got {:?}", t.shape());
        }
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (s, l) = (t.data()[2 * i], t.data()[2 * i + 1]);
            data.push(s * depth);
            data.push((s + l) * depth);
        }
        let out = Tensor::new(&[n, 2], data)?;
        Ok(self.push(out, Op::IntervalHead { x, depth }))
    }

    /// Backpropagate the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                bail!(Shape, "seed gradient {:?} does not match value {:?}", g.shape(), self.value(*v).shape());
            }
            accumulate(&mut grads, *v, (*g).clone())?;
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv3d_backward(self.value(*x), self.value(*w), geom, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv_transpose3d_backward(self.value(*x), self.value(*w), geom, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softplus(x) => {
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d *= 1.0 / (1.0 + math::exp(-v));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Concat(parts) => {
                    let [n, total, d, h, w] = g.dims5()?;
                    let sp = d * h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        let mut part = Vec::with_capacity(n * c * sp);
                        for j in 0..n {
                            let base = (j * total + offset) * sp;
                            part.extend_from_slice(&g.data()[base..base + c * sp]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, Tensor::new(&[n, c, d, h, w], part)?)?;
                    }
                }
                Op::Embed { table, labels } => {
                    let e = self.value(*table).shape()[1];
                    let sp = g.len() / (labels.len() * e).max(1);
                    let mut dt = Tensor::zeros_like(self.value(*table));
                    for (j, &l) in labels.iter().enumerate() {
                        for k in 0..e {
                            let base = (j * e + k) * sp;
                            dt.data_mut()[l * e + k] += g.data()[base..base + sp].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::FoldDepth(x) => {
                    let [n, c, d, h, w] = self.value(*x).dims5()?;
                    let dx = Tensor::new(&[n, c, d, h, w], unfold(g.data(), n, c, d, h * w))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::UnfoldDepth(x) => {
                    let [n, c, d, h, w] = g.dims5()?;
                    let hw = h * w;
                    let mut data = vec![0.0; g.len()];
                    for j in 0..n {
                        for ch in 0..c {
                            for z in 0..d {
                                let s = ((j * c + ch) * d + z) * hw;
                                let t = ((j * d + z) * c + ch) * hw;
                                data[t..t + hw].copy_from_slice(&g.data()[s..s + hw]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape(), data)?)?;
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x);
                    let [_, _, d, h, w] = xs.dims5()?;
                    let sp = d * h * w;
                    let mut dx = Tensor::zeros_like(xs);
                    for (chunk, gv) in dx.data_mut().chunks_mut(sp).zip(g.data()) {
                        chunk.fill(gv / sp as f64);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Channels { x, start } => {
                    let xs = self.value(*x);
                    let [n, c, d, h, w] = xs.dims5()?;
                    let len = g.shape()[1];
                    let sp = d * h * w;
                    let mut dx = Tensor::zeros_like(xs);
                    for j in 0..n {
                        let dst = (j * c + start) * sp;
                        dx.data_mut()[dst..dst + len * sp].copy_from_slice(&g.data()[j * len * sp..(j + 1) * len * sp]);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::IntervalHead { x, depth } => {
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    for (j, pair) in g.data().chunks(2).enumerate() {
                        dx.data_mut()[2 * j] = depth * (pair[0] + pair[1]);
                        dx.data_mut()[2 * j + 1] = depth * pair[1];
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Collect gradients of every parameter leaf into `into`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut ParamGrads) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                into.accumulate(*id, g)?;
            }
        }
        Ok(())
    }
}

fn unfold(src: &[f64], n: usize, c: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut data = vec![0.0; src.len()];
    for i in 0..n {
        for ch in 0..c {
            for z in 0..d {
                let s = ((i * d + z) * c + ch) * hw;
                let t = ((i * c + ch) * d + z) * hw;
                data[t..t + hw].copy_from_slice(&src[s..s + hw]);
            }
        }
    }
    data
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
