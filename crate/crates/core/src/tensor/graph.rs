//! Define-by-run differentiation graph.
//!
//! Every operation appends a node holding its output value. Nodes are stored
//! in creation order, which is also a valid topological order, so the
//! backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::array::dims4;
use super::conv::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Scale(usize, T),
    Concat(usize, usize),
    Slice {
        src: usize,
        start: usize,
    },
    Mean(usize),
    Sum(usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record plus values for one forward pass.
///
/// A graph is single-threaded by construction (it is `Send` but used through
/// `&mut`); independent passes use independent graphs.
pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
pub struct Gradients<T: Scalar = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl Fn(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} does not belong to this graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeometry::infer(
            self.nodes[i].value.shape(),
            self.nodes[w].value.shape(),
            b.map(|b| self.nodes[b].value.shape()),
        )?;
        let out = conv::forward(
            &geom,
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
        );
        let mut ids = vec![i, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, a, b)?;
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(out, op(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), Op::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|x| x * s);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Concatenates two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (ba, ca, ha, wa) = dims4(self.nodes[a].value.shape(), "concat_channels")?;
        let (bb, cb, hb, wb) = dims4(self.nodes[b].value.shape(), "concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "batch/spatial mismatch {:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Concatenates any number of tensors along the channel axis.
    pub fn concat_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        rest.iter()
            .try_fold(first, |acc, &p| self.concat_channels(acc, p))
    }

    /// Channels `[start, start + len)` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.idx(src)?;
        let out = self.nodes[s].value.channels(start, len)?;
        let rg = self.rg(&[s]);
        Ok(self.push(out, Op::Slice { src: s, start }, rg))
    }

    /// Arithmetic mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let n = self.nodes[a].value.len();
        if n == 0 {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let m = self.nodes[a].value.sum_f64() / n as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(m)), Op::Mean(a), rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s = self.nodes[a].value.sum_f64();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf receives a gradient; leaves the loss does not
    /// depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let is_param = node.requires_grad && matches!(node.op, Op::Leaf);
            let g = if is_param {
                let data = grads
                    .get_mut(i)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                Some(Tensor::new(node.value.shape(), data)?)
            } else {
                None
            };
            out.push(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let want = |j: usize| self.nodes[j].requires_grad;
        let len = |j: usize| self.nodes[j].value.len();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if want(a) {
                    accumulate(&mut grads[a], len(a), |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s)
                    });
                }
                if want(b) {
                    accumulate(&mut grads[b], len(b), |buf| {
                        buf.iter_mut()
                            .zip(g)
                            .for_each(|(d, &s)| *d = if neg { *d - s } else { *d + s })
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if want(a) {
                    accumulate(&mut grads[a], len(a), |buf| {
                        for ((d, &s), &y) in buf.iter_mut().zip(g).zip(vb) {
                            *d = *d + s * y;
                        }
                    });
                }
                if want(b) {
                    accumulate(&mut grads[b], len(b), |buf| {
                        for ((d, &s), &x) in buf.iter_mut().zip(g).zip(va) {
                            *d = *d + s * x;
                        }
                    });
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) => {
                let y = node.value.data();
                let is_sig = matches!(node.op, Op::Sigmoid(_));
                accumulate(&mut grads[a], len(a), |buf| {
                    for ((d, &s), &y) in buf.iter_mut().zip(g).zip(y) {
                        let dy = if is_sig {
                            y * (T::one() - y)
                        } else {
                            T::one() - y * y
                        };
                        *d = *d + s * dy;
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.nodes[a].value.data();
                accumulate(&mut grads[a], len(a), |buf| {
                    for ((d, &s), &x) in buf.iter_mut().zip(g).zip(x) {
                        let sign = if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + s * sign;
                    }
                });
            }
            Op::Square(a) => {
                let x = self.nodes[a].value.data();
                let two = T::one() + T::one();
                accumulate(&mut grads[a], len(a), |buf| {
                    for ((d, &s), &x) in buf.iter_mut().zip(g).zip(x) {
                        *d = *d + two * x * s;
                    }
                });
            }
            Op::Scale(a, k) => {
                accumulate(&mut grads[a], len(a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * k)
                });
            }
            Op::Concat(a, b) => {
                let shape = node.value.shape();
                let (batch, plane) = (shape[0], shape[2] * shape[3]);
                let ca = self.nodes[a].value.shape()[1];
                let cb = self.nodes[b].value.shape()[1];
                for (j, c, off) in [(a, ca, 0), (b, cb, ca)] {
                    if !want(j) {
                        continue;
                    }
                    accumulate(&mut grads[j], len(j), |buf| {
                        for bi in 0..batch {
                            let src = &g[(bi * (ca + cb) + off) * plane..][..c * plane];
                            let dst = &mut buf[bi * c * plane..(bi + 1) * c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    });
                }
            }
            Op::Slice { src, start } => {
                let sshape = self.nodes[src].value.shape();
                let (batch, c, plane) = (sshape[0], sshape[1], sshape[2] * sshape[3]);
                let n = node.value.shape()[1];
                accumulate(&mut grads[src], len(src), |buf| {
                    for bi in 0..batch {
                        let dst = &mut buf[(bi * c + start) * plane..][..n * plane];
                        let s = &g[bi * n * plane..(bi + 1) * n * plane];
                        dst.iter_mut().zip(s).for_each(|(d, &v)| *d = *d + v);
                    }
                });
            }
            Op::Mean(a) | Op::Sum(a) => {
                let n = len(a);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::from_usize(n).unwrap()
                } else {
                    g[0]
                };
                accumulate(&mut grads[a], n, |buf| {
                    buf.iter_mut().for_each(|d| *d = *d + scale)
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = want(input).then(|| {
                    grads[input]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); len(input)])
                });
                let mut gw = want(weight).then(|| {
                    grads[weight]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); len(weight)])
                });
                let mut gb = bias
                    .filter(|&b| want(b))
                    .map(|b| grads[b].take().unwrap_or_else(|| vec![T::zero(); len(b)]));
                conv::backward(
                    &geom,
                    &self.nodes[input].value,
                    &self.nodes[weight].value,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    grads[input] = Some(gi);
                }
                if let Some(gw) = gw {
                    grads[weight] = Some(gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    grads[b] = Some(gb);
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
