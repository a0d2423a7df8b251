//! ConvLSTM and spatio-temporal LSTM (ST-LSTM) cells.
//!
//! ConvLSTM, no peepholes:
//!
//! ```text
//! i = σ(W_xi*X + W_hi*H + b_i)    f = σ(W_xf*X + W_hf*H + b_f)
//! g = tanh(W_xg*X + W_hg*H + b_g) o = σ(W_xo*X + W_ho*H + b_o)
//! C' = f∘C + i∘g                  H' = o∘tanh(C')
//! ```
//!
//! ST-LSTM keeps the temporal memory `C` per layer and threads a
//! spatio-temporal memory `M` through the stack:
//!
//! ```text
//! g  = tanh(W_xg*X + W_hg*H)   i  = σ(W_xi*X + W_hi*H)   f  = σ(W_xf*X + W_hf*H)
//! C' = f∘C + i∘g
//! g' = tanh(W'_xg*X + W_mg*M)  i' = σ(W'_xi*X + W_mi*M)  f' = σ(W'_xf*X + W_mf*M)
//! M' = f'∘M + i'∘g'
//! o  = σ(W_xo*X + W_ho*H + W_co*C' + W_mo*M')
//! H' = o∘tanh(W_1x1*[C', M'])
//! ```
//!
//! Convolutions sharing an input are fused: one kernel over `[X, H]` yields
//! all four `X/H` gate pre-activations, one over `[X, M]` the three memory
//! gates, one over `[C', M']` the output-gate memory term. Every gate carries
//! a bias (the output gate's lives in the `[X, H]` kernel).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Per-layer hidden and temporal-memory state inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

impl LayerState {
    pub fn from_tensors<T: Scalar>(g: &mut Graph<T>, h: Tensor<T>, c: Tensor<T>) -> Self {
        Self {
            h: g.constant(h),
            c: g.constant(c),
        }
    }
}

/// Zero-valued initial state: `h`, `c` and the spatio-temporal memory `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub m: Tensor<T>,
}

pub fn init_state<T: Scalar>(
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<CellState<T>> {
    if batch == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Error::Domain(format!(
            "state dimensions must be positive, got ({batch}, {channels}, {height}, {width})"
        )));
    }
    let shape = [batch, channels, height, width];
    Ok(CellState {
        h: Tensor::zeros(&shape),
        c: Tensor::zeros(&shape),
        m: Tensor::zeros(&shape),
    })
}

fn uniform_weight<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-s..s)))
}

/// Bias vector of `chunks * hidden` entries, `1.0` on the listed chunks.
fn gate_bias<T: Scalar>(chunks: usize, hidden: usize, ones: &[usize]) -> Tensor<T> {
    Tensor::from_fn(&[chunks * hidden], |i| {
        if ones.contains(&(i / hidden)) {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn bind<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

fn hidden_of(weight: &Tensor<impl Scalar>, chunks: usize) -> usize {
    weight.shape()[0] / chunks
}

/// ConvLSTM parameters. Gate chunk order along output channels: `i, f, g, o`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<T: Scalar = f32> {
    /// `[4D, Cin + D, k, k]` over `[X, H]`.
    pub weight: Tensor<T>,
    /// `[4D]`.
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConvLstm {
    pub weight: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl<T: Scalar> ConvLstmParams<T> {
    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[4 * hidden, in_channels + hidden, kernel, kernel]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, forget-gate bias `+1`.
    pub fn init<R: Rng>(in_channels: usize, hidden: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (in_channels + hidden) * kernel * kernel;
        Self {
            weight: uniform_weight(
                &[4 * hidden, in_channels + hidden, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: gate_bias(4, hidden, &[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        hidden_of(&self.weight, 4)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundConvLstm {
        BoundConvLstm {
            weight: bind(g, &self.weight, trainable),
            bias: bind(g, &self.bias, trainable),
            hidden: self.hidden(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// ST-LSTM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StLstmParams<T: Scalar = f32> {
    /// `[4D, Cin + D, k, k]` over `[X, H]`; chunks `g, i, f, o`.
    pub xh_weight: Tensor<T>,
    pub xh_bias: Tensor<T>,
    /// `[3D, Cin + D, k, k]` over `[X, M]`; chunks `g', i', f'`.
    pub xm_weight: Tensor<T>,
    pub xm_bias: Tensor<T>,
    /// `[D, 2D, k, k]` over `[C', M']`, output-gate term, no bias.
    pub cm_weight: Tensor<T>,
    /// `[D, 2D, 1, 1]` fusing `[C', M']` before the final tanh.
    pub fuse_weight: Tensor<T>,
    pub fuse_bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundStLstm {
    pub xh_weight: Var,
    pub xh_bias: Var,
    pub xm_weight: Var,
    pub xm_bias: Var,
    pub cm_weight: Var,
    pub fuse_weight: Var,
    pub fuse_bias: Var,
    pub hidden: usize,
}

impl<T: Scalar> StLstmParams<T> {
    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Self {
        let d = hidden;
        Self {
            xh_weight: Tensor::zeros(&[4 * d, in_channels + d, kernel, kernel]),
            xh_bias: Tensor::zeros(&[4 * d]),
            xm_weight: Tensor::zeros(&[3 * d, in_channels + d, kernel, kernel]),
            xm_bias: Tensor::zeros(&[3 * d]),
            cm_weight: Tensor::zeros(&[d, 2 * d, kernel, kernel]),
            fuse_weight: Tensor::zeros(&[d, 2 * d, 1, 1]),
            fuse_bias: Tensor::zeros(&[d]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, both forget-gate biases `+1`.
    pub fn init<R: Rng>(in_channels: usize, hidden: usize, kernel: usize, rng: &mut R) -> Self {
        let d = hidden;
        let kk = kernel * kernel;
        Self {
            xh_weight: uniform_weight(
                &[4 * d, in_channels + d, kernel, kernel],
                (in_channels + d) * kk,
                rng,
            ),
            xh_bias: gate_bias(4, d, &[2]),
            xm_weight: uniform_weight(
                &[3 * d, in_channels + d, kernel, kernel],
                (in_channels + d) * kk,
                rng,
            ),
            xm_bias: gate_bias(3, d, &[2]),
            cm_weight: uniform_weight(&[d, 2 * d, kernel, kernel], 2 * d * kk, rng),
            fuse_weight: uniform_weight(&[d, 2 * d, 1, 1], 2 * d, rng),
            fuse_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn hidden(&self) -> usize {
        hidden_of(&self.xh_weight, 4)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundStLstm {
        BoundStLstm {
            xh_weight: bind(g, &self.xh_weight, trainable),
            xh_bias: bind(g, &self.xh_bias, trainable),
            xm_weight: bind(g, &self.xm_weight, trainable),
            xm_bias: bind(g, &self.xm_bias, trainable),
            cm_weight: bind(g, &self.cm_weight, trainable),
            fuse_weight: bind(g, &self.fuse_weight, trainable),
            fuse_bias: bind(g, &self.fuse_bias, trainable),
            hidden: self.hidden(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("xh_weight", &self.xh_weight),
            ("xh_bias", &self.xh_bias),
            ("xm_weight", &self.xm_weight),
            ("xm_bias", &self.xm_bias),
            ("cm_weight", &self.cm_weight),
            ("fuse_weight", &self.fuse_weight),
            ("fuse_bias", &self.fuse_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("xh_weight", &mut self.xh_weight),
            ("xh_bias", &mut self.xh_bias),
            ("xm_weight", &mut self.xm_weight),
            ("xm_bias", &mut self.xm_bias),
            ("cm_weight", &mut self.cm_weight),
            ("fuse_weight", &mut self.fuse_weight),
            ("fuse_bias", &mut self.fuse_bias),
        ]
    }
}

fn check_state<T: Scalar>(g: &Graph<T>, x: Var, state: &LayerState, hidden: usize) -> Result<()> {
    let xs = g.value(x).shape();
    let hs = g.value(state.h).shape();
    let cs = g.value(state.c).shape();
    let spatial_ok = xs.len() == 4
        && hs.len() == 4
        && xs[0] == hs[0]
        && xs[2..] == hs[2..]
        && hs[1] == hidden
        && hs == cs;
    if !spatial_ok {
        return Err(Error::shape(
            "cell step",
            format!("input {xs:?} inconsistent with state h {hs:?} / c {cs:?} (hidden {hidden})"),
        ));
    }
    Ok(())
}

/// Gate activations of one ConvLSTM step, in `i, f, g, o` order.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmGates {
    pub input: Var,
    pub forget: Var,
    pub candidate: Var,
    pub output: Var,
}

pub fn convlstm_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundConvLstm,
    x: Var,
    state: LayerState,
) -> Result<LayerState> {
    convlstm_step_with_gates(g, p, x, state).map(|(s, _)| s)
}

pub fn convlstm_step_with_gates<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundConvLstm,
    x: Var,
    state: LayerState,
) -> Result<(LayerState, ConvLstmGates)> {
    let d = p.hidden;
    check_state(g, x, &state, d)?;
    let xh = g.concat_channels(x, state.h)?;
    let z = g.conv2d(xh, p.weight, Some(p.bias))?;
    let zi = g.slice_channels(z, 0, d)?;
    let zf = g.slice_channels(z, d, d)?;
    let zg = g.slice_channels(z, 2 * d, d)?;
    let zo = g.slice_channels(z, 3 * d, d)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((
        LayerState { h, c },
        ConvLstmGates {
            input: i,
            forget: f,
            candidate: cand,
            output: o,
        },
    ))
}

/// One ST-LSTM step; returns the new layer state and the outgoing memory `M'`.
pub fn stlstm_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundStLstm,
    x: Var,
    state: LayerState,
    m_in: Var,
) -> Result<(LayerState, Var)> {
    let d = p.hidden;
    check_state(g, x, &state, d)?;
    let ms = g.value(m_in).shape();
    if ms != g.value(state.c).shape() {
        return Err(Error::shape(
            "stlstm_step",
            format!(
                "memory {ms:?} must match state {:?}",
                g.value(state.c).shape()
            ),
        ));
    }

    let xh = g.concat_channels(x, state.h)?;
    let z = g.conv2d(xh, p.xh_weight, Some(p.xh_bias))?;
    let xm = g.concat_channels(x, m_in)?;
    let zm = g.conv2d(xm, p.xm_weight, Some(p.xm_bias))?;

    let zg = g.slice_channels(z, 0, d)?;
    let zi = g.slice_channels(z, d, d)?;
    let zf = g.slice_channels(z, 2 * d, d)?;
    let zo = g.slice_channels(z, 3 * d, d)?;
    let cand = g.tanh(zg)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;

    let zg2 = g.slice_channels(zm, 0, d)?;
    let zi2 = g.slice_channels(zm, d, d)?;
    let zf2 = g.slice_channels(zm, 2 * d, d)?;
    let cand2 = g.tanh(zg2)?;
    let i2 = g.sigmoid(zi2)?;
    let f2 = g.sigmoid(zf2)?;
    let keep2 = g.mul(f2, m_in)?;
    let write2 = g.mul(i2, cand2)?;
    let m = g.add(keep2, write2)?;

    let cm = g.concat_channels(c, m)?;
    let zo_mem = g.conv2d(cm, p.cm_weight, None)?;
    let zo_all = g.add(zo, zo_mem)?;
    let o = g.sigmoid(zo_all)?;
    let fused = g.conv2d(cm, p.fuse_weight, Some(p.fuse_bias))?;
    let tf = g.tanh(fused)?;
    let h = g.mul(o, tf)?;
    Ok((LayerState { h, c }, m))
}
