//! Sequence-to-sequence stacked recurrent predictor.
//!
//! The network consumes `t_in` observed frames and emits one generated frame
//! per step. Encoder steps (`t < t_in`) take either the ground-truth frame or
//! the network's previous output, chosen per batch element by a reverse
//! scheduled-sampling mask; decoder steps always take the previous output.
//! A run therefore yields `t_in - 1 + t_out` frames, the last `t_out` of which
//! are the forecast.
//!
//! With ST-LSTM cells the spatio-temporal memory zigzags through the stack:
//! layer 0 at step `t` receives the memory written by the top layer at step
//! `t - 1`, every other layer receives the memory of the layer below at the
//! same step.
//!
//! Frames may be folded into channels (`patch > 1`): a `[C, H, W]` frame is
//! processed as `[C*p*p, H/p, W/p]`. Losses are computed in that layout,
//! which is a permutation of the cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    convlstm_step, stlstm_step, BoundConvLstm, BoundStLstm, ConvLstmParams, LayerState,
    StLstmParams,
};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::grid::{binarize_values, merge_values, GridSequence, OccupancyGrid, OCCUPIED_THRESHOLD};
use crate::tensor::{depth_to_space, space_to_depth, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    StLstm,
    ConvLstm,
}

impl CellKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellKind::StLstm => "stlstm",
            CellKind::ConvLstm => "convlstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stlstm" | "st_lstm" | "predrnn" => Ok(CellKind::StLstm),
            "convlstm" | "conv_lstm" => Ok(CellKind::ConvLstm),
            _ => Err(Error::Config(format!("unknown cell kind `{s}`"))),
        }
    }
}

/// Static and vehicle channels predicted jointly, or one merged channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Separate,
    Combined,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Separate => "separate",
            Mode::Combined => "combined",
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Mode::Separate => 2,
            Mode::Combined => 1,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "separate" => Ok(Mode::Separate),
            "combined" => Ok(Mode::Combined),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Parameters of `ε_k = ε_e - (ε_e - ε_s) exp(-k / α_e)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RssSchedule {
    pub eps_s: f64,
    pub eps_e: f64,
    pub alpha_e: f64,
}

impl Default for RssSchedule {
    fn default() -> Self {
        Self {
            eps_s: 0.5,
            eps_e: 1.0,
            alpha_e: 5e3,
        }
    }
}

impl RssSchedule {
    pub fn epsilon(&self, k: u64) -> Result<f64> {
        rss_epsilon(k, self.eps_s, self.eps_e, self.alpha_e)
    }
}

/// Probability of feeding the ground-truth frame at training iteration `k`.
pub fn rss_epsilon(k: u64, eps_s: f64, eps_e: f64, alpha_e: f64) -> Result<f64> {
    if !(alpha_e > 0.0 && alpha_e.is_finite()) {
        return Err(Error::Config(format!(
            "alpha_e must be positive, got {alpha_e}"
        )));
    }
    if !(0.0 <= eps_s && eps_s <= eps_e && eps_e <= 1.0) {
        return Err(Error::Config(format!(
            "need 0 <= eps_s <= eps_e <= 1, got eps_s={eps_s} eps_e={eps_e}"
        )));
    }
    Ok(eps_e - (eps_e - eps_s) * (-(k as f64) / alpha_e).exp())
}

/// Per-step teacher mask for one sequence: `true` feeds ground truth.
///
/// Step 0 is always `true` since no generated frame exists yet.
pub fn sample_rss_mask<R: Rng>(t_in: usize, eps: f64, rng: &mut R) -> Vec<bool> {
    let eps = eps.clamp(0.0, 1.0);
    (0..t_in).map(|t| t == 0 || rng.gen_bool(eps)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// Side of the square cell block folded into channels; 1 disables folding.
    pub patch: usize,
    pub cell: CellKind,
    pub mode: Mode,
    /// Separate mode only: one network per channel instead of a shared one.
    pub independent_channels: bool,
    pub t_in: usize,
    pub t_out: usize,
    pub dt: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_channels: 64,
            kernel: 5,
            patch: 1,
            cell: CellKind::StLstm,
            mode: Mode::Separate,
            independent_channels: false,
            t_in: 9,
            t_out: 6,
            dt: 0.5,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "num_layers",
    "hidden_channels",
    "kernel",
    "patch",
    "cell",
    "mode",
    "independent_channels",
    "t_in",
    "t_out",
    "dt",
];

impl PredictorConfig {
    pub fn in_channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels()
    }

    /// Number of frames a forward run emits.
    pub fn generated_frames(&self) -> usize {
        self.t_in - 1 + self.t_out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1".into());
        }
        if self.hidden_channels < 1 {
            return bad("hidden_channels must be >= 1".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.patch < 1 {
            return bad("patch must be >= 1".into());
        }
        if self.t_in < 2 || self.t_out < 1 {
            return bad(format!(
                "need t_in >= 2 and t_out >= 1, got {} / {}",
                self.t_in, self.t_out
            ));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt {} must be positive", self.dt));
        }
        if self.independent_channels && self.mode == Mode::Combined {
            return bad("independent_channels needs separate mode".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvConfig, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        out.set(&k("num_layers"), self.num_layers);
        out.set(&k("hidden_channels"), self.hidden_channels);
        out.set(&k("kernel"), self.kernel);
        out.set(&k("patch"), self.patch);
        out.set(&k("cell"), self.cell.as_str());
        out.set(&k("mode"), self.mode.as_str());
        out.set(&k("independent_channels"), self.independent_channels);
        out.set(&k("t_in"), self.t_in);
        out.set(&k("t_out"), self.t_out);
        out.set(&k("dt"), self.dt);
    }

    /// Applies every `prefix`-qualified key present in `cfg` on top of `self`.
    pub fn apply_kv(&mut self, cfg: &KvConfig, prefix: &str) -> Result<()> {
        let k = |s: &str| format!("{prefix}{s}");
        cfg.apply(&k("num_layers"), &mut self.num_layers)?;
        cfg.apply(&k("hidden_channels"), &mut self.hidden_channels)?;
        cfg.apply(&k("kernel"), &mut self.kernel)?;
        cfg.apply(&k("patch"), &mut self.patch)?;
        cfg.apply(&k("cell"), &mut self.cell)?;
        cfg.apply(&k("mode"), &mut self.mode)?;
        cfg.apply(&k("independent_channels"), &mut self.independent_channels)?;
        cfg.apply(&k("t_in"), &mut self.t_in)?;
        cfg.apply(&k("t_out"), &mut self.t_out)?;
        cfg.apply(&k("dt"), &mut self.dt)?;
        Ok(())
    }

    pub fn known_keys() -> &'static [&'static str] {
        CONFIG_KEYS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams<T: Scalar = f32> {
    StLstm(StLstmParams<T>),
    ConvLstm(ConvLstmParams<T>),
}

#[derive(Clone, Copy, Debug)]
enum BoundCell {
    StLstm(BoundStLstm),
    ConvLstm(BoundConvLstm),
}

/// One recurrent stack plus its 1x1 sigmoid output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    pub layers: Vec<CellParams<T>>,
    /// `[C_out, D, 1, 1]`.
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

struct BoundBackbone {
    layers: Vec<BoundCell>,
    head_weight: Var,
    head_bias: Var,
}

impl<T: Scalar> Backbone<T> {
    fn init<R: Rng>(cfg: &PredictorConfig, channels: usize, rng: &mut R) -> Self {
        let d = cfg.hidden_channels;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let cin = if l == 0 { channels } else { d };
                match cfg.cell {
                    CellKind::StLstm => {
                        CellParams::StLstm(StLstmParams::init(cin, d, cfg.kernel, rng))
                    }
                    CellKind::ConvLstm => {
                        CellParams::ConvLstm(ConvLstmParams::init(cin, d, cfg.kernel, rng))
                    }
                }
            })
            .collect();
        let s = 1.0 / (d as f64).sqrt();
        Self {
            layers,
            head_weight: Tensor::from_fn(&[channels, d, 1, 1], |_| {
                T::from_f64_lossy(rng.gen_range(-s..s))
            }),
            head_bias: Tensor::zeros(&[channels]),
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBackbone {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                CellParams::StLstm(p) => BoundCell::StLstm(p.bind(g, trainable)),
                CellParams::ConvLstm(p) => BoundCell::ConvLstm(p.bind(g, trainable)),
            })
            .collect();
        let (head_weight, head_bias) = if trainable {
            (
                g.param(self.head_weight.clone()),
                g.param(self.head_bias.clone()),
            )
        } else {
            (
                g.constant(self.head_weight.clone()),
                g.constant(self.head_bias.clone()),
            )
        };
        BoundBackbone {
            layers,
            head_weight,
            head_bias,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let named = match layer {
                CellParams::StLstm(p) => p.tensors(),
                CellParams::ConvLstm(p) => p.tensors(),
            };
            out.extend(named.into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let named = match layer {
                CellParams::StLstm(p) => p.tensors_mut(),
                CellParams::ConvLstm(p) => p.tensors_mut(),
            };
            out.extend(named.into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }
}

/// Recurrent state of one backbone between steps.
#[derive(Clone, Debug)]
struct StackState {
    layers: Vec<LayerState>,
    memory: Option<Var>,
}

/// Plain-value copy of [`StackState`] carried across per-step graphs.
#[derive(Clone, Debug)]
struct StackValues<T: Scalar> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    memory: Option<Tensor<T>>,
}

impl<T: Scalar> StackValues<T> {
    fn zeros(cfg: &PredictorConfig, batch: usize, h: usize, w: usize) -> Self {
        let shape = [batch, cfg.hidden_channels, h, w];
        Self {
            layers: (0..cfg.num_layers)
                .map(|_| (Tensor::zeros(&shape), Tensor::zeros(&shape)))
                .collect(),
            memory: (cfg.cell == CellKind::StLstm).then(|| Tensor::zeros(&shape)),
        }
    }

    fn bind(&self, g: &mut Graph<T>) -> StackState {
        StackState {
            layers: self
                .layers
                .iter()
                .map(|(h, c)| LayerState::from_tensors(g, h.clone(), c.clone()))
                .collect(),
            memory: self.memory.as_ref().map(|m| g.constant(m.clone())),
        }
    }

    fn read(g: &Graph<T>, s: &StackState) -> Self {
        Self {
            layers: s
                .layers
                .iter()
                .map(|l| (g.value(l.h).clone(), g.value(l.c).clone()))
                .collect(),
            memory: s.memory.map(|m| g.value(m).clone()),
        }
    }
}

fn backbone_step<T: Scalar>(
    g: &mut Graph<T>,
    bb: &BoundBackbone,
    x: Var,
    state: &mut StackState,
    ablate_memory: bool,
) -> Result<Var> {
    let mut input = x;
    for (l, cell) in bb.layers.iter().enumerate() {
        let prev = state.layers[l];
        match cell {
            BoundCell::StLstm(p) => {
                let mut m_in = state.memory.expect("ST-LSTM stack carries memory");
                if l == 0 && ablate_memory {
                    let zeros = Tensor::zeros(g.value(m_in).shape());
                    m_in = g.constant(zeros);
                }
                let (next, m_out) = stlstm_step(g, p, input, prev, m_in)?;
                state.layers[l] = next;
                state.memory = Some(m_out);
            }
            BoundCell::ConvLstm(p) => {
                state.layers[l] = convlstm_step(g, p, input, prev)?;
            }
        }
        input = state.layers[l].h;
    }
    let logits = g.conv2d(input, bb.head_weight, Some(bb.head_bias))?;
    g.sigmoid(logits)
}

/// Test hooks for [`Predictor::unroll_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct UnrollOptions {
    /// Replace the memory entering layer 0 at this step with zeros.
    pub ablate_memory_at: Option<usize>,
}

/// Parameters bound into one graph, as returned by [`Predictor::bind`].
pub struct BoundPredictor {
    backbones: Vec<BoundBackbone>,
    params: Vec<Var>,
}

impl BoundPredictor {
    /// Graph handles of the trainable tensors, in [`Predictor::parameters`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor<T: Scalar = f32> {
    config: PredictorConfig,
    backbones: Vec<Backbone<T>>,
}

impl<T: Scalar> Predictor<T> {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pp = config.patch * config.patch;
        let backbones = if config.independent_channels {
            (0..config.in_channels())
                .map(|_| Backbone::init(&config, pp, &mut rng))
                .collect()
        } else {
            vec![Backbone::init(&config, config.in_channels() * pp, &mut rng)]
        };
        Ok(Self { config, backbones })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn backbones(&self) -> &[Backbone<T>] {
        &self.backbones
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, bb) in self.backbones.iter().enumerate() {
            out.extend(
                bb.tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("net{i}.{n}"), t)),
            );
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, bb) in self.backbones.iter_mut().enumerate() {
            out.extend(
                bb.tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("net{i}.{n}"), t)),
            );
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundPredictor {
        let backbones: Vec<BoundBackbone> = self
            .backbones
            .iter()
            .map(|b| b.bind(g, trainable))
            .collect();
        let mut params = Vec::new();
        for bb in &backbones {
            for cell in &bb.layers {
                match cell {
                    BoundCell::StLstm(p) => params.extend([
                        p.xh_weight,
                        p.xh_bias,
                        p.xm_weight,
                        p.xm_bias,
                        p.cm_weight,
                        p.fuse_weight,
                        p.fuse_bias,
                    ]),
                    BoundCell::ConvLstm(p) => params.extend([p.weight, p.bias]),
                }
            }
            params.extend([bb.head_weight, bb.head_bias]);
        }
        BoundPredictor { backbones, params }
    }

    fn check_frames(
        &self,
        frames: &Tensor<T>,
        needed: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        let s = frames.shape();
        let c = self.config.in_channels();
        let p = self.config.patch;
        if s.len() != 5 || s[1] < needed || s[2] != c || s[3] % p != 0 || s[4] % p != 0 {
            return Err(Error::shape(
                "forward_sequence",
                format!(
                    "frames {s:?} must be [B, >= {needed}, {c}, H, W] with H, W divisible by {p}"
                ),
            ));
        }
        Ok((s[0], s[1], s[3], s[4]))
    }

    /// Frame `t` of a `[B, T, C, H, W]` stack in model layout
    /// `[B, C*p*p, H/p, W/p]`.
    pub fn frame_at(&self, frames: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let s = frames.shape();
        if s.len() != 5 || t >= s[1] {
            return Err(Error::shape("frame_at", format!("step {t} of {s:?}")));
        }
        let (b, steps, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let per = c * h * w;
        let mut data = Vec::with_capacity(b * per);
        for bi in 0..b {
            let off = (bi * steps + t) * per;
            data.extend_from_slice(&frames.data()[off..off + per]);
        }
        space_to_depth(&Tensor::new(&[b, c, h, w], data)?, self.config.patch)
    }

    fn run_backbones(
        &self,
        g: &mut Graph<T>,
        bound: &BoundPredictor,
        x: Var,
        states: &mut [StackState],
        ablate: bool,
    ) -> Result<Var> {
        if bound.backbones.len() == 1 {
            return backbone_step(g, &bound.backbones[0], x, &mut states[0], ablate);
        }
        let pp = self.config.patch * self.config.patch;
        let mut outs = Vec::with_capacity(bound.backbones.len());
        for (i, (bb, st)) in bound.backbones.iter().zip(states.iter_mut()).enumerate() {
            let xi = g.slice_channels(x, i * pp, pp)?;
            outs.push(backbone_step(g, bb, xi, st, ablate)?);
        }
        g.concat_all(&outs)
    }

    /// Builds the full unrolled graph and returns the generated frames in
    /// model layout, one per step after the first.
    ///
    /// `masks` holds one teacher mask of length `t_in` per batch element;
    /// `None` feeds ground truth at every encoder step.
    pub fn unroll(
        &self,
        g: &mut Graph<T>,
        bound: &BoundPredictor,
        frames: &Tensor<T>,
        masks: Option<&[Vec<bool>]>,
    ) -> Result<Vec<Var>> {
        self.unroll_with(g, bound, frames, masks, UnrollOptions::default())
    }

    pub fn unroll_with(
        &self,
        g: &mut Graph<T>,
        bound: &BoundPredictor,
        frames: &Tensor<T>,
        masks: Option<&[Vec<bool>]>,
        opts: UnrollOptions,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (batch, _, h, w) = self.check_frames(frames, cfg.t_in)?;
        if let Some(m) = masks {
            if m.len() != batch || m.iter().any(|v| v.len() != cfg.t_in) {
                return Err(Error::shape(
                    "forward_sequence",
                    format!("need {batch} masks of length {}", cfg.t_in),
                ));
            }
        }
        let (ph, pw) = (h / cfg.patch, w / cfg.patch);
        let mut states: Vec<StackState> = self
            .backbones
            .iter()
            .map(|_| StackValues::<T>::zeros(cfg, batch, ph, pw).bind(g))
            .collect();

        let mut generated: Vec<Var> = Vec::with_capacity(cfg.generated_frames());
        for t in 0..cfg.generated_frames() {
            let x = if t == 0 {
                g.constant(self.frame_at(frames, 0)?)
            } else if t < cfg.t_in {
                let prev = *generated.last().unwrap();
                let flags: Vec<bool> = match masks {
                    Some(m) => m.iter().map(|v| v[t]).collect(),
                    None => vec![true; batch],
                };
                self.select_input(g, frames, t, prev, &flags)?
            } else {
                *generated.last().unwrap()
            };
            let ablate = opts.ablate_memory_at == Some(t);
            generated.push(self.run_backbones(g, bound, x, &mut states, ablate)?);
        }
        Ok(generated)
    }

    fn select_input(
        &self,
        g: &mut Graph<T>,
        frames: &Tensor<T>,
        t: usize,
        prev: Var,
        flags: &[bool],
    ) -> Result<Var> {
        if flags.iter().all(|&f| f) {
            return Ok(g.constant(self.frame_at(frames, t)?));
        }
        if flags.iter().all(|&f| !f) {
            return Ok(prev);
        }
        let truth = self.frame_at(frames, t)?;
        let per = truth.len() / flags.len();
        let keep = |want: bool| {
            Tensor::from_fn(truth.shape(), |i| {
                if flags[i / per] == want {
                    T::one()
                } else {
                    T::zero()
                }
            })
        };
        let truth_part: Vec<T> = truth
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if flags[i / per] { v } else { T::zero() })
            .collect();
        let truth_part = g.constant(Tensor::new(truth.shape(), truth_part)?);
        let gen_mask = g.constant(keep(false));
        let gen_part = g.mul(prev, gen_mask)?;
        g.add(truth_part, gen_part)
    }

    /// Runs the sequence one step per graph and returns every generated
    /// frame, `[B, t_in - 1 + t_out, C, H, W]`. No graph outlives a step.
    pub fn forward_sequence(
        &self,
        frames: &Tensor<T>,
        masks: Option<&[Vec<bool>]>,
    ) -> Result<Tensor<T>> {
        self.forward_sequence_with(frames, masks, UnrollOptions::default())
    }

    pub fn forward_sequence_with(
        &self,
        frames: &Tensor<T>,
        masks: Option<&[Vec<bool>]>,
        opts: UnrollOptions,
    ) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let (batch, _, h, w) = self.check_frames(frames, cfg.t_in)?;
        if let Some(m) = masks {
            if m.len() != batch || m.iter().any(|v| v.len() != cfg.t_in) {
                return Err(Error::shape(
                    "forward_sequence",
                    format!("need {batch} masks of length {}", cfg.t_in),
                ));
            }
        }
        let (ph, pw) = (h / cfg.patch, w / cfg.patch);
        let c = cfg.out_channels();
        let n_gen = cfg.generated_frames();
        let mut values: Vec<StackValues<T>> = self
            .backbones
            .iter()
            .map(|_| StackValues::zeros(cfg, batch, ph, pw))
            .collect();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n_gen);

        for t in 0..n_gen {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let mut states: Vec<StackState> = values.iter().map(|v| v.bind(&mut g)).collect();
            let x = if t == 0 {
                g.constant(self.frame_at(frames, 0)?)
            } else {
                let prev = g.constant(outputs.last().unwrap().clone());
                if t < cfg.t_in {
                    let flags: Vec<bool> = match masks {
                        Some(m) => m.iter().map(|v| v[t]).collect(),
                        None => vec![true; batch],
                    };
                    self.select_input(&mut g, frames, t, prev, &flags)?
                } else {
                    prev
                }
            };
            let ablate = opts.ablate_memory_at == Some(t);
            let y = self.run_backbones(&mut g, &bound, x, &mut states, ablate)?;
            outputs.push(g.value(y).clone());
            values = states.iter().map(|s| StackValues::read(&g, s)).collect();
        }

        let per = c * h * w;
        let mut data = vec![T::zero(); batch * n_gen * per];
        for (t, out) in outputs.iter().enumerate() {
            let full = depth_to_space(out, cfg.patch)?;
            for bi in 0..batch {
                data[(bi * n_gen + t) * per..][..per]
                    .copy_from_slice(&full.data()[bi * per..(bi + 1) * per]);
            }
        }
        Tensor::new(&[batch, n_gen, c, h, w], data)
    }
}

/// Stacks sequences into a binarized `[B, T, C, H, W]` tensor in the channel
/// layout `mode` expects (two channels, or their cellwise max).
pub fn sequences_to_tensor(
    seqs: &[&GridSequence],
    frames: usize,
    mode: Mode,
) -> Result<Tensor<f32>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Input("no sequences to stack".into()))?;
    let spec = first
        .spec()
        .ok_or_else(|| Error::Input("empty sequence".into()))?;
    let c = mode.channels();
    let plane = spec.cells();
    let mut data = Vec::with_capacity(seqs.len() * frames * c * plane);
    for seq in seqs {
        if seq.len() < frames || seq.spec() != Some(spec) {
            return Err(Error::Input(format!(
                "sequence of {} frames does not provide {frames} frames of {}x{}",
                seq.len(),
                spec.height,
                spec.width
            )));
        }
        for frame in &seq.frames()[..frames] {
            match (mode, frame.num_channels()) {
                (Mode::Separate, 2) => {
                    for ch in frame.channels() {
                        data.extend(binarize_values(ch, OCCUPIED_THRESHOLD));
                    }
                }
                (Mode::Combined, _) => {
                    data.extend(binarize_values(
                        &merge_values(frame.channels()),
                        OCCUPIED_THRESHOLD,
                    ));
                }
                (Mode::Separate, n) => {
                    return Err(Error::Input(format!(
                        "separate mode needs two-channel grids, got {n}"
                    )))
                }
            }
        }
    }
    Tensor::new(&[seqs.len(), frames, c, spec.height, spec.width], data)
}

impl Predictor<f32> {
    /// Forecasts `t_out` frames from exactly `t_in` observed frames.
    pub fn predict(&self, past: &GridSequence) -> Result<GridSequence> {
        let cfg = &self.config;
        if past.len() != cfg.t_in {
            return Err(Error::Input(format!(
                "expected {} past frames, got {}",
                cfg.t_in,
                past.len()
            )));
        }
        if (past.dt() - cfg.dt).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "sequence dt {} differs from model dt {}",
                past.dt(),
                cfg.dt
            )));
        }
        let spec = past.spec().unwrap();
        let frames = sequences_to_tensor(&[past], cfg.t_in, cfg.mode)?;
        let out = self.forward_sequence(&frames, None)?;
        let c = cfg.out_channels();
        let plane = spec.cells();
        let t_last = past.frames().last().unwrap().timestamp;
        let first = cfg.generated_frames() - cfg.t_out;
        let grids = (0..cfg.t_out)
            .map(|k| {
                let base = (first + k) * c * plane;
                let chans = (0..c)
                    .map(|ci| out.data()[base + ci * plane..base + (ci + 1) * plane].to_vec())
                    .collect();
                OccupancyGrid::new(spec, chans, t_last + (k + 1) as f64 * cfg.dt)
            })
            .collect::<Result<Vec<_>>>()?;
        GridSequence::new(grids, cfg.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_schedule() {
        let s = RssSchedule::default();
        assert_eq!(s.epsilon(0).unwrap(), 0.5);
        assert!((s.epsilon(5000).unwrap() - (1.0 - 0.5 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((s.epsilon(10_000_000).unwrap() - 1.0).abs() < 1e-12);
        let mut last = 0.0;
        for k in (0..50_000).step_by(250) {
            let e = s.epsilon(k).unwrap();
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn epsilon_rejects_bad_parameters() {
        assert!(rss_epsilon(0, 0.6, 0.5, 10.0).is_err());
        assert!(rss_epsilon(0, 0.5, 1.0, 0.0).is_err());
        assert!(rss_epsilon(0, -0.1, 1.0, 1.0).is_err());
        assert!(rss_epsilon(0, 0.5, 1.2, 1.0).is_err());
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_rss_mask(9, 1.0, &mut rng), vec![true; 9]);
        let m = sample_rss_mask(9, 0.0, &mut rng);
        assert!(m[0] && m[1..].iter().all(|&b| !b));
    }

    #[test]
    fn config_validation_and_kv_roundtrip() {
        let cfg = PredictorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.generated_frames(), 14);
        let mut kv = KvConfig::default();
        let alt = PredictorConfig {
            num_layers: 2,
            cell: CellKind::ConvLstm,
            mode: Mode::Combined,
            patch: 4,
            ..cfg.clone()
        };
        alt.to_kv(&mut kv, "model.");
        let mut back = PredictorConfig::default();
        back.apply_kv(&kv, "model.").unwrap();
        assert_eq!(back, alt);
        assert!(PredictorConfig {
            t_in: 1,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(PredictorConfig {
            num_layers: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(PredictorConfig { kernel: 4, ..cfg }.validate().is_err());
    }
}
