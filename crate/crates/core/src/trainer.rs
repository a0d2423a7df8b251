//! Adam training loop with reverse scheduled sampling, and checkpoints.
//!
//! One iteration draws a batch, evaluates `ε_k` at the optimizer step count
//! `k`, samples one teacher mask per sequence, unrolls the predictor and
//! averages the dual loss over every generated frame (encoder
//! reconstructions and decoder forecasts alike). Shuffling and mask sampling
//! share one seeded stream, so a run is reproducible bit for bit.
//!
//! In combined mode both loss terms see the single merged channel.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::grid::GridSequence;
use crate::losses::{overall_loss, semantic_loss, static_loss, LossWeights};
use crate::predictor::{
    sample_rss_mask, sequences_to_tensor, Mode, Predictor, PredictorConfig, RssSchedule,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a non-finite gradient leaves the model untouched.
pub fn adam_step(
    params: &mut [(String, &mut Tensor<f32>)],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                ),
            ));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} in `{name}` at element {i}",
                g.data()[i]
            )));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, (_, p))| m.len() != p.len())
    {
        return Err(Error::shape(
            "adam_step",
            "optimizer state does not match parameters",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_iterations: Option<u64>,
    pub loss: LossWeights,
    pub rss: RssSchedule,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Invoke the checkpoint hook every this many iterations.
    pub checkpoint_every: Option<u64>,
    /// Fraction of sequences used for training when a split is requested.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 8,
            epochs: 25,
            max_iterations: None,
            loss: LossWeights::default(),
            rss: RssSchedule::default(),
            seed: 0,
            clip_norm: Some(10.0),
            checkpoint_every: None,
            train_fraction: 0.8,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "lr",
    "batch",
    "epochs",
    "max_iterations",
    "beta1",
    "beta2",
    "adam_eps",
    "k0",
    "ks",
    "eps_s",
    "eps_e",
    "alpha_e",
    "seed",
    "clip_norm",
    "checkpoint_every",
    "train_fraction",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr {} must be positive",
                self.adam.lr
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} not in (0, 1]",
                self.train_fraction
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        self.loss.validate()?;
        self.rss.epsilon(0).map(|_| ())
    }

    /// `clip_norm = 0` and `max_iterations = 0` mean "off".
    pub fn apply_kv(&mut self, cfg: &KvConfig) -> Result<()> {
        cfg.apply("lr", &mut self.adam.lr)?;
        cfg.apply("batch", &mut self.batch)?;
        cfg.apply("epochs", &mut self.epochs)?;
        if let Some(n) = cfg.parsed::<u64>("max_iterations")? {
            self.max_iterations = (n > 0).then_some(n);
        }
        cfg.apply("beta1", &mut self.adam.beta1)?;
        cfg.apply("beta2", &mut self.adam.beta2)?;
        cfg.apply("adam_eps", &mut self.adam.eps)?;
        cfg.apply("k0", &mut self.loss.k0)?;
        cfg.apply("ks", &mut self.loss.ks)?;
        cfg.apply("eps_s", &mut self.rss.eps_s)?;
        cfg.apply("eps_e", &mut self.rss.eps_e)?;
        cfg.apply("alpha_e", &mut self.rss.alpha_e)?;
        cfg.apply("seed", &mut self.seed)?;
        if let Some(c) = cfg.parsed::<f64>("clip_norm")? {
            self.clip_norm = (c > 0.0).then_some(c);
        }
        if let Some(n) = cfg.parsed::<u64>("checkpoint_every")? {
            self.checkpoint_every = (n > 0).then_some(n);
        }
        cfg.apply("train_fraction", &mut self.train_fraction)?;
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvConfig) {
        out.set("lr", self.adam.lr);
        out.set("batch", self.batch);
        out.set("epochs", self.epochs);
        out.set("max_iterations", self.max_iterations.unwrap_or(0));
        out.set("beta1", self.adam.beta1);
        out.set("beta2", self.adam.beta2);
        out.set("adam_eps", self.adam.eps);
        out.set("k0", self.loss.k0);
        out.set("ks", self.loss.ks);
        out.set("eps_s", self.rss.eps_s);
        out.set("eps_e", self.rss.eps_e);
        out.set("alpha_e", self.rss.alpha_e);
        out.set("seed", self.seed);
        out.set("clip_norm", self.clip_norm.unwrap_or(0.0));
        out.set("checkpoint_every", self.checkpoint_every.unwrap_or(0));
        out.set("train_fraction", self.train_fraction);
    }

    pub fn known_keys() -> &'static [&'static str] {
        TRAIN_KEYS
    }
}

/// Seeded shuffle of `0..n` split into `(train, test)` index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(usize::from(n > 0), n);
    let test = idx.split_off(n_train);
    (idx, test)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epsilon: f64,
    pub l_static: f64,
    pub l_semantic: f64,
    pub l_overall: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,epsilon,l_static,l_semantic,l_overall";

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.epsilon, r.l_static, r.l_semantic, r.l_overall
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    pub iterations: u64,
    /// Why training stopped early; the model then holds the last finite state.
    pub aborted: Option<String>,
}

/// Losses of one batch, averaged over all generated frames.
pub struct BatchLoss {
    pub l_static: Var,
    pub l_semantic: Var,
    pub l_overall: Var,
}

/// Builds the loss graph for a `[B, T, C, H, W]` batch.
pub fn batch_loss(
    model: &Predictor<f32>,
    g: &mut Graph<f32>,
    generated: &[Var],
    frames: &Tensor<f32>,
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let cfg = model.config();
    let pp = cfg.patch * cfg.patch;
    let mut statics = Vec::with_capacity(generated.len());
    let mut semantics = Vec::with_capacity(generated.len());
    for (t, &pred) in generated.iter().enumerate() {
        let target = model.frame_at(frames, t + 1)?;
        match cfg.mode {
            Mode::Separate => {
                let ps = g.slice_channels(pred, 0, pp)?;
                let pm = g.slice_channels(pred, pp, pp)?;
                statics.push(static_loss(g, &target.channels(0, pp)?, ps)?);
                semantics.push(semantic_loss(g, &target.channels(pp, pp)?, pm, weights.ks)?);
            }
            // the merged channel has no vehicle identity to weight
            Mode::Combined => statics.push(static_loss(g, &target, pred)?),
        }
    }
    if semantics.is_empty() {
        semantics.push(g.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / generated.len() as f32;
    let mean_of = |g: &mut Graph<f32>, parts: &[Var]| -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        g.scale(acc, inv)
    };
    let l_static = mean_of(g, &statics)?;
    let l_semantic = mean_of(g, &semantics)?;
    let l_overall = overall_loss(g, l_static, l_semantic, weights.k0)?;
    Ok(BatchLoss {
        l_static,
        l_semantic,
        l_overall,
    })
}

/// Trains `model` in place on every sequence of `dataset`.
///
/// `on_checkpoint(model, k)` runs every `checkpoint_every` iterations. A
/// non-finite loss or gradient stops training before the offending update
/// and is reported in [`TrainReport::aborted`].
pub fn train(
    model: &mut Predictor<f32>,
    dataset: &[GridSequence],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Predictor<f32>, u64) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    let frames_needed = mcfg.t_in + mcfg.t_out;
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if let Some(bad) = dataset.iter().position(|s| s.len() < frames_needed) {
        return Err(Error::Input(format!(
            "sequence {bad} has {} frames, need {frames_needed}",
            dataset[bad].len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut log = Vec::new();
    let mut k: u64 = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let limit = cfg.max_iterations.unwrap_or(u64::MAX);
    info!(
        "training {} parameters on {} sequences for {} epoch(s)",
        model.num_parameters(),
        dataset.len(),
        cfg.epochs
    );

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if k >= limit {
                break 'epochs;
            }
            let eps = cfg.rss.epsilon(k)?;
            let masks: Vec<Vec<bool>> = chunk
                .iter()
                .map(|_| sample_rss_mask(mcfg.t_in, eps, &mut rng))
                .collect();
            let seqs: Vec<&GridSequence> = chunk.iter().map(|&i| &dataset[i]).collect();
            let frames = sequences_to_tensor(&seqs, frames_needed, mcfg.mode)?;

            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let generated = model.unroll(&mut g, &bound, &frames, Some(&masks))?;
            let losses = batch_loss(model, &mut g, &generated, &frames, &cfg.loss)?;
            let record = LossRecord {
                iteration: k,
                epsilon: eps,
                l_static: g.value(losses.l_static).item()? as f64,
                l_semantic: g.value(losses.l_semantic).item()? as f64,
                l_overall: g.value(losses.l_overall).item()? as f64,
            };
            if !record.l_overall.is_finite() {
                let msg = format!("non-finite loss {} at iteration {k}", record.l_overall);
                warn!("{msg}");
                return Ok(TrainReport {
                    log,
                    iterations: k,
                    aborted: Some(msg),
                });
            }
            let mut grads = g.backward(losses.l_overall)?;
            let mut grad_list: Vec<Tensor<f32>> = bound
                .params()
                .iter()
                .map(|&v| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
                })
                .collect();
            drop(g);
            if let Some(max) = cfg.clip_norm {
                let norm = grad_list
                    .iter()
                    .flat_map(|t| t.data())
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    let s = (max / norm) as f32;
                    for t in &mut grad_list {
                        t.data_mut().iter_mut().for_each(|x| *x *= s);
                    }
                }
            }
            if let Err(e) = adam_step(
                &mut model.parameters_mut(),
                &grad_list,
                &mut state,
                &cfg.adam,
            ) {
                if let Error::Numerical(msg) = &e {
                    warn!("{msg}");
                    return Ok(TrainReport {
                        log,
                        iterations: k,
                        aborted: Some(msg.clone()),
                    });
                }
                return Err(e);
            }
            debug!(
                "epoch {epoch} iter {k}: eps {eps:.4} static {:.5} semantic {:.5} overall {:.5}",
                record.l_static, record.l_semantic, record.l_overall
            );
            log.push(record);
            k += 1;
            if cfg.checkpoint_every.is_some_and(|n| k % n == 0) {
                on_checkpoint(model, k)?;
            }
        }
        if let Some(r) = log.last() {
            info!(
                "epoch {epoch}: iteration {k}, overall loss {:.5}",
                r.l_overall
            );
        }
    }
    Ok(TrainReport {
        log,
        iterations: k,
        aborted: None,
    })
}

const CKPT_MAGIC: &str = "OGMCKPT1";
const CKPT_SEPARATOR: &[u8] = b"\n%%\n";

/// Model weights plus everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PredictorConfig,
    pub iteration: u64,
    pub seed: u64,
    /// Free-form `key = value` entries echoed into the manifest.
    pub extra: KvConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Predictor<f32>, iteration: u64, seed: u64) -> Self {
        Self {
            config: model.config().clone(),
            iteration,
            seed,
            extra: KvConfig::default(),
            tensors: model
                .parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    fn manifest(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        self.config.to_kv(&mut kv, "model.");
        kv.set("iteration", self.iteration);
        kv.set("seed", self.seed);
        for (k, v) in self.extra.entries() {
            kv.push(&format!("extra.{k}"), v);
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            kv.push("tensor", format!("{name} {}", dims.join("x")));
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CKPT_MAGIC}\n{}", self.manifest().to_text()).into_bytes();
        if out.last() == Some(&b'\n') {
            out.pop();
        }
        out.extend_from_slice(CKPT_SEPARATOR);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let sep = bytes
            .windows(CKPT_SEPARATOR.len())
            .position(|w| w == CKPT_SEPARATOR)
            .ok_or_else(|| bad("manifest terminator not found".into()))?;
        let text = std::str::from_utf8(&bytes[..sep])
            .map_err(|e| bad(format!("manifest is not UTF-8: {e}")))?;
        let (magic, rest) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim() != CKPT_MAGIC {
            return Err(bad(format!("bad checkpoint magic `{magic}`")));
        }
        let kv = KvConfig::parse(rest)?;
        let mut config = PredictorConfig::default();
        config.apply_kv(&kv, "model.")?;
        config.validate()?;
        let mut extra = KvConfig::default();
        for (k, v) in kv.entries() {
            if let Some(k) = k.strip_prefix("extra.") {
                extra.push(k, v);
            }
        }

        let mut shapes = Vec::new();
        for line in kv.get_all("tensor") {
            let (name, dims) = line
                .rsplit_once(' ')
                .ok_or_else(|| bad(format!("malformed tensor entry `{line}`")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("tensor `{name}` shape `{dims}`: {e}")))?;
            shapes.push((name.to_string(), shape));
        }
        let payload = &bytes[sep + CKPT_SEPARATOR.len()..];
        let expected: usize = shapes
            .iter()
            .map(|(_, s)| 4 * s.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload holds {} bytes, manifest needs {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            config,
            iteration: kv.require("iteration")?,
            seed: kv.require("seed")?,
            extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the weights into `model` after checking every name and shape.
    pub fn load_into(&self, model: &mut Predictor<f32>) -> Result<()> {
        let mut params = model.parameters_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "checkpoint has {} tensors, model has {}",
                    self.tensors.len(),
                    params.len()
                ),
            ));
        }
        for ((name, p), (cname, t)) in params.iter().zip(&self.tensors) {
            if name != cname {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("expected tensor `{name}`, found `{cname}`"),
                ));
            }
            if p.shape() != t.shape() {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!(
                        "tensor `{name}`: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        p.shape()
                    ),
                ));
            }
        }
        for ((_, p), (_, t)) in params.iter_mut().zip(&self.tensors) {
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Rebuilds the model described by the manifest.
    pub fn to_model(&self) -> Result<Predictor<f32>> {
        let mut model = Predictor::new(self.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}
