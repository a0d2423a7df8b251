//! Evaluation metrics and per-horizon aggregation.
//!
//! F1 works on occupied/free classification at [`OCCUPIED_THRESHOLD`]; PSNR
//! and SSIM compare probability images with a peak value of 1; MSE is taken
//! over every cell of one channel, free space included.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{merge_values, GridSequence, OCCUPIED_THRESHOLD, SEMANTIC, STATIC};
use crate::predictor::{Mode, Predictor};

fn same_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("{} vs {} cells", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`; 1 when both grids are empty.
pub fn f1_score(pred: &[f32], truth: &[f32]) -> Result<f64> {
    same_len("f1_score", pred, truth)?;
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p > OCCUPIED_THRESHOLD, t > OCCUPIED_THRESHOLD) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

pub fn mse_channel(pred: &[f32], truth: &[f32]) -> Result<f64> {
    same_len("mse_channel", pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Domain("mse of an empty channel".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Decibels with a peak of 1; identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &[f32], truth: &[f32]) -> Result<f64> {
    let mse = mse_channel(pred, truth)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r * w + c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(r + k) * w1 + c + k] - s[r * w1 + c + k] - s[(r + k) * w1 + c] + s[r * w1 + c]
}

/// Mean SSIM over every `window x window` position that fits inside the grid,
/// with uniform weights and population statistics.
pub fn ssim(
    pred: &[f32],
    truth: &[f32],
    height: usize,
    width: usize,
    window: usize,
) -> Result<f64> {
    same_len("ssim", pred, truth)?;
    if pred.len() != height * width {
        return Err(Error::shape(
            "ssim",
            format!("{} cells for {height}x{width}", pred.len()),
        ));
    }
    if window == 0 || height < window || width < window {
        return Err(Error::Input(format!(
            "grid {height}x{width} is smaller than the {window}x{window} window"
        )));
    }
    let x = |i: usize| pred[i] as f64;
    let y = |i: usize| truth[i] as f64;
    let sx = integral(height, width, x);
    let sy = integral(height, width, y);
    let sxx = integral(height, width, |i| x(i) * x(i));
    let syy = integral(height, width, |i| y(i) * y(i));
    let sxy = integral(height, width, |i| x(i) * y(i));
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=height - window {
        for c in 0..=width - window {
            let mx = window_sum(&sx, width, r, c, window) / n;
            let my = window_sum(&sy, width, r, c, window) / n;
            // clamp tiny negative variances from cancellation
            let vx = (window_sum(&sxx, width, r, c, window) / n - mx * mx).max(0.0);
            let vy = (window_sum(&syy, width, r, c, window) / n - my * my).max(0.0);
            let cov = window_sum(&sxy, width, r, c, window) / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Anything that turns `t_in` past frames into `t_out` future frames.
pub trait Forecaster {
    fn t_in(&self) -> usize;
    fn t_out(&self) -> usize;
    fn forecast(&self, past: &GridSequence) -> Result<GridSequence>;
}

impl Forecaster for Predictor<f32> {
    fn t_in(&self) -> usize {
        self.config().t_in
    }

    fn t_out(&self) -> usize {
        self.config().t_out
    }

    fn forecast(&self, past: &GridSequence) -> Result<GridSequence> {
        self.predict(past)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        if values.iter().any(|v| v.is_infinite()) {
            let all = values.iter().all(|v| *v == f64::INFINITY);
            return Self {
                mean: f64::INFINITY,
                std: if all { 0.0 } else { f64::INFINITY },
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

pub const METRIC_F1: &str = "f1";
pub const METRIC_F1_MERGED: &str = "f1_merged";
pub const METRIC_PSNR: &str = "psnr";
pub const METRIC_SSIM: &str = "ssim";
pub const METRIC_MSE_STATIC: &str = "mse_static";
pub const METRIC_MSE_SEMANTIC: &str = "mse_semantic";

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon_s: f64,
    pub metrics: Vec<(String, Summary)>,
}

impl HorizonMetrics {
    pub fn get(&self, metric: &str) -> Option<Summary> {
        self.metrics
            .iter()
            .find(|(m, _)| m == metric)
            .map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Sequences left out for being too short or lacking two channels.
    pub skipped: usize,
}

pub const CSV_HEADER: &str = "horizon_s,metric,mean,std,n";

impl MetricsReport {
    /// Means of `metric` at every horizon, in horizon order.
    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.horizons
            .iter()
            .filter_map(|h| h.get(metric).map(|s| s.mean))
            .collect()
    }

    pub fn metric_names(&self) -> Vec<&str> {
        self.horizons
            .first()
            .map(|h| h.metrics.iter().map(|(m, _)| m.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for h in &self.horizons {
            for (m, s) in &h.metrics {
                let _ = writeln!(out, "{},{},{},{},{}", h.horizon_s, m, s.mean, s.std, s.n);
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(Error::Input(format!(
                    "expected header `{CSV_HEADER}`, got {other:?}"
                )))
            }
        }
        let mut report = Self::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Input(format!("metrics row {}: `{line}`", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let horizon: f64 = f[0].parse().map_err(|_| bad())?;
            let s = Summary {
                mean: f[2].parse().map_err(|_| bad())?,
                std: f[3].parse().map_err(|_| bad())?,
                n: f[4].parse().map_err(|_| bad())?,
            };
            match report.horizons.iter_mut().find(|h| h.horizon_s == horizon) {
                Some(h) => h.metrics.push((f[1].to_string(), s)),
                None => report.horizons.push(HorizonMetrics {
                    horizon_s: horizon,
                    metrics: vec![(f[1].to_string(), s)],
                }),
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub ssim_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ssim_window: 11 }
    }
}

/// Scores one forecast frame against the truth; `pred` holds one merged or
/// two separate channels.
fn frame_metrics(
    pred: &[Vec<f32>],
    truth: &[Vec<f32>],
    h: usize,
    w: usize,
    cfg: &EvalConfig,
) -> Result<Vec<(&'static str, f64)>> {
    let truth_merged = merge_values(truth);
    let pred_merged = merge_values(pred);
    let mut out = Vec::with_capacity(6);
    let mode = if pred.len() == 2 {
        Mode::Separate
    } else {
        Mode::Combined
    };
    match mode {
        Mode::Separate => {
            let f1 = (f1_score(&pred[STATIC], &truth[STATIC])?
                + f1_score(&pred[SEMANTIC], &truth[SEMANTIC])?)
                / 2.0;
            out.push((METRIC_F1, f1));
        }
        Mode::Combined => out.push((METRIC_F1, f1_score(&pred_merged, &truth_merged)?)),
    }
    out.push((METRIC_F1_MERGED, f1_score(&pred_merged, &truth_merged)?));
    out.push((METRIC_PSNR, psnr(&pred_merged, &truth_merged)?));
    out.push((
        METRIC_SSIM,
        ssim(&pred_merged, &truth_merged, h, w, cfg.ssim_window)?,
    ));
    if mode == Mode::Separate {
        out.push((
            METRIC_MSE_STATIC,
            mse_channel(&pred[STATIC], &truth[STATIC])?,
        ));
        out.push((
            METRIC_MSE_SEMANTIC,
            mse_channel(&pred[SEMANTIC], &truth[SEMANTIC])?,
        ));
    }
    Ok(out)
}

/// Forecasts every sequence from its first `t_in` frames and scores the next
/// `t_out` frames, one report row per horizon.
///
/// Sequences that are too short or not two-channel are skipped and counted.
pub fn evaluate<F: Forecaster + Sync + ?Sized>(
    model: &F,
    test_set: &[GridSequence],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (t_in, t_out) = (model.t_in(), model.t_out());
    // per sequence: None if skipped, else one metric row per horizon
    let scored: Vec<Option<Vec<Vec<(&'static str, f64)>>>> = test_set
        .par_iter()
        .map(|seq| {
            if seq.len() < t_in + t_out || seq.num_channels() != 2 {
                return Ok(None);
            }
            let past = seq.slice(0, t_in)?;
            let pred = model.forecast(&past)?;
            if pred.len() != t_out {
                return Err(Error::Contract(format!(
                    "forecaster returned {} frames, expected {t_out}",
                    pred.len()
                )));
            }
            let spec = seq.spec().unwrap();
            (0..t_out)
                .map(|k| {
                    let truth = &seq.frames()[t_in + k];
                    frame_metrics(
                        pred.frames()[k].channels(),
                        truth.channels(),
                        spec.height,
                        spec.width,
                        cfg,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;

    // values[horizon][metric] -> per-sequence samples
    let mut names: Vec<&'static str> = Vec::new();
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); t_out];
    let mut skipped = 0usize;
    let mut dt = None;
    for (seq, rows) in test_set.iter().zip(scored) {
        let Some(rows) = rows else {
            skipped += 1;
            continue;
        };
        dt.get_or_insert(seq.dt());
        for (k, row) in rows.into_iter().enumerate() {
            if names.is_empty() {
                names = row.iter().map(|(n, _)| *n).collect();
            }
            let slot = &mut values[k];
            if slot.is_empty() {
                *slot = vec![Vec::new(); names.len()];
            }
            for (i, (_, v)) in row.into_iter().enumerate() {
                slot[i].push(v);
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} malformed sequence(s)");
    }
    if names.is_empty() {
        return Err(Error::Input("no usable test sequences".into()));
    }
    let dt = dt.unwrap();
    let horizons = values
        .into_iter()
        .enumerate()
        .map(|(k, per_metric)| HorizonMetrics {
            horizon_s: (k + 1) as f64 * dt,
            metrics: names
                .iter()
                .zip(per_metric)
                .map(|(n, v)| (n.to_string(), Summary::of(&v)))
                .collect(),
        })
        .collect();
    Ok(MetricsReport { horizons, skipped })
}
