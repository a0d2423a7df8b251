//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden. The process exits non-zero on any
//! failure only when `OGM_ACCEPTANCE_STRICT=1`, so that the slow training
//! criteria cannot mask the rest of `cargo test`. `OGM_ACCEPTANCE_ONLY=1,4,10`
//! runs a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ogm_core::baselines::LinearProjection;
use ogm_core::cells::{stlstm_step, LayerState, StLstmParams};
use ogm_core::grid::{decode_ogs, encode_ogs};
use ogm_core::losses::{lambda_weights, overall_loss, semantic_loss, static_loss};
use ogm_core::metrics::{evaluate, f1_score, psnr, ssim, EvalConfig, SSIM_C1, SSIM_C2};
use ogm_core::predictor::{rss_epsilon, sample_rss_mask};
use ogm_core::synth::{generate_dataset, SceneTemplate};
use ogm_core::tensor::{check_f32_gradient, Scalar, ScalarFunction};
use ogm_core::trainer::{loss_log_csv, train, Checkpoint, TrainConfig, TrainReport};
use ogm_core::{
    CellKind, Graph, GridSequence, GridSpec, Mode, OccupancyGrid, Predictor, PredictorConfig,
    Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model used wherever a criterion asks for "defaults": the default
/// 4-layer, 64-channel network does not fit a desk machine, so depth and
/// width are reduced and frames are folded 4x4 into channels.
fn desk_model() -> PredictorConfig {
    PredictorConfig {
        num_layers: 2,
        hidden_channels: 16,
        kernel: 3,
        patch: 4,
        ..PredictorConfig::default()
    }
}

const DESK_ITERATIONS: u64 = 500;
/// Iterations per mode in the separate-vs-combined protocol run, which
/// asserts no quality and only needs both pipelines exercised.
const PROTOCOL_ITERATIONS: u64 = 60;
const OVERFIT_SCENES: usize = 8;
const OVERFIT_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- criterion 1

#[derive(Clone, Copy, Debug)]
enum Op {
    ConvInput,
    ConvWeight,
    ConvBias,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Scale,
    Concat,
    ConcatAll,
    Slice,
    Mean,
    Sum,
    StaticLoss,
    SemanticLoss,
    OverallLoss,
}

/// `sum(r ⊙ op(x))` with the other operands fixed.
struct OpCase {
    op: Op,
    others: Vec<Tensor<f64>>,
    proj: Tensor<f64>,
}

impl ScalarFunction for OpCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = |g: &mut Graph<T>, i: usize| g.constant(self.others[i].cast());
        let y = match self.op {
            Op::ConvInput => {
                let (w, b) = (c(g, 0), c(g, 1));
                g.conv2d(x, w, Some(b))?
            }
            Op::ConvWeight => {
                let (inp, b) = (c(g, 0), c(g, 1));
                g.conv2d(inp, x, Some(b))?
            }
            Op::ConvBias => {
                let (inp, w) = (c(g, 0), c(g, 1));
                g.conv2d(inp, w, Some(x))?
            }
            Op::Add => {
                let o = c(g, 0);
                g.add(x, o)?
            }
            Op::Sub => {
                let o = c(g, 0);
                g.sub(o, x)?
            }
            Op::Mul => {
                let o = c(g, 0);
                g.mul(x, o)?
            }
            Op::Sigmoid => g.sigmoid(x)?,
            Op::Tanh => g.tanh(x)?,
            Op::Abs => g.abs(x)?,
            Op::Square => g.square(x)?,
            Op::Scale => g.scale(x, T::from_f64_lossy(-1.75))?,
            Op::Concat => {
                let o = c(g, 0);
                g.concat_channels(o, x)?
            }
            Op::ConcatAll => {
                let (a, b) = (c(g, 0), c(g, 1));
                g.concat_all(&[a, x, b])?
            }
            Op::Slice => g.slice_channels(x, 1, 2)?,
            Op::Mean => g.mean(x)?,
            Op::Sum => g.sum(x)?,
            Op::StaticLoss => {
                let s = g.sigmoid(x)?;
                static_loss(g, &self.others[0].cast(), s)?
            }
            Op::SemanticLoss => {
                let s = g.sigmoid(x)?;
                semantic_loss(g, &self.others[0].cast(), s, 2.0)?
            }
            Op::OverallLoss => {
                let s = g.sigmoid(x)?;
                let half = g.slice_channels(s, 0, 2)?;
                let rest = g.slice_channels(s, 2, 2)?;
                let a = static_loss(g, &self.others[0].cast(), half)?;
                let b = semantic_loss(g, &self.others[1].cast(), rest, 2.0)?;
                overall_loss(g, a, b, 10.0)?
            }
        };
        if g.value(y).len() == 1 {
            return Ok(y);
        }
        let r = g.constant(self.proj.cast());
        let w = g.mul(y, r)?;
        g.sum(w)
    }
}

#[derive(Clone, Copy, Debug)]
enum StSlot {
    X,
    H,
    C,
    M,
    Param(usize),
}

/// One full ST-LSTM step, differentiated with respect to one slot.
struct StStep {
    params: StLstmParams<f64>,
    x: Tensor<f64>,
    h: Tensor<f64>,
    c: Tensor<f64>,
    m: Tensor<f64>,
    slot: StSlot,
    proj: [Tensor<f64>; 3],
}

impl ScalarFunction for StStep {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let pick = |g: &mut Graph<T>, slot: StSlot, t: &Tensor<f64>| match (slot, self.slot) {
            (StSlot::X, StSlot::X)
            | (StSlot::H, StSlot::H)
            | (StSlot::C, StSlot::C)
            | (StSlot::M, StSlot::M) => v,
            (StSlot::Param(a), StSlot::Param(b)) if a == b => v,
            _ => g.constant(t.cast()),
        };
        let x = pick(g, StSlot::X, &self.x);
        let h = pick(g, StSlot::H, &self.h);
        let c = pick(g, StSlot::C, &self.c);
        let m = pick(g, StSlot::M, &self.m);
        let tensors = self.params.tensors();
        let mut vars = Vec::new();
        for (i, (_, t)) in tensors.iter().enumerate() {
            vars.push(pick(g, StSlot::Param(i), t));
        }
        let bound = ogm_core::cells::BoundStLstm {
            xh_weight: vars[0],
            xh_bias: vars[1],
            xm_weight: vars[2],
            xm_bias: vars[3],
            cm_weight: vars[4],
            fuse_weight: vars[5],
            fuse_bias: vars[6],
            hidden: self.params.hidden(),
        };
        let (s, m2) = stlstm_step(g, &bound, x, LayerState { h, c }, m)?;
        let mut total = None;
        for (out, r) in [s.h, s.c, m2].into_iter().zip(&self.proj) {
            let rv = g.constant(r.cast());
            let w = g.mul(out, rv)?;
            let part = g.sum(w)?;
            total = Some(match total {
                None => part,
                Some(t) => g.add(t, part)?,
            });
        }
        Ok(total.unwrap())
    }
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
}

/// Abs is not differentiable at 0; keep every coordinate well away from it.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = 0.1 + rng.gen::<f64>();
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shape = [2, 4, 8, 8];
    let eps = 1e-4;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut failures = Vec::new();
    let mut record = |name: String, err: Result<f64>| match err {
        Ok(e) => {
            if e > worst.0 {
                worst = (e, name.clone());
            }
            if e >= 1e-3 {
                failures.push(format!("{name}: {e:.2e}"));
            }
        }
        Err(e) => failures.push(format!("{name}: {e}")),
    };

    let w_shape = [3, 4, 3, 3];
    let out_shape = [2, 3, 8, 8];
    let ops: Vec<(Op, Tensor<f64>, Vec<Tensor<f64>>, Vec<usize>)> = vec![
        (
            Op::ConvInput,
            normal(&shape, 1.0, &mut rng),
            vec![normal(&w_shape, 0.5, &mut rng), normal(&[3], 0.5, &mut rng)],
            out_shape.to_vec(),
        ),
        (
            Op::ConvWeight,
            normal(&w_shape, 0.5, &mut rng),
            vec![normal(&shape, 1.0, &mut rng), normal(&[3], 0.5, &mut rng)],
            out_shape.to_vec(),
        ),
        (
            Op::ConvBias,
            normal(&[3], 0.5, &mut rng),
            vec![
                normal(&shape, 1.0, &mut rng),
                normal(&w_shape, 0.5, &mut rng),
            ],
            out_shape.to_vec(),
        ),
        (
            Op::Add,
            normal(&shape, 1.0, &mut rng),
            vec![normal(&shape, 1.0, &mut rng)],
            shape.to_vec(),
        ),
        (
            Op::Sub,
            normal(&shape, 1.0, &mut rng),
            vec![normal(&shape, 1.0, &mut rng)],
            shape.to_vec(),
        ),
        (
            Op::Mul,
            normal(&shape, 1.0, &mut rng),
            vec![normal(&shape, 1.0, &mut rng)],
            shape.to_vec(),
        ),
        (
            Op::Sigmoid,
            normal(&shape, 2.0, &mut rng),
            vec![],
            shape.to_vec(),
        ),
        (
            Op::Tanh,
            normal(&shape, 2.0, &mut rng),
            vec![],
            shape.to_vec(),
        ),
        (
            Op::Abs,
            away_from_zero(&shape, &mut rng),
            vec![],
            shape.to_vec(),
        ),
        (
            Op::Square,
            normal(&shape, 1.0, &mut rng),
            vec![],
            shape.to_vec(),
        ),
        (
            Op::Scale,
            normal(&shape, 1.0, &mut rng),
            vec![],
            shape.to_vec(),
        ),
        (
            Op::Concat,
            normal(&shape, 1.0, &mut rng),
            vec![normal(&[2, 2, 8, 8], 1.0, &mut rng)],
            vec![2, 6, 8, 8],
        ),
        (
            Op::ConcatAll,
            normal(&[2, 1, 8, 8], 1.0, &mut rng),
            vec![
                normal(&[2, 2, 8, 8], 1.0, &mut rng),
                normal(&[2, 1, 8, 8], 1.0, &mut rng),
            ],
            shape.to_vec(),
        ),
        (
            Op::Slice,
            normal(&shape, 1.0, &mut rng),
            vec![],
            vec![2, 2, 8, 8],
        ),
        (Op::Mean, normal(&shape, 1.0, &mut rng), vec![], vec![1]),
        (Op::Sum, normal(&shape, 1.0, &mut rng), vec![], vec![1]),
        (
            Op::StaticLoss,
            normal(&shape, 2.0, &mut rng),
            vec![binary(&shape, &mut rng)],
            vec![1],
        ),
        (
            Op::SemanticLoss,
            normal(&shape, 2.0, &mut rng),
            vec![binary(&shape, &mut rng)],
            vec![1],
        ),
        (
            Op::OverallLoss,
            normal(&shape, 2.0, &mut rng),
            vec![
                binary(&[2, 2, 8, 8], &mut rng),
                binary(&[2, 2, 8, 8], &mut rng),
            ],
            vec![1],
        ),
    ];
    let n_ops = ops.len();
    for (op, point, others, out) in ops {
        let case = OpCase {
            op,
            others,
            proj: normal(&out, 1.0, &mut rng),
        };
        // the static loss has kinks where prediction meets target; sigmoid keeps them unreachable
        record(format!("{op:?}"), check_f32_gradient(&case, &point, eps));
    }

    let (cin, d) = (4, 4);
    let params = StLstmParams::<f64>::init(cin, d, 3, &mut rng);
    let state = [2, d, 8, 8];
    let base = StStep {
        params,
        x: normal(&shape, 1.0, &mut rng),
        h: normal(&state, 0.5, &mut rng),
        c: normal(&state, 0.5, &mut rng),
        m: normal(&state, 0.5, &mut rng),
        slot: StSlot::X,
        proj: [
            normal(&state, 1.0, &mut rng),
            normal(&state, 1.0, &mut rng),
            normal(&state, 1.0, &mut rng),
        ],
    };
    let names: Vec<String> = base
        .params
        .tensors()
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let mut slots = vec![
        (StSlot::X, "x".to_string(), base.x.clone()),
        (StSlot::H, "h".to_string(), base.h.clone()),
        (StSlot::C, "c".to_string(), base.c.clone()),
        (StSlot::M, "m".to_string(), base.m.clone()),
    ];
    for (i, (_, t)) in base.params.tensors().into_iter().enumerate() {
        slots.push((StSlot::Param(i), names[i].clone(), t.clone()));
    }
    let mut step = base;
    let n_slots = slots.len();
    for (slot, name, point) in slots {
        step.slot = slot;
        record(
            format!("st-lstm/{name}"),
            check_f32_gradient(&step, &point, eps),
        );
    }

    let detail = format!(
        "{n_ops} ops + {n_slots} ST-LSTM inputs, worst relative error {:.2e} ({})",
        worst.0, worst.1
    );
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(
            false,
            format!("{detail}; over 1e-3: {}", failures.join(", ")),
        )
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let expected = [
        (0u64, 0.5),
        (100, 1.0 - 0.5 * (-100.0f64 / 5000.0).exp()),
        (5000, 0.816_060_3),
        (1_000_000, 1.0),
    ];
    let mut worst = 0.0f64;
    for (k, want) in expected {
        let got = rss_epsilon(k, 0.5, 1.0, 5e3).unwrap();
        worst = worst.max((got - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut freq_err = 0.0f64;
    for eps in [0.5, 0.816_060_3, 0.95] {
        // step 0 is always ground truth, so count steps 1..
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| sample_rss_mask(2, eps, &mut rng)[1])
            .count();
        freq_err = freq_err.max((hits as f64 / draws as f64 - eps).abs());
    }
    outcome(
        worst < 1e-6 && freq_err <= 0.02,
        format!(
            "schedule error {worst:.1e}, worst mask frequency error {freq_err:.4} over 10^4 draws"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item().unwrap()
}

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn criterion_3() -> Outcome {
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "static identical",
            scalar_of(|g| {
                let p = g.param(vec_t(&[0.3, 0.7]));
                static_loss(g, &vec_t(&[0.3, 0.7]), p)
            }),
            0.0,
        ),
        (
            "static 0.8 vs 1",
            scalar_of(|g| {
                let p = g.param(Tensor::full(&[4, 4], 0.8));
                static_loss(g, &Tensor::full(&[4, 4], 1.0), p)
            }),
            0.2,
        ),
        (
            "lambda occupied",
            lambda_weights(&vec_t(&[1.0]), 2.0).data()[0],
            3.0,
        ),
        (
            "lambda free",
            lambda_weights(&vec_t(&[0.0]), 2.0).data()[0],
            1.0,
        ),
        (
            "lambda half",
            lambda_weights(&vec_t(&[0.5]), 2.0).data()[0],
            2.0,
        ),
        (
            "semantic identical",
            scalar_of(|g| {
                let p = g.param(vec_t(&[1.0, 0.0]));
                semantic_loss(g, &vec_t(&[1.0, 0.0]), p, 2.0)
            }),
            0.0,
        ),
        (
            "semantic one cell",
            scalar_of(|g| {
                let p = g.param(vec_t(&[0.0]));
                semantic_loss(g, &vec_t(&[1.0]), p, 2.0)
            }),
            3.0,
        ),
        (
            "semantic two cells",
            scalar_of(|g| {
                let p = g.param(vec_t(&[0.5, 0.5]));
                semantic_loss(g, &vec_t(&[1.0, 0.0]), p, 2.0)
            }),
            0.5,
        ),
        (
            "overall k0=10",
            scalar_of(|g| {
                let a = g.constant(Tensor::scalar(0.1));
                let b = g.constant(Tensor::scalar(0.05));
                overall_loss(g, a, b, 10.0)
            }),
            0.6,
        ),
        (
            "overall zero",
            scalar_of(|g| {
                let a = g.constant(Tensor::scalar(0.0));
                let b = g.constant(Tensor::scalar(0.0));
                overall_loss(g, a, b, 7.0)
            }),
            0.0,
        ),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-6)
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    outcome(
        bad.is_empty(),
        format!(
            "{} hand-computed examples; {}",
            cases.len(),
            if bad.is_empty() {
                "all exact".into()
            } else {
                bad.join(", ")
            }
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Direct sliding-window SSIM, written independently of the library.
fn brute_ssim(a: &[f32], b: &[f32], h: usize, w: usize, win: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let mut xs = Vec::with_capacity(win * win);
            let mut ys = Vec::with_capacity(win * win);
            for i in r..r + win {
                for j in c..c + win {
                    xs.push(a[i * w + j] as f64);
                    ys.push(b[i * w + j] as f64);
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / n;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let f1 = f1_score(&[1.0, 1.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    pass &= (f1 - 2.0 / 3.0).abs() < 1e-12;
    notes.push(format!("F1 {f1:.6}"));

    let truth = vec![0.0f32; 100];
    let mut pred = truth.clone();
    for v in pred.iter_mut().take(25) {
        *v = 0.2; // mean square error 25 * 0.04 / 100 = 0.01
    }
    let p = psnr(&pred, &truth).unwrap();
    pass &= (p - 20.0).abs() < 1e-4;
    notes.push(format!("PSNR {p:.5} dB"));

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x: Vec<f32> = (0..32 * 32).map(|_| rng.gen()).collect();
    let self_ssim = ssim(&x, &x, 32, 32, 11).unwrap();
    pass &= (self_ssim - 1.0).abs() < 1e-9;
    notes.push(format!("SSIM(x,x) {self_ssim:.9}"));

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a: Vec<f32> = (0..32 * 32).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..32 * 32).map(|_| rng.gen()).collect();
        let got = ssim(&a, &b, 32, 32, 11).unwrap();
        worst = worst.max((got - brute_ssim(&a, &b, 32, 32, 11)).abs());
    }
    pass &= worst < 1e-6;
    notes.push(format!(
        "SSIM vs sliding-window oracle, 20 pairs, worst {worst:.1e}"
    ));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- criteria 5, 7, 9

fn overfit_data() -> Vec<GridSequence> {
    generate_dataset(OVERFIT_SCENES, &SceneTemplate::default(), OVERFIT_SEED).unwrap()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        max_iterations: Some(DESK_ITERATIONS),
        // one batch of 8 per epoch; enough epochs to reach the iteration budget
        epochs: DESK_ITERATIONS as usize,
        seed: 5,
        ..TrainConfig::default()
    }
}

struct OverfitRun {
    model: Predictor<f32>,
    report: TrainReport,
    seconds: f64,
}

fn overfit_run() -> OverfitRun {
    let data = overfit_data();
    let mut model = Predictor::<f32>::new(desk_model(), 5).unwrap();
    let t = Instant::now();
    let report = train(&mut model, &data, &overfit_config(), |_, _| Ok(())).unwrap();
    OverfitRun {
        model,
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn criterion_5(run: &OverfitRun) -> Outcome {
    let log = &run.report.log;
    if let Some(why) = &run.report.aborted {
        return outcome(false, format!("training aborted: {why}"));
    }
    let first = log[0].l_overall;
    let last = log.last().unwrap().l_overall;
    let ratio = last / first;
    let report = evaluate(&run.model, &overfit_data(), &EvalConfig::default()).unwrap();
    let f1_3s = report.series("f1")[5];
    outcome(
        ratio < 0.1 && f1_3s > 0.9,
        format!(
            "{} iterations in {:.0} s; L0 {first:.4} -> {last:.4} (ratio {ratio:.3}, need < 0.1); train F1 at 3 s {f1_3s:.3} (need > 0.9)",
            run.report.iterations, run.seconds
        ),
    )
}

fn criterion_7(run: &OverfitRun) -> Outcome {
    let held_out = generate_dataset(50, &SceneTemplate::default(), 7_000).unwrap();
    let report = evaluate(&run.model, &held_out, &EvalConfig::default()).unwrap();
    let f1 = report.series("f1");
    let rises: Vec<f64> = f1
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&d| d > 0.0)
        .collect();
    let trend_ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.005);
    let series: Vec<String> = f1.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
    let degenerate = f1.iter().all(|&v| v == f1[0]);
    let mut detail = format!(
        "held-out F1 % by horizon [{}], {} rise(s)",
        series.join(", "),
        rises.len()
    );
    if degenerate {
        detail.push_str("; flat series, the trend is vacuous");
    }
    outcome(trend_ok && !degenerate, detail)
}

fn criterion_9(a: &OverfitRun) -> Outcome {
    let b = overfit_run();
    let head = |r: &TrainReport| {
        loss_log_csv(&r.log)
            .lines()
            .take(11)
            .collect::<Vec<_>>()
            .join("\n")
    };
    let same_head = head(&a.report) == head(&b.report);
    let same_log = loss_log_csv(&a.report.log) == loss_log_csv(&b.report.log);
    let ck = |r: &OverfitRun| Checkpoint::from_model(&r.model, r.report.iterations, 5).to_bytes();
    let same_ck = ck(a) == ck(&b);
    outcome(
        same_head && same_ck,
        format!("first 10 log rows identical: {same_head}; full log identical: {same_log}; final checkpoints identical: {same_ck}"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let scenes = generate_dataset(50, &SceneTemplate::default(), 6_000).unwrap();
    let report = evaluate(
        &LinearProjection::default(),
        &scenes,
        &EvalConfig::default(),
    )
    .unwrap();
    let mse = report.series("mse_semantic");
    let worst = mse.iter().cloned().fold(0.0, f64::max);
    let series: Vec<String> = mse.iter().map(|v| format!("{v:.2e}")).collect();
    outcome(
        mse.len() == 6 && worst < 0.01 && report.skipped == 0,
        format!(
            "semantic MSE by horizon [{}] on 50 scenes",
            series.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn ogm(args: &[&str]) -> std::io::Result<std::process::Output> {
    Command::new(env!("CARGO_BIN_EXE_ogm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("OGMPRED_DATA")
        .env_remove("OGMPRED_CKPT")
        .output()
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let s = |x: &Path| x.to_str().unwrap().to_string();
    let cfg = desk_model();
    std::fs::write(
        p("train.txt"),
        format!(
            "num_layers = {}\nhidden_channels = {}\nkernel = {}\npatch = {}\nmax_iterations = {PROTOCOL_ITERATIONS}\nepochs = 1000\nseed = 8\n",
            cfg.num_layers, cfg.hidden_channels, cfg.kernel, cfg.patch
        ),
    )
    .unwrap();
    let mut steps: Vec<Vec<String>> = vec![vec![
        "synth".into(),
        "--out".into(),
        s(&p("data")),
        "--scenes".into(),
        "20".into(),
        "--seed".into(),
        "8".into(),
    ]];
    for mode in ["separate", "combined"] {
        steps.push(
            [
                "train",
                "--data",
                &s(&p("data")),
                "--config",
                &s(&p("train.txt")),
                "--mode",
                mode,
                "--out",
                &s(&p(&format!("{mode}.ckpt"))),
            ]
            .map(String::from)
            .to_vec(),
        );
        steps.push(
            [
                "eval",
                "--ckpt",
                &s(&p(&format!("{mode}.ckpt"))),
                "--data",
                &s(&p("data")),
                "--out",
                &s(&p(&format!("{mode}.csv"))),
            ]
            .map(String::from)
            .to_vec(),
        );
    }
    steps.push(
        [
            "report",
            "--csv",
            &s(&p("separate.csv")),
            &s(&p("combined.csv")),
            "--out",
            &s(&p("report")),
        ]
        .map(String::from)
        .to_vec(),
    );
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        match ogm(&args) {
            Ok(out) if out.status.success() => {}
            Ok(out) => {
                return outcome(
                    false,
                    format!(
                        "`ogm {}` failed: {}",
                        step[0],
                        String::from_utf8_lossy(&out.stderr).trim()
                    ),
                )
            }
            Err(e) => return outcome(false, format!("cannot run ogm: {e}")),
        }
    }
    let table = std::fs::read_to_string(p("report/f1_table.md")).unwrap_or_default();
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("| separate") || l.starts_with("| combined"))
        .collect();
    outcome(
        rows.len() == 2,
        format!(
            "20 scenes, 80/20 split, {PROTOCOL_ITERATIONS} iterations per mode; F1 rows: {}",
            rows.join(" / ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 10

fn random_sequence(rng: &mut ChaCha8Rng) -> GridSequence {
    let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
    let channels = rng.gen_range(1..3);
    let n = rng.gen_range(1..6);
    let dt = [0.125, 0.25, 0.5, 1.0][rng.gen_range(0..4)];
    let spec = GridSpec::new(h, w, 0.5).unwrap();
    let frames = (0..n)
        .map(|k| {
            let chans = (0..channels)
                .map(|_| (0..h * w).map(|_| rng.gen::<f32>()).collect())
                .collect();
            OccupancyGrid::new(spec, chans, k as f64 * dt).unwrap()
        })
        .collect();
    GridSequence::new(frames, dt).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng) -> PredictorConfig {
    PredictorConfig {
        num_layers: rng.gen_range(1..4),
        hidden_channels: rng.gen_range(1..7),
        kernel: [1, 3, 5][rng.gen_range(0..3)],
        patch: rng.gen_range(1..3),
        cell: if rng.gen_bool(0.5) {
            CellKind::StLstm
        } else {
            CellKind::ConvLstm
        },
        mode: if rng.gen_bool(0.5) {
            Mode::Separate
        } else {
            Mode::Combined
        },
        independent_channels: rng.gen_bool(0.3),
        t_in: rng.gen_range(2..10),
        t_out: rng.gen_range(1..7),
        ..PredictorConfig::default()
    }
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dir = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    for i in 0..100 {
        let seq = random_sequence(&mut rng);
        let bytes = encode_ogs(&seq).unwrap();
        match decode_ogs(&bytes) {
            Ok(back) => {
                if back != seq || encode_ogs(&back).unwrap() != bytes {
                    bad.push(format!("ogs #{i}"));
                }
            }
            Err(e) => bad.push(format!("ogs #{i}: {e}")),
        }

        let mut cfg = random_model(&mut rng);
        if cfg.independent_channels && cfg.mode == Mode::Combined {
            cfg.independent_channels = false;
        }
        let model = Predictor::<f32>::new(cfg, rng.gen()).unwrap();
        let ck = Checkpoint::from_model(&model, rng.gen_range(0..10_000), rng.gen());
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let ok = Checkpoint::load(&path).and_then(|back| {
            let restored = back.to_model()?;
            let same = back.to_bytes() == ck.to_bytes()
                && restored.parameters().iter().zip(model.parameters()).all(
                    |((na, a), (nb, b))| {
                        na == &nb
                            && a.shape() == b.shape()
                            && a.data()
                                .iter()
                                .zip(b.data())
                                .all(|(x, y)| x.to_bits() == y.to_bits())
                    },
                );
            Ok(same)
        });
        match ok {
            Ok(true) => {}
            Ok(false) => bad.push(format!("checkpoint #{i}")),
            Err(e) => bad.push(format!("checkpoint #{i}: {e}")),
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "100 OGS sequences and 100 checkpoints roundtrip bit for bit".into()
        } else {
            format!("mismatches: {}", bad.join(", "))
        },
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<u32>> = std::env::var("OGM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("OGM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let names = [
        "",
        "gradient suite",
        "schedule oracle",
        "loss oracles",
        "metric oracles",
        "overfit convergence",
        "baseline exactness",
        "horizon degradation trend",
        "separate vs combined protocol",
        "determinism",
        "format roundtrips",
    ];
    let mut failed = Vec::new();
    let mut report = |n: u32, t: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {tag} {:<30} {} [{:.1} s]",
            names[n as usize],
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    };

    let simple: [(u32, fn() -> Outcome); 5] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (6, criterion_6),
    ];
    for (n, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, t, f());
        }
    }
    if wanted(5) || wanted(7) || wanted(9) {
        let t = Instant::now();
        let run = overfit_run();
        if wanted(5) {
            report(5, t, criterion_5(&run));
        }
        if wanted(7) {
            let t = Instant::now();
            report(7, t, criterion_7(&run));
        }
        if wanted(9) {
            let t = Instant::now();
            report(9, t, criterion_9(&run));
        }
    }
    for (n, f) in [(8u32, criterion_8 as fn() -> Outcome), (10, criterion_10)] {
        if wanted(n) {
            let t = Instant::now();
            report(n, t, f());
        }
    }

    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}
