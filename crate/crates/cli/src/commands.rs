use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ogm_core::baselines::LinearProjection;
use ogm_core::config::KvConfig;
use ogm_core::grid::import_sequence;
use ogm_core::metrics::{evaluate, EvalConfig, Forecaster, MetricsReport, METRIC_F1};
use ogm_core::synth::{generate_dataset, SceneTemplate};
use ogm_core::trainer::{
    loss_log_csv, split_indices, train as run_training, Checkpoint, TrainConfig,
};
use ogm_core::{CellKind, Error, GridSequence, Mode, Predictor, PredictorConfig, Result};

use crate::data::{load_dir, ogs_files, read_ogs, write_ogs};
use crate::{
    BaselineArg, CellArg, EvalArgs, ImportArgs, ModeArg, PredictArgs, ReportArgs, SplitArg,
    SynthArgs, TrainArgs,
};

/// Side of the square area every synthetic grid covers, meters.
const SCENE_SPAN_M: f64 = 32.0;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be positive".into()));
    }
    let mut kv = match &a.template {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    if let Some(side) = a.grid {
        if side == 0 {
            return Err(Error::Config("--grid must be positive".into()));
        }
        kv.set("grid", side);
        kv.set("resolution", SCENE_SPAN_M / side as f64);
    }
    if let Some(p) = a.noise {
        kv.set("noise", p);
    }
    let template = SceneTemplate::from_kv(&kv)?;
    let scenes = generate_dataset(a.scenes, &template, a.seed)?;

    create_dir(&a.out)?;
    // drop scene files a previous, larger run left behind
    if let Ok(old) = ogs_files(&a.out) {
        for p in old {
            if p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with("scene_"))
            {
                std::fs::remove_file(p)?;
            }
        }
    }
    let mut manifest = template.to_kv();
    manifest.set("scenes", a.scenes);
    manifest.set("seed", a.seed);
    for (i, seq) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.ogs");
        write_ogs(&a.out.join(&name), seq)?;
        manifest.push("file", name);
    }
    std::fs::write(a.out.join("manifest.txt"), manifest.to_text())?;
    info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

pub fn import(a: ImportArgs) -> Result<()> {
    let seq = import_sequence(&a.images, &a.manifest)?;
    create_dir(&a.out)?;
    let stem = a
        .manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let path = a.out.join(format!("{stem}.ogs"));
    write_ogs(&path, &seq)?;
    info!("wrote {} frames to {}", seq.len(), path.display());
    Ok(())
}

fn known_train_keys() -> Vec<&'static str> {
    PredictorConfig::known_keys()
        .iter()
        .chain(TrainConfig::known_keys())
        .copied()
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut mcfg = PredictorConfig::default();
    let mut tcfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let kv = KvConfig::load(path)?;
        let unknown = kv.unknown_keys(&known_train_keys());
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        mcfg.apply_kv(&kv, "")?;
        tcfg.apply_kv(&kv)?;
    }
    if let Some(c) = a.cell {
        mcfg.cell = match c {
            CellArg::Stlstm => CellKind::StLstm,
            CellArg::Convlstm => CellKind::ConvLstm,
        };
    }
    if let Some(m) = a.mode {
        mcfg.mode = match m {
            ModeArg::Separate => Mode::Separate,
            ModeArg::Combined => Mode::Combined,
        };
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    if let Some(n) = a.iterations {
        tcfg.max_iterations = Some(n);
    }
    mcfg.validate()?;
    tcfg.validate()?;

    let data = load_dir(&a.data)?;
    let (train_idx, test_idx) = split_indices(data.len(), tcfg.train_fraction, tcfg.seed);
    let train_set: Vec<GridSequence> = train_idx.iter().map(|&i| data[i].clone()).collect();
    info!(
        "{} sequences: {} train / {} held out",
        data.len(),
        train_set.len(),
        test_idx.len()
    );

    let mut model = Predictor::<f32>::new(mcfg, tcfg.seed)?;
    let stamp = |model: &Predictor<f32>, k: u64| {
        let mut ck = Checkpoint::from_model(model, k, tcfg.seed);
        ck.extra.set("split_seed", tcfg.seed);
        ck.extra.set("train_fraction", tcfg.train_fraction);
        ck.extra.set("sequences", data.len());
        tcfg.to_kv(&mut ck.extra);
        ck
    };
    let out = a.out.clone();
    let report = run_training(&mut model, &train_set, &tcfg, |m, k| {
        info!("checkpoint at iteration {k}");
        stamp(m, k).save(&out)
    })?;
    stamp(&model, report.iterations).save(&a.out)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    std::fs::write(&log_path, loss_log_csv(&report.log))?;
    info!(
        "wrote {} after {} iterations, loss log {}",
        a.out.display(),
        report.iterations,
        log_path.display()
    );
    match report.aborted {
        Some(msg) => Err(Error::Numerical(format!("{msg}; last finite state saved"))),
        None => Ok(()),
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.to_model()?;
    let seq = read_ogs(&a.input)?;
    let t_in = model.config().t_in;
    if seq.len() < t_in {
        return Err(Error::Input(format!(
            "{} holds {} frames, the model needs {t_in}",
            a.input.display(),
            seq.len()
        )));
    }
    let past = seq.slice(seq.len() - t_in, seq.len())?;
    let forecast = model.predict(&past)?;
    write_ogs(&a.out, &forecast)?;

    let mut meta = KvConfig::default();
    meta.set("checkpoint", a.ckpt.display());
    meta.set("input", a.input.display());
    meta.set("observed_from_frame", seq.len() - t_in);
    meta.set("last_observed_s", past.frames().last().unwrap().timestamp);
    for f in forecast.frames() {
        meta.push("frame_time_s", f.timestamp);
    }
    meta.set("cell", model.config().cell.as_str());
    meta.set("mode", model.config().mode.as_str());
    std::fs::write(with_suffix(&a.out, ".meta"), meta.to_text())?;
    info!(
        "wrote {} forecast frames to {}",
        forecast.len(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.ssim_window == 0 {
        return Err(Error::Config("--ssim-window must be positive".into()));
    }
    let data = load_dir(&a.data)?;
    let cfg = EvalConfig {
        ssim_window: a.ssim_window,
    };
    let (model, split_info): (Box<dyn Forecaster + Sync>, Option<(f64, u64)>) =
        match (&a.ckpt, a.baseline) {
            (_, Some(BaselineArg::Linear)) => {
                if a.t_in < 2 || a.t_out == 0 {
                    return Err(Error::Config(
                        "the baseline needs --t-in >= 2 and --t-out >= 1".into(),
                    ));
                }
                (
                    Box::new(LinearProjection {
                        t_in: a.t_in,
                        t_out: a.t_out,
                    }),
                    None,
                )
            }
            (Some(path), None) => {
                let ck = Checkpoint::load(path)?;
                let fraction = ck.extra.parsed("train_fraction")?.unwrap_or(0.8);
                let seed = ck.extra.parsed("split_seed")?.unwrap_or(ck.seed);
                (Box::new(ck.to_model()?), Some((fraction, seed)))
            }
            (None, None) => return Err(Error::Config("pass --ckpt or --baseline".into())),
        };
    let split = a.split.unwrap_or(if split_info.is_some() {
        SplitArg::Test
    } else {
        SplitArg::All
    });
    let chosen: Vec<GridSequence> = match split {
        SplitArg::All => data,
        SplitArg::Test | SplitArg::Train => {
            let (fraction, seed) = split_info.unwrap_or((0.8, 0));
            let (train_idx, test_idx) = split_indices(data.len(), fraction, seed);
            let idx = if split == SplitArg::Test {
                test_idx
            } else {
                train_idx
            };
            idx.iter().map(|&i| data[i].clone()).collect()
        }
    };
    if chosen.is_empty() {
        return Err(Error::Input(format!("the {split:?} split is empty")));
    }
    let report = evaluate(model.as_ref(), &chosen, &cfg)?;
    if report.skipped > 0 {
        warn!("{} sequence(s) skipped", report.skipped);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&a.out, report.to_csv())?;
    let f1: Vec<String> = report
        .series(METRIC_F1)
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect();
    info!("F1 by horizon: {}", f1.join(" "));
    Ok(())
}

/// Plot panels: one file per image metric, one column pair per model.
const PANELS: &[&str] = &["psnr", "ssim", "mse_static", "mse_semantic"];

pub fn report(a: ReportArgs) -> Result<()> {
    let mut models: Vec<(String, MetricsReport)> = Vec::new();
    for path in &a.csv {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let text = std::fs::read_to_string(path)?;
        let report = MetricsReport::from_csv(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        models.push((name, report));
    }
    create_dir(&a.out)?;

    let mut long = String::from("model,horizon_s,metric,mean,std,n\n");
    for (name, r) in &models {
        for h in &r.horizons {
            for (m, s) in &h.metrics {
                let _ = writeln!(
                    long,
                    "{name},{},{m},{},{},{}",
                    h.horizon_s, s.mean, s.std, s.n
                );
            }
        }
    }
    std::fs::write(a.out.join("comparison.csv"), long)?;

    let horizons: Vec<f64> = {
        let mut hs: Vec<f64> = models
            .iter()
            .flat_map(|(_, r)| r.horizons.iter().map(|h| h.horizon_s))
            .collect();
        hs.sort_by(f64::total_cmp);
        hs.dedup();
        hs
    };
    let lookup = |r: &MetricsReport, h: f64, metric: &str| {
        r.horizons
            .iter()
            .find(|x| x.horizon_s == h)
            .and_then(|x| x.get(metric))
    };

    let mut table = String::from("| model |");
    for h in &horizons {
        let _ = write!(table, " {h} s |");
    }
    table.push_str("\n|---|");
    table.push_str(&"---|".repeat(horizons.len()));
    table.push('\n');
    for (name, r) in &models {
        let _ = write!(table, "| {name} |");
        for &h in &horizons {
            match lookup(r, h, METRIC_F1) {
                Some(s) => {
                    let _ = write!(table, " {:.2} ± {:.2} |", 100.0 * s.mean, 100.0 * s.std);
                }
                None => table.push_str(" – |"),
            }
        }
        table.push('\n');
    }
    std::fs::write(a.out.join("f1_table.md"), table)?;

    for panel in PANELS {
        let mut csv = String::from("horizon_s");
        for (name, _) in &models {
            let _ = write!(csv, ",{name}_mean,{name}_std");
        }
        csv.push('\n');
        for &h in &horizons {
            let _ = write!(csv, "{h}");
            for (_, r) in &models {
                match lookup(r, h, panel) {
                    Some(s) => {
                        let _ = write!(csv, ",{},{}", s.mean, s.std);
                    }
                    None => csv.push_str(",,"),
                }
            }
            csv.push('\n');
        }
        std::fs::write(a.out.join(format!("panel_{panel}.csv")), csv)?;
    }
    info!(
        "wrote comparison of {} model(s) to {}",
        models.len(),
        a.out.display()
    );
    Ok(())
}
