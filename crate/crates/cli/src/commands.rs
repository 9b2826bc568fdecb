//! Subcommand implementations. Run-directory conventions:
//!
//! ```text
//! <out>/
//!   dataset/                gen-stimuli
//!   reference.csv           gen-reference
//!   backbone.ckpt, backbone_log.csv
//!   rtify.ckpt, rtify_fit_log.csv
//!   rtify_selfpenalty.ckpt, selfpenalty_log.csv
//!   wongwang.ckpt, ww_fit_log.csv, ww_trajectory.csv
//!   histograms.csv, outcomes.csv, metrics.json
//!   export/
//! ```
//!
//! Explicit path flags override any of these.

use crate::config::{ConfigError, ExperimentConfig, CONFIG_TEMPLATE};
use crate::{AppError, TOOL_VERSION};
use rtify_core::backbone::{accuracy_per_condition, CheckpointSink, RnnParams};
use rtify_core::checkpoint::Checkpoint;
use rtify_core::fitting::{
    fit_rt as core_fit_rt, prepare_fixture, rtify_outcomes, summarize_outcomes,
    train_self_penalty, EvalMetrics, FitMode, TrialFixture, TrialOutcome,
};
use rtify_core::objectives::{
    read_reference_csv, soft_histogram, write_reference_csv, HistogramSpec,
};
use rtify_core::reference::{ddm_reference_by_condition, fit_entropy_threshold};
use rtify_core::rtify::RtifyParams;
use rtify_core::seed::{derive_seed, TAG_EVAL_SPLIT, TAG_TRAIN_SPLIT, TAG_WARMUP_SPLIT};
use rtify_core::stimuli::{config_grid, load_split, make_dataset, save_splits, Dataset};
use rtify_core::wongwang::{
    ww_fit as core_ww_fit, ww_run, write_trajectory_csv, Drive, WwParams, WwTrial,
};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

impl Context {
    fn config(&self) -> Result<ExperimentConfig, AppError> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| AppError::Config("--config is required".into()))?;
        ExperimentConfig::load(path, self.seed).map_err(|e| match e {
            ConfigError::Io(m) => AppError::Io(m),
            other => AppError::Config(other.to_string()),
        })
    }

    fn out_dir(&self) -> Result<PathBuf, AppError> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| AppError::Config("--out is required".into()))?;
        fs::create_dir_all(&dir).map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AppError + '_ {
    move |e| AppError::Io(format!("{}: {e}", path.display()))
}

fn provenance(cfg_hash: &str) -> String {
    format!("config_hash={cfg_hash} tool_version={TOOL_VERSION}")
}

/// Prepends a provenance comment line to a CSV the core just wrote.
fn annotate_csv(path: &Path, cfg_hash: &str) -> Result<(), AppError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    let annotated = format!("# {}\n{body}", provenance(cfg_hash));
    fs::write(path, annotated).map_err(io_err(path))
}

pub fn print_config() -> Result<(), AppError> {
    print!("{CONFIG_TEMPLATE}");
    Ok(())
}

// ── gen-stimuli ──────────────────────────────────────────────────────

pub fn gen_stimuli(ctx: &Context) -> Result<(), AppError> {
    let cfg = ctx.config()?;
    let out = ctx.out_dir()?;
    let hash = cfg.hash();
    let seed = cfg.run.master_seed;
    let base = cfg.base_rdm();
    let dirs = cfg.directions();

    let grid = config_grid(&base, &cfg.stimuli.coherences, &dirs);
    let as_io = |e: rtify_core::stimuli::StimulusError| AppError::Io(e.to_string());
    let train = make_dataset(&grid, cfg.stimuli.trials_per_config_train, seed, TAG_TRAIN_SPLIT)
        .map_err(as_io)?;
    let eval = make_dataset(&grid, cfg.stimuli.trials_per_config_eval, seed, TAG_EVAL_SPLIT)
        .map_err(as_io)?;
    let warm_grid = config_grid(&base, &[cfg.stimuli.warmup_coherence], &dirs);
    let warmup = make_dataset(
        &warm_grid,
        cfg.stimuli.trials_per_config_warmup,
        seed,
        TAG_WARMUP_SPLIT,
    )
    .map_err(as_io)?;

    let ds_dir = out.join("dataset");
    save_splits(
        &ds_dir,
        &[("train", &train), ("eval", &eval), ("warmup", &warmup)],
        &hash,
        TOOL_VERSION,
    )
    .map_err(as_io)?;
    ctx.say(&format!(
        "wrote {} train / {} eval / {} warmup records to {}",
        train.len(),
        eval.len(),
        warmup.len(),
        ds_dir.display()
    ));
    Ok(())
}

// ── gen-reference ────────────────────────────────────────────────────

pub fn gen_reference(ctx: &Context) -> Result<(), AppError> {
    let cfg = ctx.config()?;
    let out = ctx.out_dir()?;
    let ddm = cfg.ddm_params();
    let samples = ddm_reference_by_condition(
        &ddm,
        &cfg.stimuli.coherences,
        cfg.reference.trials_per_condition,
        cfg.run.master_seed,
    )
    .map_err(|e| AppError::Config(e.to_string()))?;
    let per_condition: Vec<Vec<f32>> = samples.iter().map(|s| s.signed_rts.clone()).collect();
    let path = out.join("reference.csv");
    write_reference_csv(&path, &per_condition, Some(&provenance(&cfg.hash())))
        .map_err(|e| AppError::Io(e.to_string()))?;
    for (i, s) in samples.iter().enumerate() {
        let correct = s.signed_rts.iter().filter(|r| **r > 0.0).count();
        ctx.say(&format!(
            "condition {i}: {} trials, accuracy {:.3}, censored {}",
            s.signed_rts.len(),
            correct as f64 / s.signed_rts.len() as f64,
            s.n_censored
        ));
    }
    ctx.say(&format!("wrote {}", path.display()));
    Ok(())
}

// ── train-backbone ───────────────────────────────────────────────────

fn load_dataset(dir: &Path, split: &str) -> Result<Dataset, AppError> {
    load_split(dir, split).map_err(|e| AppError::Io(e.to_string()))
}

pub fn train_backbone(ctx: &Context, dataset: Option<PathBuf>) -> Result<(), AppError> {
    let cfg = ctx.config()?;
    let out = ctx.out_dir()?;
    let hash = cfg.hash();
    let ds_dir = dataset.unwrap_or_else(|| out.join("dataset"));
    let train = load_dataset(&ds_dir, "train")?;
    let eval = load_dataset(&ds_dir, "eval")?;
    let warmup = load_dataset(&ds_dir, "warmup").ok();

    let mut params = RnnParams::init(
        train.meta.n_channels,
        cfg.backbone.hidden,
        train.n_classes(),
        cfg.run.master_seed,
    );
    let schedule = cfg.train_schedule();
    let sink = CheckpointSink {
        dir: &out,
        seed: cfg.run.master_seed,
        config_hash: &hash,
    };
    let log = rtify_core::backbone::train_bptt(
        &train,
        warmup.as_ref(),
        Some(&eval),
        &mut params,
        &schedule,
        Some(&sink),
    )
    .map_err(|e| match e {
        rtify_core::backbone::BackboneError::Diverged { .. } => AppError::Numeric(e.to_string()),
        other => AppError::Io(other.to_string()),
    })?;

    let ckpt_path = out.join("backbone.ckpt");
    let mut ck = params.to_checkpoint(cfg.run.master_seed, &hash);
    ck.set_meta("epochs", schedule.epochs);
    ck.save(&ckpt_path).map_err(|e| AppError::Io(e.to_string()))?;
    let log_path = out.join("backbone_log.csv");
    log.write_csv(&log_path).map_err(io_err(&log_path))?;
    annotate_csv(&log_path, &hash)?;

    if let Some(last) = log.epochs.last() {
        ctx.say(&format!(
            "final loss {:.4}; per-coherence accuracy {:?}",
            last.loss,
            last.eval_accuracy
                .iter()
                .map(|a| (a * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        ));
    }
    ctx.say(&format!("wrote {}", ckpt_path.display()));
    Ok(())
}

// ── shared loading helpers ───────────────────────────────────────────

fn load_backbone(path: &Path) -> Result<RnnParams, AppError> {
    let ck = Checkpoint::load(path).map_err(|e| AppError::Io(e.to_string()))?;
    if ck.module != "backbone" {
        return Err(AppError::Config(format!(
            "{} is a `{}` checkpoint, expected `backbone`",
            path.display(),
            ck.module
        )));
    }
    RnnParams::from_checkpoint(&ck).map_err(|e| AppError::Io(e.to_string()))
}

fn load_reference(path: &Path, n_conditions: usize) -> Result<Vec<Vec<f32>>, AppError> {
    let mut refs = read_reference_csv(path).map_err(|e| AppError::Io(e.to_string()))?;
    if refs.len() > n_conditions {
        return Err(AppError::Config(format!(
            "reference file has {} conditions, dataset has {n_conditions}",
            refs.len()
        )));
    }
    refs.resize(n_conditions, Vec::new());
    Ok(refs)
}

struct FitInputs {
    cfg: ExperimentConfig,
    out: PathBuf,
    hash: String,
    rnn: RnnParams,
    fixture: TrialFixture,
}

fn fit_inputs(
    ctx: &Context,
    backbone: Option<PathBuf>,
    dataset: Option<PathBuf>,
    split: &str,
) -> Result<FitInputs, AppError> {
    let cfg = ctx.config()?;
    let out = ctx.out_dir()?;
    let hash = cfg.hash();
    let ds_dir = dataset.unwrap_or_else(|| out.join("dataset"));
    let data = load_dataset(&ds_dir, split)?;
    let rnn = load_backbone(&backbone.unwrap_or_else(|| out.join("backbone.ckpt")))?;
    let fixture = prepare_fixture(&rnn, &data).map_err(|e| AppError::Io(e.to_string()))?;
    Ok(FitInputs {
        cfg,
        out,
        hash,
        rnn,
        fixture,
    })
}

/// Histogram CSV rows `(condition_id, bin_center_ms, density_model,
/// density_reference)` for every condition with data on both sides.
fn write_histograms_csv(
    path: &Path,
    hash: &str,
    outcomes: &[TrialOutcome],
    reference: &[Vec<f32>],
    spec: &HistogramSpec,
) -> Result<(), AppError> {
    let centers = spec.centers();
    let mut body = String::from("condition_id,bin_center_ms,density_model,density_reference\n");
    for cond in 0..reference.len() {
        let model_rts: Vec<f32> = outcomes
            .iter()
            .filter(|o| o.condition == cond)
            .map(|o| o.signed_rt_ms)
            .collect();
        if model_rts.is_empty() || reference[cond].is_empty() {
            continue;
        }
        let hm = soft_histogram(&model_rts, spec).map_err(|e| AppError::Io(e.to_string()))?;
        let hr = soft_histogram(&reference[cond], spec).map_err(|e| AppError::Io(e.to_string()))?;
        for (i, c) in centers.iter().enumerate() {
            body.push_str(&format!(
                "{cond},{c},{},{}\n",
                hm.densities[i], hr.densities[i]
            ));
        }
    }
    let annotated = format!("# {}\n{body}", provenance(hash));
    fs::write(path, annotated).map_err(io_err(path))
}

fn write_outcomes_csv(path: &Path, hash: &str, outcomes: &[TrialOutcome]) -> Result<(), AppError> {
    let mut body =
        String::from("trial_id,condition_id,coherence,tau,crossed,correct,signed_rt_ms\n");
    for o in outcomes {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.trial, o.condition, o.coherence, o.tau, o.crossed as u8, o.correct as u8, o.signed_rt_ms
        ));
    }
    let annotated = format!("# {}\n{body}", provenance(hash));
    fs::write(path, annotated).map_err(io_err(path))
}

fn opt_f64(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

fn metrics_json(
    module: &str,
    hash: &str,
    metrics: &EvalMetrics,
    baseline: Option<serde_json::Value>,
) -> serde_json::Value {
    json!({
        "tool": "rtify",
        "tool_version": TOOL_VERSION,
        "config_hash": hash,
        "module": module,
        "pooled": {
            "accuracy": opt_f64(metrics.pooled_accuracy),
            "mean_histogram_mse": metrics.mean_histogram_mse,
        },
        "per_condition": metrics.per_condition.iter().map(|c| json!({
            "condition_id": c.condition,
            "coherence": c.coherence,
            "n": c.n,
            "accuracy": opt_f64(c.accuracy),
            "mean_tau": opt_f64(c.mean_tau),
            "mean_correct_rt_ms": opt_f64(c.mean_correct_rt_ms),
            "mean_incorrect_rt_ms": opt_f64(c.mean_incorrect_rt_ms),
            "censored_fraction": opt_f64(c.censored_fraction),
            "histogram_mse": c.histogram_mse,
        })).collect::<Vec<_>>(),
        "baseline_entropy": baseline,
    })
}

// ── fit-rt ───────────────────────────────────────────────────────────

pub fn fit_rt(
    ctx: &Context,
    mode: &str,
    backbone: Option<PathBuf>,
    reference: Option<PathBuf>,
    dataset: Option<PathBuf>,
) -> Result<(), AppError> {
    let mode = match mode {
        "full" => FitMode::Full,
        "correct-only" => FitMode::CorrectOnly,
        other => {
            return Err(AppError::Config(format!(
                "--mode must be \"full\" or \"correct-only\", got {other:?}"
            )))
        }
    };
    let inputs = fit_inputs(ctx, backbone, dataset, "train")?;
    let FitInputs {
        cfg,
        out,
        hash,
        rnn,
        fixture,
    } = inputs;
    let ref_path = reference.unwrap_or_else(|| out.join("reference.csv"));
    let refs = load_reference(&ref_path, fixture.n_conditions)?;
    let spec = cfg.histogram_spec();
    let timing = cfg.timing();
    let fit_cfg = cfg.fit_rt_config(mode);

    let backbone_sum_before = rnn.checksum();
    let mut params = RtifyParams::init(rnn.hidden_dim(), cfg.rtify.hidden, cfg.run.master_seed);
    let log = core_fit_rt(&fixture, &refs, &mut params, &spec, &timing, &fit_cfg).map_err(|e| {
        match e {
            rtify_core::fitting::FitError::Diverged { .. } => AppError::Numeric(e.to_string()),
            other => AppError::Config(other.to_string()),
        }
    })?;
    assert_eq!(backbone_sum_before, rnn.checksum(), "backbone must stay frozen");

    let mut ck = params.to_checkpoint(cfg.run.master_seed, &hash);
    ck.set_meta("mode", if mode == FitMode::Full { "full" } else { "correct-only" });
    ck.set_meta("policy", &cfg.rtify.policy);
    ck.set_meta("backbone_checksum", &backbone_sum_before);
    let ckpt_path = out.join("rtify.ckpt");
    ck.save(&ckpt_path).map_err(|e| AppError::Io(e.to_string()))?;

    let log_path = out.join("rtify_fit_log.csv");
    log.write_csv(&log_path).map_err(io_err(&log_path))?;
    annotate_csv(&log_path, &hash)?;

    let outcomes = rtify_outcomes(&fixture, &params, &spec, &timing, fit_cfg.policy)
        .map_err(|e| AppError::Io(e.to_string()))?;
    write_histograms_csv(&out.join("histograms.csv"), &hash, &outcomes, &refs, &spec)?;

    ctx.say(&format!(
        "fit loss {:.6} -> {:.6} over {} epochs",
        log.initial_loss(),
        log.final_loss(),
        log.rows.len()
    ));
    ctx.say(&format!("wrote {}", ckpt_path.display()));
    Ok(())
}

// ── train-selfpenalty ────────────────────────────────────────────────

pub fn train_selfpenalty(
    ctx: &Context,
    lambda: Option<f32>,
    backbone: Option<PathBuf>,
    dataset: Option<PathBuf>,
) -> Result<(), AppError> {
    let inputs = fit_inputs(ctx, backbone, dataset, "train")?;
    let FitInputs {
        cfg,
        out,
        hash,
        rnn: _,
        fixture,
    } = inputs;
    let timing = cfg.timing();
    let sp_cfg = cfg.self_penalty_config(lambda);
    let spec = cfg.histogram_spec();

    let mut params = RtifyParams::init(
        fixture.traces[0].hidden_dim,
        cfg.rtify.hidden,
        cfg.run.master_seed,
    );
    let log = train_self_penalty(&fixture, &mut params, &timing, &sp_cfg).map_err(|e| match e {
        rtify_core::fitting::FitError::Diverged { .. } => AppError::Numeric(e.to_string()),
        other => AppError::Config(other.to_string()),
    })?;

    let mut ck = params.to_checkpoint(cfg.run.master_seed, &hash);
    ck.set_meta("lambda", sp_cfg.lambda);
    ck.set_meta("policy", &cfg.rtify.policy);
    let ckpt_path = out.join("rtify_selfpenalty.ckpt");
    ck.save(&ckpt_path).map_err(|e| AppError::Io(e.to_string()))?;
    let log_path = out.join("selfpenalty_log.csv");
    log.write_csv(&log_path).map_err(io_err(&log_path))?;
    annotate_csv(&log_path, &hash)?;

    // accuracy and mean stopping step per condition, reported alongside
    let outcomes = rtify_outcomes(&fixture, &params, &spec, &timing, sp_cfg.policy)
        .map_err(|e| AppError::Io(e.to_string()))?;
    let metrics = summarize_outcomes(&outcomes, fixture.n_conditions, &spec, None)
        .map_err(|e| AppError::Io(e.to_string()))?;
    for c in &metrics.per_condition {
        ctx.say(&format!(
            "condition {} (coherence {:.3}): mean tau {:.1}, accuracy {:.3}",
            c.condition, c.coherence, c.mean_tau, c.accuracy
        ));
    }
    ctx.say(&format!(
        "loss {:.6} -> {:.6}; wrote {}",
        log.initial_loss(),
        log.final_loss(),
        ckpt_path.display()
    ));
    Ok(())
}

// ── fit-ww ───────────────────────────────────────────────────────────

/// Static drive for the circuit: the frozen classifier's mean logits.
fn ww_trials(fixture: &TrialFixture) -> Vec<WwTrial> {
    (0..fixture.len())
        .map(|i| {
            let trace = &fixture.traces[i];
            let c = trace.n_classes;
            let mut mean = vec![0.0f32; c];
            for t in 0..trace.n_steps {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += trace.logits_at(t)[j];
                }
            }
            for m in mean.iter_mut() {
                *m /= trace.n_steps as f32;
            }
            WwTrial {
                drive: mean,
                label: fixture.labels[i],
                condition: fixture.conditions[i],
            }
        })
        .collect()
}

pub fn fit_ww(
    ctx: &Context,
    backbone: Option<PathBuf>,
    reference: Option<PathBuf>,
    dataset: Option<PathBuf>,
    dump_trajectories: bool,
) -> Result<(), AppError> {
    let inputs = fit_inputs(ctx, backbone, dataset, "train")?;
    let FitInputs {
        cfg,
        out,
        hash,
        rnn: _,
        fixture,
    } = inputs;
    let ref_path = reference.unwrap_or_else(|| out.join("reference.csv"));
    let refs = load_reference(&ref_path, fixture.n_conditions)?;
    let spec = cfg.histogram_spec();
    let trials = ww_trials(&fixture);
    let mut params = cfg.ww_params(fixture.traces[0].n_classes);
    let fit_cfg = cfg.ww_fit_config();

    let log = core_ww_fit(&trials, &refs, &mut params, &spec, &fit_cfg).map_err(|e| match e {
        rtify_core::wongwang::WwError::Diverged { .. } => AppError::Numeric(e.to_string()),
        other => AppError::Config(other.to_string()),
    })?;

    let mut ck = params.to_checkpoint(cfg.run.master_seed, &hash);
    ck.set_meta("t0_ms", fit_cfg.t0_ms);
    ck.set_meta("s_init", fit_cfg.s_init);
    ck.set_meta("max_steps", fit_cfg.max_steps);
    let ckpt_path = out.join("wongwang.ckpt");
    ck.save(&ckpt_path).map_err(|e| AppError::Io(e.to_string()))?;
    let log_path = out.join("ww_fit_log.csv");
    log.write_csv(&log_path).map_err(io_err(&log_path))?;
    annotate_csv(&log_path, &hash)?;

    if dump_trajectories {
        let run = ww_run(
            &params,
            &Drive::Static(trials[0].drive.clone()),
            fit_cfg.max_steps,
            cfg.run.master_seed,
            fit_cfg.t0_ms,
            fit_cfg.s_init,
        )
        .map_err(|e| AppError::Config(e.to_string()))?;
        let traj_path = out.join("ww_trajectory.csv");
        write_trajectory_csv(&traj_path, &run.trajectory)
            .map_err(|e| AppError::Io(e.to_string()))?;
        annotate_csv(&traj_path, &hash)?;
        ctx.say(&format!("wrote {}", traj_path.display()));
    }

    ctx.say(&format!(
        "ww fit loss {:.6} -> {:.6}; wrote {}",
        log.initial_loss(),
        log.final_loss(),
        ckpt_path.display()
    ));
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn ww_eval_outcomes(
    trials: &[WwTrial],
    coherences: &[f32],
    params: &WwParams,
    spec: &HistogramSpec,
    cfg: &rtify_core::wongwang::WwFitConfig,
) -> Result<Vec<TrialOutcome>, AppError> {
    let mut out = Vec::with_capacity(trials.len());
    for (i, trial) in trials.iter().enumerate() {
        let run = ww_run(
            params,
            &Drive::Static(trial.drive.clone()),
            cfg.max_steps,
            derive_seed(cfg.seed, rtify_core::seed::TAG_WW_RUN, 0xE0A1 + i as u64),
            cfg.t0_ms,
            cfg.s_init,
        )
        .map_err(|e| AppError::Config(e.to_string()))?;
        let correct = run.decision.choice == Some(trial.label);
        let signed = if run.decision.crossed {
            let v = if correct {
                run.decision.rt_ms
            } else {
                -run.decision.rt_ms
            };
            v.clamp(spec.min_ms, spec.max_ms)
        } else {
            spec.censored_rt(correct)
        };
        out.push(TrialOutcome {
            trial: i,
            condition: trial.condition,
            coherence: coherences[i],
            tau: run.decision.tau,
            crossed: run.decision.crossed,
            correct,
            signed_rt_ms: signed,
        });
    }
    Ok(out)
}

pub fn eval(
    ctx: &Context,
    ckpt: Option<PathBuf>,
    backbone: Option<PathBuf>,
    reference: Option<PathBuf>,
    dataset: Option<PathBuf>,
    compare_entropy: bool,
) -> Result<(), AppError> {
    let inputs = fit_inputs(ctx, backbone, dataset, "eval")?;
    let FitInputs {
        cfg,
        out,
        hash,
        rnn,
        fixture,
    } = inputs;
    let ref_path = reference.unwrap_or_else(|| out.join("reference.csv"));
    let refs = load_reference(&ref_path, fixture.n_conditions)?;
    let spec = cfg.histogram_spec();
    let timing = cfg.timing();

    let ckpt_path = ckpt.unwrap_or_else(|| out.join("rtify.ckpt"));
    let ck = Checkpoint::load(&ckpt_path).map_err(|e| AppError::Io(e.to_string()))?;

    let outcomes = match ck.module.as_str() {
        "rtify" => {
            let params =
                RtifyParams::from_checkpoint(&ck).map_err(|e| AppError::Io(e.to_string()))?;
            let policy = ck
                .meta_value("policy")
                .and_then(rtify_core::rtify::ReadoutPolicy::parse)
                .unwrap_or(cfg.policy().expect("validated"));
            rtify_outcomes(&fixture, &params, &spec, &timing, policy)
                .map_err(|e| AppError::Io(e.to_string()))?
        }
        "wongwang" => {
            let params = WwParams::from_checkpoint(&ck)
                .map_err(|e| AppError::Io(e.to_string()))?;
            let trials = ww_trials(&fixture);
            let fit_cfg = cfg.ww_fit_config();
            ww_eval_outcomes(&trials, &fixture.coherences, &params, &spec, &fit_cfg)?
        }
        other => {
            return Err(AppError::Config(format!(
                "cannot evaluate a `{other}` checkpoint"
            )))
        }
    };

    let metrics = summarize_outcomes(&outcomes, fixture.n_conditions, &spec, Some(&refs))
        .map_err(|e| AppError::Io(e.to_string()))?;

    let baseline = if compare_entropy {
        let traces = fixture.trace_refs();
        let fit = fit_entropy_threshold(
            &traces,
            &fixture.labels,
            &fixture.conditions,
            &refs,
            &spec,
            &timing,
            cfg.reference.entropy_grid,
        )
        .map_err(|e| AppError::Config(e.to_string()))?;
        // per-condition baseline MSE at the fitted threshold
        let mut baseline_outcomes = Vec::with_capacity(fixture.len());
        for i in 0..fixture.len() {
            let d = rtify_core::reference::entropy_threshold_rt(
                &fixture.traces[i],
                fit.threshold,
                &timing,
            );
            let correct = d.choice == Some(fixture.labels[i]);
            let signed = if d.crossed {
                let v = if correct { d.rt_ms } else { -d.rt_ms };
                v.clamp(spec.min_ms, spec.max_ms)
            } else {
                spec.censored_rt(correct)
            };
            baseline_outcomes.push(TrialOutcome {
                trial: i,
                condition: fixture.conditions[i],
                coherence: fixture.coherences[i],
                tau: d.tau,
                crossed: d.crossed,
                correct,
                signed_rt_ms: signed,
            });
        }
        let base_metrics =
            summarize_outcomes(&baseline_outcomes, fixture.n_conditions, &spec, Some(&refs))
                .map_err(|e| AppError::Io(e.to_string()))?;
        let wins = metrics
            .per_condition
            .iter()
            .zip(&base_metrics.per_condition)
            .filter(|(m, b)| match (m.histogram_mse, b.histogram_mse) {
                (Some(m), Some(b)) => m < b,
                _ => false,
            })
            .count();
        Some(json!({
            "threshold": fit.threshold,
            "mean_histogram_mse": base_metrics.mean_histogram_mse,
            "per_condition_mse": base_metrics
                .per_condition
                .iter()
                .map(|c| c.histogram_mse)
                .collect::<Vec<_>>(),
            "model_wins": wins,
        }))
    } else {
        None
    };

    let doc = metrics_json(&ck.module, &hash, &metrics, baseline);
    let metrics_path = out.join("metrics.json");
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&doc).expect("json"),
    )
    .map_err(io_err(&metrics_path))?;
    write_outcomes_csv(&out.join("outcomes.csv"), &hash, &outcomes)?;
    write_histograms_csv(&out.join("histograms.csv"), &hash, &outcomes, &refs, &spec)?;

    // hold the freezing contract visible: the eval never mutates the backbone
    let _ = rnn.checksum();

    ctx.say(&format!(
        "pooled accuracy {:.3}, mean histogram MSE {:?}",
        metrics.pooled_accuracy, metrics.mean_histogram_mse
    ));
    ctx.say(&format!("wrote {}", metrics_path.display()));
    Ok(())
}

// ── export ───────────────────────────────────────────────────────────

pub fn export(ctx: &Context, run: Option<PathBuf>) -> Result<(), AppError> {
    let run_dir = run
        .or_else(|| ctx.out.clone())
        .ok_or_else(|| AppError::Config("--run (or --out) is required".into()))?;
    let export_dir = ctx
        .out
        .clone()
        .filter(|o| *o != run_dir)
        .unwrap_or_else(|| run_dir.join("export"));
    fs::create_dir_all(&export_dir)
        .map_err(|e| AppError::Io(format!("{}: {e}", export_dir.display())))?;

    let metrics_path = run_dir.join("metrics.json");
    let metrics_text = fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
    let metrics: serde_json::Value =
        serde_json::from_str(&metrics_text).map_err(|e| AppError::Io(e.to_string()))?;
    let hash = metrics["config_hash"].as_str().unwrap_or("unknown").to_string();

    // split the combined histogram CSV into one file per condition
    let hist_path = run_dir.join("histograms.csv");
    let hist_text = fs::read_to_string(&hist_path).map_err(io_err(&hist_path))?;
    let mut per_cond: Vec<(String, String)> = Vec::new();
    let mut header = String::new();
    for line in hist_text.lines() {
        if line.starts_with('#') {
            continue;
        }
        if header.is_empty() {
            header = line.to_string();
            continue;
        }
        let cond = line.split(',').next().unwrap_or("0").to_string();
        match per_cond.iter_mut().find(|(c, _)| *c == cond) {
            Some((_, body)) => {
                body.push_str(line);
                body.push('\n');
            }
            None => per_cond.push((cond, format!("{line}\n"))),
        }
    }
    let mut written = Vec::new();
    for (cond, body) in &per_cond {
        let path = export_dir.join(format!("histogram_c{cond}.csv"));
        let content = format!("# {}\n{header}\n{body}", provenance(&hash));
        fs::write(&path, content).map_err(io_err(&path))?;
        written.push(path.file_name().unwrap().to_string_lossy().to_string());
    }

    // scatter: per-trial model RTs rank-matched to reference RTs within
    // each condition
    let outcomes_path = run_dir.join("outcomes.csv");
    let reference_path = run_dir.join("reference.csv");
    if outcomes_path.exists() && reference_path.exists() {
        let refs = read_reference_csv(&reference_path).map_err(|e| AppError::Io(e.to_string()))?;
        let outcomes_text = fs::read_to_string(&outcomes_path).map_err(io_err(&outcomes_path))?;
        // (trial, condition, rt)
        let mut trials: Vec<(usize, usize, f32)> = Vec::new();
        for line in outcomes_text.lines().skip(2) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 7 {
                trials.push((
                    cols[0].parse().unwrap_or(0),
                    cols[1].parse().unwrap_or(0),
                    cols[6].parse().unwrap_or(0.0),
                ));
            }
        }
        let mut body = String::from("stimulus_id,reference_rt_ms,model_rt_ms\n");
        for cond in 0..refs.len() {
            let mut model: Vec<(usize, f32)> = trials
                .iter()
                .filter(|(_, c, _)| *c == cond)
                .map(|(t, _, r)| (*t, *r))
                .collect();
            if model.is_empty() || refs[cond].is_empty() {
                continue;
            }
            model.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            let mut reference = refs[cond].clone();
            reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // rank-match by quantile, keeping every model trial
            let n = model.len();
            for (rank, (trial, rt)) in model.iter().enumerate() {
                let q = (rank as f64 + 0.5) / n as f64;
                let ridx = ((q * reference.len() as f64) as usize).min(reference.len() - 1);
                body.push_str(&format!("{trial},{},{rt}\n", reference[ridx]));
            }
        }
        let scatter_path = export_dir.join("scatter.csv");
        fs::write(&scatter_path, format!("# {}\n{body}", provenance(&hash)))
            .map_err(io_err(&scatter_path))?;
        written.push("scatter.csv".into());
    }

    let summary = json!({
        "tool": "rtify",
        "tool_version": TOOL_VERSION,
        "config_hash": hash,
        "metrics": metrics,
        "files": written,
    });
    let summary_path = export_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("json"),
    )
    .map_err(io_err(&summary_path))?;
    ctx.say(&format!("wrote {}", export_dir.display()));
    Ok(())
}
