//! Training loops for the stopping module over a frozen backbone:
//! supervised RT-distribution fitting (full or correct-only) and the
//! self-penalty objective, plus shared evaluation metrics.

use crate::backbone::{forward, BackboneError, HiddenTrace, RnnParams};
use crate::diffcore::{Adam, AdamConfig, Array, DiffError, Tape, Var};
use crate::objectives::{
    soft_histogram, taped_histogram_mse, taped_soft_histogram, HistSample, HistogramSpec,
    ObjectiveError, SignedRtHistogram,
};
use crate::rtify::{
    accumulate, evidence_on_tape, evidence_series, init_theta, insert_leaves, readout,
    readout_logits, stopping_time, surrogate_node, Decision, ReadoutPolicy, RtTiming, RtifyError,
    RtifyParams,
};
use crate::stimuli::Dataset;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Rtify(#[from] RtifyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("fit diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("no condition had both model trials and reference data")]
    NoUsableCondition,
}

/// Loss per epoch for any of the fitting loops.
#[derive(Debug, Clone, Default)]
pub struct FitLog {
    pub rows: Vec<(usize, f64)>,
}

impl FitLog {
    pub fn push(&mut self, epoch: usize, loss: f64) {
        self.rows.push((epoch, loss));
    }

    pub fn initial_loss(&self) -> f64 {
        self.rows.first().map(|(_, l)| *l).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in &self.rows {
            w.write_record(&[e.to_string(), format!("{l:.8}")])?;
        }
        w.flush()
    }
}

/// Frozen-backbone forward passes for a dataset, the shared input of every
/// stopping-rule fit and of the entropy baseline.
#[derive(Debug, Clone)]
pub struct TrialFixture {
    pub traces: Vec<HiddenTrace>,
    pub labels: Vec<usize>,
    pub conditions: Vec<usize>,
    pub coherences: Vec<f32>,
    pub n_conditions: usize,
    pub frame_rate_hz: f32,
}

impl TrialFixture {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn trace_refs(&self) -> Vec<&HiddenTrace> {
        self.traces.iter().collect()
    }

    /// Coherence value of each condition index.
    pub fn condition_coherences(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n_conditions];
        for (c, coh) in self.conditions.iter().zip(&self.coherences) {
            out[*c] = *coh;
        }
        out
    }
}

/// Runs the frozen backbone over every record.
pub fn prepare_fixture(
    params: &RnnParams,
    dataset: &Dataset,
) -> Result<TrialFixture, BackboneError> {
    let traces: Result<Vec<HiddenTrace>, BackboneError> = dataset
        .records
        .par_iter()
        .map(|r| forward(params, &r.stream))
        .collect();
    Ok(TrialFixture {
        traces: traces?,
        labels: dataset.records.iter().map(|r| r.label).collect(),
        conditions: dataset.records.iter().map(|r| r.condition).collect(),
        coherences: dataset.records.iter().map(|r| r.coherence).collect(),
        n_conditions: dataset.n_conditions(),
        frame_rate_hz: dataset.meta.frame_rate_hz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Histogram MSE over the full signed distribution.
    Full,
    /// Positive (correct) part only, renormalized: no accuracy signal.
    CorrectOnly,
}

#[derive(Debug, Clone)]
pub struct FitRtConfig {
    pub epochs: usize,
    pub lr: f32,
    pub mode: FitMode,
    pub policy: ReadoutPolicy,
    pub eps_den: f32,
    /// Adds (θ − Φ_N)₊ on censored trials.
    pub censored_penalty: bool,
    pub censored_penalty_weight: f32,
    pub grad_clip: Option<f32>,
    /// Warm-start θ at 0.75 × median Φ_N before the first epoch.
    pub init_theta: bool,
}

impl Default for FitRtConfig {
    fn default() -> Self {
        FitRtConfig {
            epochs: 400,
            lr: 0.01,
            mode: FitMode::Full,
            policy: ReadoutPolicy::SumToTau,
            eps_den: crate::rtify::EPS_DEN_DEFAULT,
            censored_penalty: true,
            censored_penalty_weight: 1e-3,
            grad_clip: None,
            init_theta: true,
        }
    }
}

/// Concatenates all hidden states into one constant tape input.
fn stacked_hidden(fixture: &TrialFixture) -> (Vec<f32>, Vec<(usize, usize)>, usize) {
    let k = fixture.traces[0].hidden_dim;
    let total: usize = fixture.traces.iter().map(|t| t.n_steps).sum();
    let mut data = Vec::with_capacity(total * k);
    let mut spans = Vec::with_capacity(fixture.len());
    let mut offset = 0;
    for t in &fixture.traces {
        data.extend_from_slice(&t.hidden);
        spans.push((offset, t.n_steps));
        offset += t.n_steps;
    }
    (data, spans, total)
}

struct EpochOutcome {
    loss: f64,
    grads: Option<[Array; 5]>,
}

#[allow(clippy::too_many_arguments)]
fn supervised_epoch(
    fixture: &TrialFixture,
    stacked: &(Vec<f32>, Vec<(usize, usize)>, usize),
    ref_full: &[Option<SignedRtHistogram>],
    ref_correct: &[Option<SignedRtHistogram>],
    params: &RtifyParams,
    spec: &HistogramSpec,
    timing: &RtTiming,
    cfg: &FitRtConfig,
    want_grads: bool,
) -> Result<EpochOutcome, FitError> {
    let (hidden_data, spans, total_rows) = stacked;
    let k = fixture.traces[0].hidden_dim;

    let mut tape = Tape::new();
    let leaves = insert_leaves(&mut tape, params, true);
    let h_all = tape.constant(Array::raw(vec![*total_rows, k], hidden_data.clone()));
    let e_all = evidence_on_tape(&mut tape, &leaves, h_all, *total_rows)?;
    let theta_val = params.theta_value();

    // per condition: (sample, correct)
    let mut per_cond: Vec<Vec<(HistSample, bool)>> = vec![Vec::new(); fixture.n_conditions];
    let mut penalties: Vec<Var> = Vec::new();

    let e_values = tape.value(e_all).data().to_vec();
    for (i, (offset, n)) in spans.iter().enumerate() {
        let trace = accumulate(&e_values[*offset..*offset + *n]);
        let mut decision = stopping_time(&trace, theta_val, timing);
        let (_, choice) = readout(&fixture.traces[i], &decision, cfg.policy);
        decision.choice = Some(choice);
        let correct = choice == fixture.labels[i];
        let sign = if correct { 1.0f32 } else { -1.0 };
        let cond = fixture.conditions[i];

        if decision.crossed {
            let head = tape.slice(e_all, *offset, decision.tau, vec![decision.tau])?;
            let phi_tau = tape.sum(head)?;
            let tau_node = surrogate_node(
                &mut tape,
                phi_tau,
                leaves.theta,
                decision.tau,
                trace.increment(decision.tau),
                cfg.eps_den,
            )?;
            let rt = tape.scale(tau_node, sign * timing.step_ms)?;
            let rt = tape.offset(rt, sign * timing.t0_ms)?;
            per_cond[cond].push((HistSample::Var(rt), correct));
        } else {
            per_cond[cond].push((HistSample::Const(spec.censored_rt(correct)), correct));
            if cfg.censored_penalty {
                let all = tape.slice(e_all, *offset, *n, vec![*n])?;
                let phi_n = tape.sum(all)?;
                let gap = tape.sub(leaves.theta, phi_n)?;
                penalties.push(tape.relu(gap)?);
            }
        }
    }

    let mut cond_losses: Vec<Var> = Vec::new();
    for (cond, samples) in per_cond.iter_mut().enumerate() {
        let (reference, keep_all) = match cfg.mode {
            FitMode::Full => (&ref_full[cond], true),
            FitMode::CorrectOnly => (&ref_correct[cond], false),
        };
        let reference = match reference {
            Some(h) => h,
            None => continue,
        };
        let selected: Vec<HistSample> = samples
            .drain(..)
            .filter(|(_, correct)| keep_all || *correct)
            .map(|(s, _)| s)
            .collect();
        if selected.is_empty() {
            continue;
        }
        let density = taped_soft_histogram(&mut tape, &selected, spec)?;
        cond_losses.push(taped_histogram_mse(&mut tape, density, reference)?);
    }
    if cond_losses.is_empty() {
        return Err(FitError::NoUsableCondition);
    }
    let stacked_losses = tape.concat(&cond_losses)?;
    let mut loss = tape.mean(stacked_losses)?;
    if !penalties.is_empty() {
        let pen = tape.concat(&penalties)?;
        let pen_sum = tape.sum(pen)?;
        let pen_term = tape.scale(
            pen_sum,
            cfg.censored_penalty_weight / fixture.len() as f32,
        )?;
        loss = tape.add(loss, pen_term)?;
    }

    let loss_val = tape.value(loss).item() as f64;
    if !want_grads {
        return Ok(EpochOutcome {
            loss: loss_val,
            grads: None,
        });
    }
    let grads = tape.backward(loss)?;
    Ok(EpochOutcome {
        loss: loss_val,
        grads: Some([
            grads.expect(leaves.w1).clone(),
            grads.expect(leaves.b1).clone(),
            grads.expect(leaves.w2).clone(),
            grads.expect(leaves.b2).clone(),
            grads.expect(leaves.theta).clone(),
        ]),
    })
}

fn apply_step(
    adam: &mut Adam,
    params: &mut RtifyParams,
    grads: &[Array; 5],
) -> Result<(), DiffError> {
    let grefs: Vec<&Array> = grads.iter().collect();
    adam.step(
        &mut [
            ("w1", &mut params.w1),
            ("b1", &mut params.b1),
            ("w2", &mut params.w2),
            ("b2", &mut params.b2),
            ("theta", &mut params.theta),
        ],
        &grefs,
    )
}

/// Supervised fit of the evidence head and threshold to reference signed-RT
/// distributions, per condition.
pub fn fit_rt(
    fixture: &TrialFixture,
    reference: &[Vec<f32>],
    params: &mut RtifyParams,
    spec: &HistogramSpec,
    timing: &RtTiming,
    cfg: &FitRtConfig,
) -> Result<FitLog, FitError> {
    assert_eq!(reference.len(), fixture.n_conditions, "reference conditions");
    if cfg.init_theta {
        let refs: Vec<&HiddenTrace> = fixture.traces.iter().take(256).collect();
        init_theta(params, &refs)?;
    }
    let stacked = stacked_hidden(fixture);

    let ref_full: Vec<Option<SignedRtHistogram>> = reference
        .iter()
        .map(|rts| {
            if rts.is_empty() {
                None
            } else {
                Some(soft_histogram(rts, spec).expect("non-empty"))
            }
        })
        .collect();
    let ref_correct: Vec<Option<SignedRtHistogram>> = reference
        .iter()
        .map(|rts| {
            let pos: Vec<f32> = rts.iter().copied().filter(|r| *r > 0.0).collect();
            if pos.is_empty() {
                None
            } else {
                Some(soft_histogram(&pos, spec).expect("non-empty"))
            }
        })
        .collect();
    if cfg.mode == FitMode::CorrectOnly && ref_correct.iter().all(|r| r.is_none()) {
        return Err(FitError::Objective(ObjectiveError::NoPositiveSamples));
    }

    let mut adam = Adam::new(AdamConfig {
        lr: if cfg.lr > 0.0 { cfg.lr } else { 1.0 },
        clip_norm: cfg.grad_clip,
        ..Default::default()
    });
    let mut log = FitLog::default();
    let mut best: Option<(f64, RtifyParams)> = None;

    for epoch in 0..cfg.epochs {
        let snapshot = params.clone();
        let outcome = supervised_epoch(
            fixture,
            &stacked,
            &ref_full,
            &ref_correct,
            params,
            spec,
            timing,
            cfg,
            cfg.lr > 0.0,
        );
        match outcome {
            Ok(out) => {
                log.push(epoch, out.loss);
                if best.as_ref().map(|(b, _)| out.loss < *b).unwrap_or(true) {
                    best = Some((out.loss, snapshot));
                }
                if let Some(grads) = out.grads {
                    if let Err(e) = apply_step(&mut adam, params, &grads) {
                        if let Some((_, bp)) = best {
                            *params = bp;
                        }
                        return Err(FitError::Diverged {
                            epoch,
                            detail: e.to_string(),
                        });
                    }
                }
            }
            Err(FitError::NoUsableCondition) => {
                return Err(FitError::NoUsableCondition);
            }
            Err(e) => {
                if let Some((_, bp)) = best {
                    *params = bp;
                }
                return Err(FitError::Diverged {
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct SelfPenaltyConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Strength of the `l_y · τ` time penalty.
    pub lambda: f32,
    pub policy: ReadoutPolicy,
    pub eps_den: f32,
    pub grad_clip: Option<f32>,
    pub init_theta: bool,
}

impl Default for SelfPenaltyConfig {
    fn default() -> Self {
        SelfPenaltyConfig {
            epochs: 300,
            lr: 0.01,
            lambda: 1e-3,
            policy: ReadoutPolicy::SumToTau,
            eps_den: crate::rtify::EPS_DEN_DEFAULT,
            grad_clip: None,
            init_theta: true,
        }
    }
}

/// Ideal-observer training: cross-entropy plus λ·l_y·τ, no reference RTs.
/// The classifier is frozen, so gradients reach the stopping parameters
/// only through the τ surrogate.
pub fn train_self_penalty(
    fixture: &TrialFixture,
    params: &mut RtifyParams,
    timing: &RtTiming,
    cfg: &SelfPenaltyConfig,
) -> Result<FitLog, FitError> {
    if cfg.init_theta {
        let refs: Vec<&HiddenTrace> = fixture.traces.iter().take(256).collect();
        init_theta(params, &refs)?;
    }
    let stacked = stacked_hidden(fixture);
    let k = fixture.traces[0].hidden_dim;

    let mut adam = Adam::new(AdamConfig {
        lr: if cfg.lr > 0.0 { cfg.lr } else { 1.0 },
        clip_norm: cfg.grad_clip,
        ..Default::default()
    });
    let mut log = FitLog::default();
    let mut best: Option<(f64, RtifyParams)> = None;

    for epoch in 0..cfg.epochs {
        let snapshot = params.clone();
        let run = || -> Result<(f64, Option<[Array; 5]>), FitError> {
            let (hidden_data, spans, total_rows) = &stacked;
            let mut tape = Tape::new();
            let leaves = insert_leaves(&mut tape, params, true);
            let h_all = tape.constant(Array::raw(vec![*total_rows, k], hidden_data.clone()));
            let e_all = evidence_on_tape(&mut tape, &leaves, h_all, *total_rows)?;
            let theta_val = params.theta_value();
            let e_values = tape.value(e_all).data().to_vec();

            let mut trial_losses: Vec<Var> = Vec::new();
            for (i, (offset, n)) in spans.iter().enumerate() {
                let trace = accumulate(&e_values[*offset..*offset + *n]);
                let decision = stopping_time(&trace, theta_val, timing);
                let label = fixture.labels[i];
                let logits = readout_logits(&fixture.traces[i], &decision, cfg.policy);
                let l_y = logits[label];
                let cce = cross_entropy_scalar(&logits, label);

                if decision.crossed {
                    let head = tape.slice(e_all, *offset, decision.tau, vec![decision.tau])?;
                    let phi_tau = tape.sum(head)?;
                    let tau_node = surrogate_node(
                        &mut tape,
                        phi_tau,
                        leaves.theta,
                        decision.tau,
                        trace.increment(decision.tau),
                        cfg.eps_den,
                    )?;
                    trial_losses.push(crate::objectives::taped_self_penalty(
                        &mut tape, cce, l_y, tau_node, cfg.lambda,
                    )?);
                } else {
                    // censored: value only, no gradient path
                    let v = cce + cfg.lambda * l_y * decision.tau as f32;
                    trial_losses.push(tape.constant(Array::scalar(v)));
                }
            }
            let stacked_losses = tape.concat(&trial_losses)?;
            let loss = tape.mean(stacked_losses)?;
            let loss_val = tape.value(loss).item() as f64;
            if cfg.lr <= 0.0 {
                return Ok((loss_val, None));
            }
            let grads = tape.backward(loss)?;
            Ok((
                loss_val,
                Some([
                    grads.expect(leaves.w1).clone(),
                    grads.expect(leaves.b1).clone(),
                    grads.expect(leaves.w2).clone(),
                    grads.expect(leaves.b2).clone(),
                    grads.expect(leaves.theta).clone(),
                ]),
            ))
        };
        match run() {
            Ok((loss, maybe_grads)) => {
                log.push(epoch, loss);
                if best.as_ref().map(|(b, _)| loss < *b).unwrap_or(true) {
                    best = Some((loss, snapshot));
                }
                if let Some(grads) = maybe_grads {
                    if let Err(e) = apply_step(&mut adam, params, &grads) {
                        if let Some((_, bp)) = best {
                            *params = bp;
                        }
                        return Err(FitError::Diverged {
                            epoch,
                            detail: e.to_string(),
                        });
                    }
                }
            }
            Err(e) => {
                if let Some((_, bp)) = best {
                    *params = bp;
                }
                return Err(FitError::Diverged {
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(log)
}

/// −log softmax(logits)[label], computed stably in f64.
pub fn cross_entropy_scalar(logits: &[f32], label: usize) -> f32 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse: f64 = logits.iter().map(|l| ((l - max) as f64).exp()).sum();
    (lse.ln() - (logits[label] - max) as f64) as f32
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Per-trial outcome of the fitted stopping rule.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub condition: usize,
    pub coherence: f32,
    pub tau: usize,
    pub crossed: bool,
    pub correct: bool,
    /// Signed RT with censored trials at the histogram limit.
    pub signed_rt_ms: f32,
}

/// Runs the stopping rule over the fixture without touching parameters.
pub fn rtify_outcomes(
    fixture: &TrialFixture,
    params: &RtifyParams,
    spec: &HistogramSpec,
    timing: &RtTiming,
    policy: ReadoutPolicy,
) -> Result<Vec<TrialOutcome>, FitError> {
    let theta = params.theta_value();
    let mut out = Vec::with_capacity(fixture.len());
    for i in 0..fixture.len() {
        let e = evidence_series(params, &fixture.traces[i])?;
        let trace = accumulate(&e);
        let decision: Decision = stopping_time(&trace, theta, timing);
        let (_, choice) = readout(&fixture.traces[i], &decision, policy);
        let correct = choice == fixture.labels[i];
        let signed = if decision.crossed {
            let v = if correct {
                decision.rt_ms
            } else {
                -decision.rt_ms
            };
            v.clamp(spec.min_ms, spec.max_ms)
        } else {
            spec.censored_rt(correct)
        };
        out.push(TrialOutcome {
            trial: i,
            condition: fixture.conditions[i],
            coherence: fixture.coherences[i],
            tau: decision.tau,
            crossed: decision.crossed,
            correct,
            signed_rt_ms: signed,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConditionMetrics {
    pub condition: usize,
    pub coherence: f32,
    pub n: usize,
    pub accuracy: f64,
    pub mean_tau: f64,
    pub mean_correct_rt_ms: f64,
    pub mean_incorrect_rt_ms: f64,
    pub censored_fraction: f64,
    pub histogram_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub per_condition: Vec<ConditionMetrics>,
    pub pooled_accuracy: f64,
    pub mean_histogram_mse: Option<f64>,
}

/// Aggregates per-trial outcomes into per-condition metrics, with histogram
/// MSE against the reference when one is supplied.
pub fn summarize_outcomes(
    outcomes: &[TrialOutcome],
    n_conditions: usize,
    spec: &HistogramSpec,
    reference: Option<&[Vec<f32>]>,
) -> Result<EvalMetrics, FitError> {
    let mut per_condition = Vec::with_capacity(n_conditions);
    let mut pooled_correct = 0usize;
    let mut mse_sum = 0.0f64;
    let mut mse_n = 0usize;
    for cond in 0..n_conditions {
        let trials: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.condition == cond).collect();
        let n = trials.len();
        if n == 0 {
            per_condition.push(ConditionMetrics {
                condition: cond,
                coherence: 0.0,
                n: 0,
                accuracy: f64::NAN,
                mean_tau: f64::NAN,
                mean_correct_rt_ms: f64::NAN,
                mean_incorrect_rt_ms: f64::NAN,
                censored_fraction: f64::NAN,
                histogram_mse: None,
            });
            continue;
        }
        let correct = trials.iter().filter(|o| o.correct).count();
        pooled_correct += correct;
        let censored = trials.iter().filter(|o| !o.crossed).count();
        let mean_tau = trials.iter().map(|o| o.tau as f64).sum::<f64>() / n as f64;
        let mean_rt = |want_correct: bool| {
            let vals: Vec<f64> = trials
                .iter()
                .filter(|o| o.correct == want_correct)
                .map(|o| o.signed_rt_ms.abs() as f64)
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let histogram_mse = match reference {
            Some(refs) if !refs[cond].is_empty() => {
                let model_rts: Vec<f32> = trials.iter().map(|o| o.signed_rt_ms).collect();
                let hm = soft_histogram(&model_rts, spec)?;
                let hr = soft_histogram(&refs[cond], spec)?;
                let m = crate::objectives::histogram_mse(&hm, &hr)?;
                mse_sum += m;
                mse_n += 1;
                Some(m)
            }
            _ => None,
        };
        per_condition.push(ConditionMetrics {
            condition: cond,
            coherence: trials[0].coherence,
            n,
            accuracy: correct as f64 / n as f64,
            mean_tau,
            mean_correct_rt_ms: mean_rt(true),
            mean_incorrect_rt_ms: mean_rt(false),
            censored_fraction: censored as f64 / n as f64,
            histogram_mse,
        });
    }
    Ok(EvalMetrics {
        per_condition,
        pooled_accuracy: pooled_correct as f64 / outcomes.len().max(1) as f64,
        mean_histogram_mse: if mse_n > 0 {
            Some(mse_sum / mse_n as f64)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TrainSchedule;
    use crate::stimuli::{config_grid, make_dataset, Direction, RdmConfig};

    fn tiny_fixture() -> (TrialFixture, RnnParams) {
        let base = RdmConfig {
            n_dots: 30,
            n_frames: 40,
            ..Default::default()
        };
        let configs = config_grid(&base, &[0.1, 0.5], &[Direction::RIGHT, Direction::LEFT]);
        let ds = make_dataset(&configs, 10, 21, 1).unwrap();
        let mut rnn = RnnParams::init(8, 16, 2, 21);
        let schedule = TrainSchedule {
            epochs: 5,
            warmup_epochs: 0,
            lr: 3e-3,
            post_warmup_lr: 3e-3,
            batch_size: 16,
            ..Default::default()
        };
        crate::backbone::train_bptt(&ds, None, None, &mut rnn, &schedule, None).unwrap();
        (prepare_fixture(&rnn, &ds).unwrap(), rnn)
    }

    #[test]
    fn theta_init_produces_crossings() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        let refs: Vec<&HiddenTrace> = fixture.traces.iter().collect();
        init_theta(&mut p, &refs).unwrap();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let spec = HistogramSpec::default();
        let outcomes = rtify_outcomes(&fixture, &p, &spec, &timing, ReadoutPolicy::SumToTau)
            .unwrap();
        let crossed = outcomes.iter().filter(|o| o.crossed).count();
        assert!(
            crossed as f64 >= 0.25 * outcomes.len() as f64,
            "{crossed}/{} crossings after warm start",
            outcomes.len()
        );
    }

    #[test]
    fn supervised_fit_reduces_loss() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        let spec = HistogramSpec::default();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        // synthetic reference within the 40-frame horizon (≤533 ms):
        // late RTs at condition 0, early at condition 1
        let reference = vec![
            vec![400.0f32, 440.0, 480.0, -420.0, 460.0, 410.0],
            vec![150.0f32, 170.0, 190.0, 160.0, -180.0, 140.0],
        ];
        let cfg = FitRtConfig {
            epochs: 40,
            lr: 0.02,
            ..Default::default()
        };
        let log = fit_rt(&fixture, &reference, &mut p, &spec, &timing, &cfg).unwrap();
        assert!(
            log.final_loss() < log.initial_loss(),
            "{} -> {}",
            log.initial_loss(),
            log.final_loss()
        );
    }

    #[test]
    fn zero_lr_fit_leaves_params_unchanged() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        let spec = HistogramSpec::default();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let reference = vec![vec![500.0f32, 600.0], vec![300.0f32, 350.0]];
        let cfg = FitRtConfig {
            epochs: 3,
            lr: 0.0,
            init_theta: false,
            ..Default::default()
        };
        let before_w = p.w1.data().to_vec();
        let before_theta = p.theta_value();
        fit_rt(&fixture, &reference, &mut p, &spec, &timing, &cfg).unwrap();
        assert_eq!(p.w1.data(), &before_w[..]);
        assert_eq!(p.theta_value(), before_theta);
    }

    #[test]
    fn fully_censored_training_is_a_no_op_without_penalty() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        // unreachable threshold: every trial censors
        p.theta = Array::scalar(1e7);
        let spec = HistogramSpec::default();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let reference = vec![vec![500.0f32, 600.0], vec![300.0f32, 350.0]];
        let cfg = FitRtConfig {
            epochs: 5,
            lr: 0.05,
            censored_penalty: false,
            init_theta: false,
            ..Default::default()
        };
        let before = (p.w1.data().to_vec(), p.theta_value());
        fit_rt(&fixture, &reference, &mut p, &spec, &timing, &cfg).unwrap();
        assert_eq!(p.w1.data(), &before.0[..], "w changed on censored-only data");
        assert_eq!(p.theta_value(), before.1, "theta changed on censored-only data");
    }

    #[test]
    fn censored_penalty_pulls_theta_down() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        p.theta = Array::scalar(1e3);
        let spec = HistogramSpec::default();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let reference = vec![vec![500.0f32, 600.0], vec![300.0f32, 350.0]];
        let cfg = FitRtConfig {
            epochs: 10,
            lr: 0.5,
            censored_penalty: true,
            init_theta: false,
            ..Default::default()
        };
        fit_rt(&fixture, &reference, &mut p, &spec, &timing, &cfg).unwrap();
        assert!(p.theta_value() < 1e3, "theta {} not pulled down", p.theta_value());
    }

    #[test]
    fn self_penalty_with_zero_lambda_changes_nothing() {
        let (fixture, _) = tiny_fixture();
        let mut p = RtifyParams::init(16, 8, 3);
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let cfg = SelfPenaltyConfig {
            epochs: 4,
            lambda: 0.0,
            ..Default::default()
        };
        let mut q = p.clone();
        let log = train_self_penalty(&fixture, &mut q, &timing, &cfg).unwrap();
        // θ was re-initialized identically in both cases; weights untouched
        let refs: Vec<&HiddenTrace> = fixture.traces.iter().take(256).collect();
        init_theta(&mut p, &refs).unwrap();
        assert_eq!(q.w1.data(), p.w1.data());
        assert_eq!(q.theta_value(), p.theta_value());
        assert_eq!(log.rows.len(), 4);
    }

    #[test]
    fn self_penalty_shortens_stopping_times() {
        let (fixture, _) = tiny_fixture();
        let timing = RtTiming::from_frame_rate(75.0, 0.0);
        let spec = HistogramSpec::default();

        let mut control = RtifyParams::init(16, 8, 3);
        let refs: Vec<&HiddenTrace> = fixture.traces.iter().take(256).collect();
        init_theta(&mut control, &refs).unwrap();

        let mut trained = RtifyParams::init(16, 8, 3);
        let cfg = SelfPenaltyConfig {
            epochs: 60,
            lr: 0.02,
            lambda: 1e-3,
            ..Default::default()
        };
        train_self_penalty(&fixture, &mut trained, &timing, &cfg).unwrap();

        let mean_tau = |p: &RtifyParams| {
            let o = rtify_outcomes(&fixture, p, &spec, &timing, ReadoutPolicy::SumToTau).unwrap();
            o.iter().map(|t| t.tau as f64).sum::<f64>() / o.len() as f64
        };
        let t_control = mean_tau(&control);
        let t_trained = mean_tau(&trained);
        assert!(
            t_trained < t_control,
            "penalty did not shorten τ: {t_trained} vs {t_control}"
        );
    }
}
