//! Independent verification engines: a drift-diffusion simulator that doubles
//! as the synthetic reference-data generator, the piecewise-linear
//! interpolated crossing-time oracle, a central-difference gradient checker,
//! and the entropy-thresholding stopping baseline.

use crate::backbone::{argmax, HiddenTrace};
use crate::objectives::{histogram_mse, signed_rt, soft_histogram, HistogramSpec, ObjectiveError};
use crate::rtify::{AccumulatorTrace, Decision, RtTiming};
use crate::seed::{derive_seed, TAG_DDM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("trace never crosses the threshold")]
    NoCrossing,
    #[error("function is not deterministic: {a} vs {b}")]
    NonDeterministic { a: f64, b: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

// ── Drift-diffusion simulator ────────────────────────────────────────

/// One-dimensional noisy integrator between absorbing boundaries ±threshold.
/// Drift is `drift_per_s × coherence`; time units are seconds internally,
/// milliseconds at the interface.
#[derive(Debug, Clone, Copy)]
pub struct DdmParams {
    pub drift_per_s: f64,
    pub threshold: f64,
    pub noise: f64,
    pub t0_ms: f64,
    pub dt_ms: f64,
    pub censor_ms: f64,
}

impl Default for DdmParams {
    fn default() -> Self {
        DdmParams {
            drift_per_s: 30.0,
            threshold: 1.0,
            noise: 1.0,
            t0_ms: 250.0,
            dt_ms: 1.0,
            censor_ms: 2000.0,
        }
    }
}

impl DdmParams {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if self.threshold <= 0.0 || self.noise <= 0.0 || self.dt_ms <= 0.0 {
            return Err(ReferenceError::InvalidParams(
                "threshold, noise and dt must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdmSample {
    /// Signed RT per trial: positive when the correct boundary was hit.
    pub signed_rts: Vec<f32>,
    pub n_censored: usize,
}

/// Euler–Maruyama first-passage simulation. Censored trials enter at the
/// censor limit, signed by the integrator's current lean.
pub fn simulate_ddm(
    params: &DdmParams,
    coherence: f64,
    n_trials: usize,
    seed: u64,
) -> Result<DdmSample, ReferenceError> {
    params.validate()?;
    let dt_s = params.dt_ms / 1000.0;
    let drift_step = params.drift_per_s * coherence * dt_s;
    let noise_step = params.noise * dt_s.sqrt();
    let max_steps = ((params.censor_ms - params.t0_ms) / params.dt_ms).floor().max(0.0) as usize;

    let outcomes: Vec<(f32, bool)> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_DDM, i as u64));
            let mut x = 0.0f64;
            for step in 1..=max_steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                x += drift_step + noise_step * z;
                if x.abs() >= params.threshold {
                    let rt = params.t0_ms + step as f64 * params.dt_ms;
                    let signed = if x > 0.0 { rt } else { -rt };
                    return (signed as f32, false);
                }
            }
            let signed = if x >= 0.0 {
                params.censor_ms
            } else {
                -params.censor_ms
            };
            (signed as f32, true)
        })
        .collect();

    let n_censored = outcomes.iter().filter(|(_, c)| *c).count();
    Ok(DdmSample {
        signed_rts: outcomes.into_iter().map(|(rt, _)| rt).collect(),
        n_censored,
    })
}

/// Closed-form probability of absorbing at the correct boundary:
/// `1 / (1 + exp(−2·v·c·A/s²))`.
pub fn ddm_accuracy_closed_form(params: &DdmParams, coherence: f64) -> f64 {
    let k = 2.0 * params.drift_per_s * coherence * params.threshold
        / (params.noise * params.noise);
    1.0 / (1.0 + (-k).exp())
}

/// Synthetic reference distributions for a coherence sweep.
pub fn ddm_reference_by_condition(
    params: &DdmParams,
    coherences: &[f32],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<DdmSample>, ReferenceError> {
    coherences
        .iter()
        .enumerate()
        .map(|(i, c)| {
            simulate_ddm(
                params,
                *c as f64,
                n_trials,
                derive_seed(seed, TAG_DDM, 1_000_000 + i as u64),
            )
        })
        .collect()
}

// ── Interpolated crossing oracle ─────────────────────────────────────

/// Continuous crossing time of the piecewise-linear interpolation through
/// `(0, phi0), (1, phi[0]), (2, phi[1]), …` against a strict threshold.
pub fn interpolated_crossing_seq(
    phi0: f64,
    phi: &[f64],
    theta: f64,
) -> Result<f64, ReferenceError> {
    let mut prev = phi0;
    for (i, p) in phi.iter().enumerate() {
        if *p > theta {
            let t = i + 1;
            return Ok((t - 1) as f64 + (theta - prev) / (p - prev));
        }
        prev = *p;
    }
    Err(ReferenceError::NoCrossing)
}

/// Crossing oracle over an evidence accumulator (Φ_0 = 0).
pub fn interpolated_crossing(
    trace: &AccumulatorTrace,
    theta: f64,
) -> Result<f64, ReferenceError> {
    let phi: Vec<f64> = (1..=trace.len()).map(|t| trace.phi(t)).collect();
    interpolated_crossing_seq(0.0, &phi, theta)
}

// ── Finite-difference gradient checker ───────────────────────────────

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with a unit floor: below magnitude 1 the comparison is
/// effectively absolute.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference check of `analytic` against `f` around `x0`,
/// differences accumulated in f64. Rejects non-deterministic functions.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f32]) -> f64,
    x0: &[f32],
    analytic: &[f32],
    eps: f64,
) -> Result<FdReport, ReferenceError> {
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch");
    let base_a = f(x0);
    let base_b = f(x0);
    if base_a != base_b {
        return Err(ReferenceError::NonDeterministic {
            a: base_a,
            b: base_b,
        });
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let xi = x0[i] as f64;
        let plus = (xi + eps) as f32;
        let minus = (xi - eps) as f32;
        x[i] = plus;
        let f_plus = f(&x);
        x[i] = minus;
        let f_minus = f(&x);
        x[i] = x0[i];
        let h = plus as f64 - minus as f64;
        let numeric = (f_plus - f_minus) / h;
        let err = rel_err(analytic[i] as f64, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i] as f64;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

// ── Entropy-thresholding baseline ────────────────────────────────────

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f32]) -> f64 {
    probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| {
            let p = *p as f64;
            -p * p.ln()
        })
        .sum()
}

/// Stops at the first step whose output entropy falls below `threshold_h`;
/// censored at the final step otherwise.
pub fn entropy_threshold_rt(
    trace: &HiddenTrace,
    threshold_h: f64,
    timing: &RtTiming,
) -> Decision {
    let n = trace.n_steps;
    for t in 1..=n {
        let logits = trace.logits_at(t - 1);
        let probs = crate::diffcore::rowwise_softmax(logits, logits.len());
        if entropy(&probs) < threshold_h {
            return Decision {
                tau: t,
                crossed: true,
                choice: Some(argmax(logits)),
                rt_ms: timing.rt_ms(t),
            };
        }
    }
    Decision {
        tau: n,
        crossed: false,
        choice: Some(argmax(trace.logits_at(n - 1))),
        rt_ms: timing.rt_ms(n),
    }
}

#[derive(Debug, Clone)]
pub struct EntropyFit {
    pub threshold: f64,
    pub mse: f64,
    /// Every (threshold, mse) pair evaluated on the grid.
    pub curve: Vec<(f64, f64)>,
}

/// Log-spaced threshold grid over `(0, ln C]`.
pub fn entropy_grid(n_classes: usize, grid_size: usize) -> Vec<f64> {
    let top = (n_classes as f64).ln();
    if grid_size <= 1 {
        return vec![top];
    }
    (0..grid_size)
        .map(|i| {
            let frac = i as f64 / (grid_size - 1) as f64;
            top * 10f64.powf(-3.0 * (1.0 - frac))
        })
        .collect()
}

/// Per-condition average histogram MSE of the entropy rule against
/// reference signed RTs, for one candidate threshold.
pub fn entropy_rule_mse(
    traces: &[&HiddenTrace],
    labels: &[usize],
    conditions: &[usize],
    reference: &[Vec<f32>],
    spec: &HistogramSpec,
    timing: &RtTiming,
    threshold_h: f64,
) -> Result<f64, ReferenceError> {
    let n_cond = reference.len();
    let mut per_cond: Vec<Vec<f32>> = vec![Vec::new(); n_cond];
    for ((trace, label), cond) in traces.iter().zip(labels).zip(conditions) {
        let d = entropy_threshold_rt(trace, threshold_h, timing);
        let rt = if d.crossed {
            signed_rt(&d, *label)?
        } else {
            spec.censored_rt(d.choice == Some(*label))
        };
        per_cond[*cond].push(rt);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (model_rts, ref_rts) in per_cond.iter().zip(reference) {
        if model_rts.is_empty() || ref_rts.is_empty() {
            continue;
        }
        let hm = soft_histogram(model_rts, spec)?;
        let hr = soft_histogram(ref_rts, spec)?;
        total += histogram_mse(&hm, &hr)?;
        n += 1;
    }
    if n == 0 {
        return Err(ReferenceError::InvalidParams(
            "no condition had both model and reference RTs".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Grid search for the entropy threshold minimizing the histogram MSE.
pub fn fit_entropy_threshold(
    traces: &[&HiddenTrace],
    labels: &[usize],
    conditions: &[usize],
    reference: &[Vec<f32>],
    spec: &HistogramSpec,
    timing: &RtTiming,
    grid_size: usize,
) -> Result<EntropyFit, ReferenceError> {
    if grid_size == 0 {
        return Err(ReferenceError::EmptyGrid);
    }
    let n_classes = traces
        .first()
        .map(|t| t.n_classes)
        .ok_or(ReferenceError::InvalidParams("no traces".into()))?;
    let grid = entropy_grid(n_classes, grid_size);
    let curve: Result<Vec<(f64, f64)>, ReferenceError> = grid
        .par_iter()
        .map(|h| {
            entropy_rule_mse(traces, labels, conditions, reference, spec, timing, *h)
                .map(|mse| (*h, mse))
        })
        .collect();
    let curve = curve?;
    let (threshold, mse) = curve
        .iter()
        .copied()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    Ok(EntropyFit {
        threshold,
        mse,
        curve,
    })
}

// ── Statistics helpers ───────────────────────────────────────────────

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let _ = n;
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].partial_cmp(&xs[*b]).unwrap());
    let mut out = vec![0.0f64; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Spearman ρ plus a two-sided p-value from the t approximation with
/// n − 2 degrees of freedom.
pub fn spearman_test(x: &[f64], y: &[f64]) -> (f64, f64) {
    let rho = spearman(x, y);
    let n = x.len() as f64;
    if n < 3.0 {
        return (rho, 1.0);
    }
    if rho.abs() >= 1.0 {
        return (rho, 0.0);
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (rho, p)
}
