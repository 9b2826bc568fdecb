//! Training losses over signed reaction times: soft-binned histogram MSE
//! (full and correct-only), negative correlation of per-stimulus means, and
//! the speed–accuracy self-penalty.
//!
//! A signed RT is milliseconds with a positive sign for correct choices and
//! a negative sign for incorrect ones, so one histogram carries both speed
//! and accuracy.

use crate::diffcore::{rowwise_softmax, Array, DiffError, Tape, Var};
use crate::rtify::{Decision, RtifyError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("histogram edges differ: {0}")]
    EdgeMismatch(String),
    #[error("no positive samples (all trials incorrect)")]
    NoPositiveSamples,
    #[error("need at least 3 paired values, got {0}")]
    TooFewPairs(usize),
    #[error("zero variance in {0} RTs (collapsed distribution)")]
    ZeroVariance(&'static str),
    #[error("bad histogram spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Rtify(#[from] RtifyError),
    #[error("csv error on {path}: {detail}")]
    Csv { path: String, detail: String },
}

/// Uniform bins over `[min_ms, max_ms]` with a Gaussian soft-assignment
/// kernel of bandwidth `bandwidth_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramSpec {
    pub min_ms: f32,
    pub max_ms: f32,
    pub bins: usize,
    pub bandwidth_ms: f32,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            min_ms: -2000.0,
            max_ms: 2000.0,
            bins: 50,
            bandwidth_ms: 40.0,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.max_ms <= self.min_ms {
            return Err(ObjectiveError::BadSpec(format!(
                "max_ms {} <= min_ms {}",
                self.max_ms, self.min_ms
            )));
        }
        if self.bins == 0 {
            return Err(ObjectiveError::BadSpec("bins must be positive".into()));
        }
        if self.bandwidth_ms <= 0.0 {
            return Err(ObjectiveError::BadSpec("bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f32 {
        (self.max_ms - self.min_ms) / self.bins as f32
    }

    pub fn centers(&self) -> Vec<f32> {
        let w = self.bin_width();
        (0..self.bins)
            .map(|i| self.min_ms + (i as f32 + 0.5) * w)
            .collect()
    }

    /// Where a censored trial lands: the signed range limit.
    pub fn censored_rt(&self, correct: bool) -> f32 {
        if correct {
            self.max_ms
        } else {
            self.min_ms
        }
    }
}

#[derive(Debug, Clone)]
pub struct SignedRtHistogram {
    pub spec: HistogramSpec,
    pub densities: Vec<f32>,
}

/// Milliseconds, negative when the choice was incorrect.
pub fn signed_rt(decision: &Decision, label: usize) -> Result<f32, ObjectiveError> {
    let choice = decision.choice_or_err()?;
    Ok(if choice == label {
        decision.rt_ms
    } else {
        -decision.rt_ms
    })
}

fn kernel_exponents(rt: f32, centers: &[f32], bandwidth: f32) -> Vec<f32> {
    let inv = -1.0 / (2.0 * bandwidth * bandwidth);
    centers
        .iter()
        .map(|c| {
            let d = rt - c;
            d * d * inv
        })
        .collect()
}

/// Normalized Gaussian kernel mass of one sample over the bin centers.
pub fn kernel_weights(rt: f32, spec: &HistogramSpec) -> Vec<f32> {
    let exps = kernel_exponents(rt, &spec.centers(), spec.bandwidth_ms);
    rowwise_softmax(&exps, exps.len())
}

/// Soft-binned density: each sample contributes unit kernel mass, the batch
/// is averaged, so densities sum to one.
pub fn soft_histogram(rts: &[f32], spec: &HistogramSpec) -> Result<SignedRtHistogram, ObjectiveError> {
    spec.validate()?;
    if rts.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut acc = vec![0.0f64; spec.bins];
    for rt in rts {
        for (a, w) in acc.iter_mut().zip(kernel_weights(*rt, spec)) {
            *a += w as f64;
        }
    }
    let n = rts.len() as f64;
    Ok(SignedRtHistogram {
        spec: *spec,
        densities: acc.iter().map(|a| (*a / n) as f32).collect(),
    })
}

/// Mean of squared per-bin density differences.
pub fn histogram_mse(
    a: &SignedRtHistogram,
    b: &SignedRtHistogram,
) -> Result<f64, ObjectiveError> {
    if a.spec != b.spec {
        return Err(ObjectiveError::EdgeMismatch(format!(
            "{:?} vs {:?}",
            a.spec, b.spec
        )));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.densities.iter().zip(&b.densities) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    Ok(acc / a.spec.bins as f64)
}

/// Histogram MSE restricted to the positive (correct) part of both
/// distributions, each renormalized to unit mass.
pub fn correct_only_histogram_mse(
    model_rts: &[f32],
    reference_rts: &[f32],
    spec: &HistogramSpec,
) -> Result<f64, ObjectiveError> {
    let pos = |rts: &[f32]| -> Vec<f32> { rts.iter().copied().filter(|r| *r > 0.0).collect() };
    let m = pos(model_rts);
    if m.is_empty() {
        return Err(ObjectiveError::NoPositiveSamples);
    }
    let r = pos(reference_rts);
    if r.is_empty() {
        return Err(ObjectiveError::NoPositiveSamples);
    }
    histogram_mse(&soft_histogram(&m, spec)?, &soft_histogram(&r, spec)?)
}

/// −Pearson r of paired per-stimulus means.
pub fn neg_correlation(model: &[f64], reference: &[f64]) -> Result<f64, ObjectiveError> {
    if model.len() != reference.len() || model.len() < 3 {
        return Err(ObjectiveError::TooFewPairs(model.len().min(reference.len())));
    }
    let n = model.len() as f64;
    let mx = model.iter().sum::<f64>() / n;
    let my = reference.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in model.iter().zip(reference) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(ObjectiveError::ZeroVariance("model"));
    }
    if syy == 0.0 {
        return Err(ObjectiveError::ZeroVariance("reference"));
    }
    Ok(-(sxy / (sxx.sqrt() * syy.sqrt())))
}

// ── Taped variants ───────────────────────────────────────────────────

/// One histogram sample: a differentiable signed RT on the tape, or a
/// constant (censored trials, which must not receive gradient).
#[derive(Debug, Clone, Copy)]
pub enum HistSample {
    Var(Var),
    Const(f32),
}

/// Differentiable soft histogram over a batch of samples.
pub fn taped_soft_histogram(
    tape: &mut Tape,
    samples: &[HistSample],
    spec: &HistogramSpec,
) -> Result<Var, ObjectiveError> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let centers = spec.centers();
    let inv = -1.0 / (2.0 * spec.bandwidth_ms * spec.bandwidth_ms);

    // constant samples are pre-reduced into a single leaf
    let mut const_acc = vec![0.0f32; spec.bins];
    let mut any_const = false;
    for s in samples {
        if let HistSample::Const(rt) = s {
            any_const = true;
            for (a, w) in const_acc.iter_mut().zip(kernel_weights(*rt, spec)) {
                *a += w;
            }
        }
    }

    let centers_leaf = tape.constant(Array::from_vec(centers.clone()));
    let mut acc: Option<Var> = if any_const {
        Some(tape.constant(Array::from_vec(const_acc)))
    } else {
        None
    };
    for s in samples {
        if let HistSample::Var(rt) = s {
            let rt_b = tape.broadcast(*rt, spec.bins)?;
            let diff = tape.sub(rt_b, centers_leaf)?;
            let sq = tape.mul(diff, diff)?;
            let expo = tape.scale(sq, inv)?;
            let w = tape.softmax(expo)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
    }
    let total = acc.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / samples.len() as f32)?)
}

/// Differentiable MSE of a model density against a fixed reference.
pub fn taped_histogram_mse(
    tape: &mut Tape,
    model_density: Var,
    reference: &SignedRtHistogram,
) -> Result<Var, ObjectiveError> {
    if tape.value(model_density).numel() != reference.spec.bins {
        return Err(ObjectiveError::EdgeMismatch(format!(
            "model has {} bins, reference {}",
            tape.value(model_density).numel(),
            reference.spec.bins
        )));
    }
    let ref_leaf = tape.constant(Array::from_vec(reference.densities.clone()));
    let diff = tape.sub(model_density, ref_leaf)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Differentiable −Pearson r of model scalars against fixed references.
pub fn taped_neg_correlation(
    tape: &mut Tape,
    model: &[Var],
    reference: &[f32],
) -> Result<Var, ObjectiveError> {
    if model.len() != reference.len() || model.len() < 3 {
        return Err(ObjectiveError::TooFewPairs(model.len().min(reference.len())));
    }
    let model_vals: Vec<f64> = model
        .iter()
        .map(|v| tape.value(*v).item() as f64)
        .collect();
    let spread = model_vals
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
        - model_vals.iter().cloned().fold(f64::MAX, f64::min);
    if spread == 0.0 {
        return Err(ObjectiveError::ZeroVariance("model"));
    }
    let n = reference.len();
    let ry_mean = reference.iter().map(|y| *y as f64).sum::<f64>() / n as f64;
    let ry: Vec<f32> = reference.iter().map(|y| (*y as f64 - ry_mean) as f32).collect();
    let syy: f64 = ry.iter().map(|y| (*y as f64) * (*y as f64)).sum();
    if syy == 0.0 {
        return Err(ObjectiveError::ZeroVariance("reference"));
    }

    let x = tape.concat(model)?;
    let mx = tape.mean(x)?;
    let mx_b = tape.broadcast(mx, n)?;
    let cx = tape.sub(x, mx_b)?;
    let ry_leaf = tape.constant(Array::from_vec(ry));
    let xy = tape.mul(cx, ry_leaf)?;
    let sxy = tape.sum(xy)?;
    let xx = tape.mul(cx, cx)?;
    let sxx = tape.sum(xx)?;
    let sx = tape.sqrt(sxx)?;
    let denom = tape.scale(sx, (syy.sqrt()) as f32)?;
    let r = tape.div(sxy, denom)?;
    Ok(tape.neg(r)?)
}

/// One-sample self-penalty loss: `CCE + λ · l_y · τ`.
///
/// The cross-entropy and correct-class logit enter as constants (the
/// classifier is frozen); the gradient reaches the stopping parameters only
/// through the τ node's surrogate.
pub fn taped_self_penalty(
    tape: &mut Tape,
    cce: f32,
    correct_logit: f32,
    tau_node: Var,
    lambda: f32,
) -> Result<Var, ObjectiveError> {
    let penalty = tape.scale(tau_node, lambda * correct_logit)?;
    Ok(tape.offset(penalty, cce)?)
}

// ── Reference RT files ───────────────────────────────────────────────

/// Writes per-condition signed RTs as CSV rows `(condition_id, rt_ms_signed)`.
/// An optional `# comment` first line carries provenance (config hash).
pub fn write_reference_csv(
    path: &Path,
    per_condition: &[Vec<f32>],
    comment: Option<&str>,
) -> Result<(), ObjectiveError> {
    let err = |detail: String| ObjectiveError::Csv {
        path: path.display().to_string(),
        detail,
    };
    let mut buf = Vec::new();
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["condition_id", "rt_ms_signed"])
        .map_err(|e| err(e.to_string()))?;
    for (cond, rts) in per_condition.iter().enumerate() {
        for rt in rts {
            w.write_record(&[cond.to_string(), format!("{rt}")])
                .map_err(|e| err(e.to_string()))?;
        }
    }
    let buf = w.into_inner().map_err(|e| err(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Reads a reference RT CSV back into per-condition vectors. Lines starting
/// with `#` are comments.
pub fn read_reference_csv(path: &Path) -> Result<Vec<Vec<f32>>, ObjectiveError> {
    let err = |detail: String| ObjectiveError::Csv {
        path: path.display().to_string(),
        detail,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut out: Vec<Vec<f32>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let cond: usize = rec
            .get(0)
            .ok_or_else(|| err("missing condition_id".into()))?
            .parse()
            .map_err(|e| err(format!("bad condition_id: {e}")))?;
        let rt: f32 = rec
            .get(1)
            .ok_or_else(|| err("missing rt_ms_signed".into()))?
            .parse()
            .map_err(|e| err(format!("bad rt_ms_signed: {e}")))?;
        while out.len() <= cond {
            out.push(Vec::new());
        }
        out[cond].push(rt);
    }
    if out.is_empty() {
        return Err(err("no data rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rtify::RtTiming;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn decision(tau: usize, choice: usize, timing: &RtTiming) -> Decision {
        Decision {
            tau,
            crossed: true,
            choice: Some(choice),
            rt_ms: timing.rt_ms(tau),
        }
    }

    #[test]
    fn signed_rt_examples() {
        let tm = RtTiming::from_frame_rate(75.0, 0.0);
        let d = decision(40, 0, &tm);
        assert_relative_eq!(signed_rt(&d, 0).unwrap(), 533.333, epsilon = 0.01);
        assert_relative_eq!(signed_rt(&d, 1).unwrap(), -533.333, epsilon = 0.01);
        // ceiling: 150 steps at 75 Hz stays within ±2000 ms
        let d = decision(150, 0, &tm);
        assert!(signed_rt(&d, 0).unwrap() <= 2000.0 + 1e-3);
    }

    #[test]
    fn single_sample_small_bandwidth_concentrates() {
        let spec = HistogramSpec {
            bandwidth_ms: 1e-3,
            ..Default::default()
        };
        let center = spec.centers()[30];
        let h = soft_histogram(&[center], &spec).unwrap();
        assert!(h.densities[30] > 1.0 - 1e-6);
    }

    #[test]
    fn identical_batches_have_zero_mse() {
        let spec = HistogramSpec::default();
        let rts = [300.0, -450.0, 800.0, 1200.0, -90.0];
        let a = soft_histogram(&rts, &spec).unwrap();
        let b = soft_histogram(&rts, &spec).unwrap();
        assert_eq!(histogram_mse(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_histograms_mse_is_two_over_bins() {
        let spec = HistogramSpec::default();
        let mut a = vec![0.0f32; spec.bins];
        let mut b = vec![0.0f32; spec.bins];
        a[3] = 1.0;
        b[17] = 1.0;
        let ha = SignedRtHistogram { spec, densities: a };
        let hb = SignedRtHistogram { spec, densities: b };
        assert_relative_eq!(
            histogram_mse(&ha, &hb).unwrap(),
            2.0 / spec.bins as f64,
            epsilon = 1e-9
        );
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(
            soft_histogram(&[], &HistogramSpec::default()),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    #[test]
    fn edge_mismatch_is_an_error() {
        let a = soft_histogram(&[100.0], &HistogramSpec::default()).unwrap();
        let spec2 = HistogramSpec {
            bins: 40,
            ..Default::default()
        };
        let b = soft_histogram(&[100.0], &spec2).unwrap();
        assert!(matches!(
            histogram_mse(&a, &b),
            Err(ObjectiveError::EdgeMismatch(_))
        ));
    }

    #[test]
    fn correct_only_ignores_accuracy() {
        let spec = HistogramSpec::default();
        // same correct RTs, wildly different error counts
        let model = [400.0, 700.0, -100.0, -200.0, -300.0];
        let reference = [400.0, 700.0, -1500.0];
        assert_relative_eq!(
            correct_only_histogram_mse(&model, &reference, &spec).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn all_incorrect_model_errors_out() {
        let spec = HistogramSpec::default();
        assert!(matches!(
            correct_only_histogram_mse(&[-400.0, -90.0], &[100.0], &spec),
            Err(ObjectiveError::NoPositiveSamples)
        ));
    }

    #[test]
    fn neg_correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_relative_eq!(neg_correlation(&x, &y2).unwrap(), -1.0, epsilon = 1e-12);
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(neg_correlation(&x, &yn).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn neg_correlation_affine_invariance() {
        let x = [0.3, -1.0, 2.5, 0.9, 4.2, -0.7];
        let y = [1.1, 0.4, -0.8, 2.2, 0.0, 1.9];
        let base = neg_correlation(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| 3.7 * v - 11.0).collect();
        let ys: Vec<f64> = y.iter().map(|v| 0.02 * v + 5.0).collect();
        assert_relative_eq!(neg_correlation(&xs, &ys).unwrap(), base, epsilon = 1e-6);
    }

    #[test]
    fn independent_pairs_have_small_correlation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        let mut failures = 0;
        let reps = 20;
        for _ in 0..reps {
            let x: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            if neg_correlation(&x, &y).unwrap().abs() >= 0.2 {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures}/{reps} exceeded 0.2");
    }

    #[test]
    fn zero_variance_is_an_error() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let y = [0.1, 0.4, 0.2, 0.9];
        assert!(matches!(
            neg_correlation(&x, &y),
            Err(ObjectiveError::ZeroVariance("model"))
        ));
    }

    #[test]
    fn taped_histogram_matches_plain() {
        let spec = HistogramSpec::default();
        let rts = [250.0f32, -600.0, 1900.0, 30.0];
        let plain = soft_histogram(&rts, &spec).unwrap();

        let mut tape = Tape::new();
        let samples: Vec<HistSample> = rts
            .iter()
            .map(|r| {
                let v = tape.leaf(Array::scalar(*r), true);
                HistSample::Var(v)
            })
            .collect();
        let density = taped_soft_histogram(&mut tape, &samples, &spec).unwrap();
        for (p, t) in plain.densities.iter().zip(tape.value(density).data()) {
            assert_relative_eq!(*p, *t, epsilon = 1e-5);
        }
    }

    #[test]
    fn censored_const_samples_get_no_gradient_but_carry_mass() {
        let spec = HistogramSpec::default();
        let mut tape = Tape::new();
        let v = tape.leaf(Array::scalar(500.0), true);
        let samples = vec![HistSample::Var(v), HistSample::Const(spec.censored_rt(true))];
        let density = taped_soft_histogram(&mut tape, &samples, &spec).unwrap();
        let total: f64 = tape.value(density).data().iter().map(|x| *x as f64).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-5);
        // the censored half of the mass sits at the positive edge
        let last = *tape.value(density).data().last().unwrap();
        assert!(last > 0.4, "edge bin density {last}");
    }

    #[test]
    fn self_penalty_arithmetic() {
        // l_y = 2.0, τ = 5, CCE = 0.1, λ = 0.1 → 0.1 + 1.0 = 1.1
        let mut tape = Tape::new();
        let theta = tape.leaf(Array::scalar(1.0), true);
        let phi = tape.leaf(Array::scalar(2.0), true);
        let tau = crate::rtify::surrogate_node(&mut tape, phi, theta, 5, 0.4, 1e-3).unwrap();
        let loss = taped_self_penalty(&mut tape, 0.1, 2.0, tau, 0.1).unwrap();
        assert_relative_eq!(tape.value(loss).item(), 1.1, epsilon = 1e-6);

        // ∂L/∂τ = λ·l_y = 0.2 at the node, so ∂L/∂θ = 0.2 / e_τ = 0.5
        let grads = tape.backward(loss).unwrap();
        assert_relative_eq!(grads.expect(theta).item(), 0.5, epsilon = 1e-6);
        assert_relative_eq!(grads.expect(phi).item(), -0.5, epsilon = 1e-6);
    }

    #[test]
    fn self_penalty_with_zero_lambda_is_pure_cce() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Array::scalar(1.0), true);
        let phi = tape.leaf(Array::scalar(2.0), true);
        let tau = crate::rtify::surrogate_node(&mut tape, phi, theta, 7, 0.4, 1e-3).unwrap();
        let loss = taped_self_penalty(&mut tape, 0.73, 2.0, tau, 0.0).unwrap();
        assert_relative_eq!(tape.value(loss).item(), 0.73, epsilon = 1e-7);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect(theta).item(), 0.0);
        assert_eq!(grads.expect(phi).item(), 0.0);
    }

    #[test]
    fn positive_confidence_pushes_theta_down() {
        // with e_τ > 0 and l_y > 0 the θ gradient is positive, so a descent
        // step can only lower θ
        use crate::diffcore::{Adam, AdamConfig};
        let mut tape = Tape::new();
        let theta = tape.leaf(Array::scalar(2.0), true);
        let phi = tape.leaf(Array::scalar(2.5), true);
        let tau = crate::rtify::surrogate_node(&mut tape, phi, theta, 4, 0.6, 1e-3).unwrap();
        let loss = taped_self_penalty(&mut tape, 0.2, 1.5, tau, 0.01).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.expect(theta).item() > 0.0);

        let mut theta_arr = Array::scalar(2.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        adam.step(&mut [("theta", &mut theta_arr)], &[grads.expect(theta)])
            .unwrap();
        assert!(theta_arr.item() < 2.0);
    }

    #[test]
    fn reference_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.csv");
        let data = vec![vec![120.5f32, -300.0], vec![900.0], vec![-45.5, 60.0, 61.0]];
        write_reference_csv(&path, &data, Some("config_hash=abc tool_version=0.1.0")).unwrap();
        let back = read_reference_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], data[0]);
        assert_eq!(back[2], data[2]);
    }

    proptest! {
        #[test]
        fn soft_histogram_mass_is_conserved(
            rts in proptest::collection::vec(-2500.0f32..2500.0, 1..40),
            bandwidth in 5.0f32..200.0,
        ) {
            let spec = HistogramSpec { bandwidth_ms: bandwidth, ..Default::default() };
            let h = soft_histogram(&rts, &spec).unwrap();
            let total: f64 = h.densities.iter().map(|x| *x as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "mass {total}");
            for d in &h.densities {
                prop_assert!(*d >= 0.0);
            }
        }

        #[test]
        fn histogram_mse_is_symmetric_nonnegative(
            a in proptest::collection::vec(-1900.0f32..1900.0, 1..20),
            b in proptest::collection::vec(-1900.0f32..1900.0, 1..20),
        ) {
            let spec = HistogramSpec::default();
            let ha = soft_histogram(&a, &spec).unwrap();
            let hb = soft_histogram(&b, &spec).unwrap();
            let ab = histogram_mse(&ha, &hb).unwrap();
            let ba = histogram_mse(&hb, &ha).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
