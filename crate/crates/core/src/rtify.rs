//! Differentiable stopping times: map hidden states to scalar evidence,
//! accumulate, threshold, and expose a surrogate gradient so the stopping
//! step can be trained.
//!
//! Forward is always the exact integer rule τ = min{t : Φ_t > θ}. The
//! relaxation exists only in the backward pass, where a custom node routes
//! the upstream ∂F/∂τ as −1/ê toward Φ_τ and +1/ê toward θ, with
//! ê the threshold-step increment Φ_τ − Φ_{τ−1} (denominator-guarded).

use crate::backbone::{argmax, HiddenTrace};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffcore::{matmul, rowwise_softmax, Array, DiffError, Tape, Var};
use crate::seed::{derive_seed, TAG_PARAM_INIT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Default guard for the surrogate denominator.
pub const EPS_DEN_DEFAULT: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum RtifyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("decision has no readout choice yet")]
    NoChoice,
}

/// Step-to-milliseconds conversion: `rt = t0 + τ · step_ms`.
#[derive(Debug, Clone, Copy)]
pub struct RtTiming {
    pub step_ms: f32,
    pub t0_ms: f32,
}

impl RtTiming {
    pub fn from_frame_rate(hz: f32, t0_ms: f32) -> Self {
        RtTiming {
            step_ms: 1000.0 / hz,
            t0_ms,
        }
    }

    pub fn rt_ms(&self, tau: usize) -> f32 {
        self.t0_ms + tau as f32 * self.step_ms
    }
}

/// Evidence head `f_w`: a k→H→1 perceptron with tanh hidden layer, plus the
/// trainable threshold θ.
#[derive(Debug, Clone)]
pub struct RtifyParams {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
    pub theta: Array,
}

impl RtifyParams {
    /// Small random weights with a positive output bias, so early evidence
    /// is positive and a warm-start θ produces crossings immediately.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PARAM_INIT, 1));
        let mut randn = |shape: Vec<usize>, std: f32| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Array::raw(shape, data)
        };
        RtifyParams {
            w1: randn(vec![input_dim, hidden], 0.5 / (input_dim as f32).sqrt()),
            b1: Array::zeros(vec![hidden]),
            w2: randn(vec![hidden, 1], 0.5 / (hidden as f32).sqrt()),
            b2: Array::from_vec(vec![0.05]),
            theta: Array::scalar(0.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn theta_value(&self) -> f32 {
        self.theta.item()
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("rtify", seed, config_hash);
        ck.push("w1", self.w1.clone());
        ck.push("b1", self.b1.clone());
        ck.push("w2", self.w2.clone());
        ck.push("b2", self.b2.clone());
        ck.push("theta", self.theta.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        Ok(RtifyParams {
            w1: ck.get("w1")?.clone(),
            b1: ck.get("b1")?.clone(),
            w2: ck.get("w2")?.clone(),
            b2: ck.get("b2")?.clone(),
            theta: ck.get("theta")?.clone(),
        })
    }
}

/// Per-step evidence and its running sum for one trial.
///
/// Cumulative sums are carried in f64 so that consecutive differences
/// recover the f32 evidence exactly.
#[derive(Debug, Clone)]
pub struct AccumulatorTrace {
    evidence: Vec<f32>,
    cumulative: Vec<f64>,
}

impl AccumulatorTrace {
    pub fn len(&self) -> usize {
        self.evidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evidence.is_empty()
    }

    pub fn evidence(&self) -> &[f32] {
        &self.evidence
    }

    /// Φ_t for t in 1..=N; Φ_0 is 0 by definition.
    pub fn phi(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.cumulative[t - 1]
        }
    }

    pub fn phi_final(&self) -> f64 {
        self.phi(self.len())
    }

    /// The increment Φ_τ − Φ_{τ−1} = e_τ.
    pub fn increment(&self, tau: usize) -> f32 {
        (self.phi(tau) - self.phi(tau - 1)) as f32
    }
}

/// Prefix sums Φ_t = Σ_{i≤t} e_i.
pub fn accumulate(evidence: &[f32]) -> AccumulatorTrace {
    let mut cumulative = Vec::with_capacity(evidence.len());
    let mut acc = 0.0f64;
    for e in evidence {
        acc += *e as f64;
        cumulative.push(acc);
    }
    AccumulatorTrace {
        evidence: evidence.to_vec(),
        cumulative,
    }
}

/// Outcome of thresholding one accumulator trace.
#[derive(Debug, Clone)]
pub struct Decision {
    /// Stopping step in 1..=N (N when censored).
    pub tau: usize,
    pub crossed: bool,
    /// Filled by [`readout`].
    pub choice: Option<usize>,
    pub rt_ms: f32,
}

impl Decision {
    pub fn choice_or_err(&self) -> Result<usize, RtifyError> {
        self.choice.ok_or(RtifyError::NoChoice)
    }
}

/// τ = first t with Φ_t strictly above θ; censored at N otherwise.
pub fn stopping_time(trace: &AccumulatorTrace, theta: f32, timing: &RtTiming) -> Decision {
    let n = trace.len();
    debug_assert!(n >= 1);
    for t in 1..=n {
        if trace.phi(t) > theta as f64 {
            return Decision {
                tau: t,
                crossed: true,
                choice: None,
                rt_ms: timing.rt_ms(t),
            };
        }
    }
    Decision {
        tau: n,
        crossed: false,
        choice: None,
        rt_ms: timing.rt_ms(n),
    }
}

/// Single-step evidence `e = f_w(h)`.
pub fn evidence_map(params: &RtifyParams, h: &[f32]) -> Result<f32, RtifyError> {
    let k = params.input_dim();
    if h.len() != k {
        return Err(RtifyError::Dim(format!(
            "hidden state has {} entries, evidence map expects {k}",
            h.len()
        )));
    }
    let hdim = params.hidden_dim();
    let mut a = matmul(h, params.w1.data(), 1, k, hdim);
    for (j, v) in a.iter_mut().enumerate() {
        *v = (*v + params.b1.data()[j]).tanh();
    }
    let out = matmul(&a, params.w2.data(), 1, hdim, 1);
    Ok(out[0] + params.b2.data()[0])
}

/// Per-step evidence for a whole trial.
pub fn evidence_series(params: &RtifyParams, trace: &HiddenTrace) -> Result<Vec<f32>, RtifyError> {
    let k = params.input_dim();
    if trace.hidden_dim != k {
        return Err(RtifyError::Dim(format!(
            "trace hidden dim {} vs evidence map input {k}",
            trace.hidden_dim
        )));
    }
    let n = trace.n_steps;
    let hdim = params.hidden_dim();
    let mut a = matmul(&trace.hidden, params.w1.data(), n, k, hdim);
    for (i, v) in a.iter_mut().enumerate() {
        *v = (*v + params.b1.data()[i % hdim]).tanh();
    }
    let mut out = matmul(&a, params.w2.data(), n, hdim, 1);
    for v in out.iter_mut() {
        *v += params.b2.data()[0];
    }
    Ok(out)
}

/// Which logits feed the classification readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutPolicy {
    /// Softmax of the summed logits up to and including τ.
    SumToTau,
    /// Softmax of the logits at τ only.
    AtTau,
}

impl ReadoutPolicy {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "sum-to-tau" => Some(ReadoutPolicy::SumToTau),
            "at-tau" => Some(ReadoutPolicy::AtTau),
            _ => None,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            ReadoutPolicy::SumToTau => "sum-to-tau",
            ReadoutPolicy::AtTau => "at-tau",
        }
    }
}

/// Readout logits for a decision under a policy (pre-softmax).
pub fn readout_logits(trace: &HiddenTrace, decision: &Decision, policy: ReadoutPolicy) -> Vec<f32> {
    let c = trace.n_classes;
    let tau = decision.tau.min(trace.n_steps);
    match policy {
        ReadoutPolicy::SumToTau => {
            let mut acc = vec![0.0f32; c];
            for t in 0..tau {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += trace.logits_at(t)[j];
                }
            }
            acc
        }
        ReadoutPolicy::AtTau => trace.logits_at(tau - 1).to_vec(),
    }
}

/// Class probabilities and choice at the decision point.
pub fn readout(
    trace: &HiddenTrace,
    decision: &Decision,
    policy: ReadoutPolicy,
) -> (Vec<f32>, usize) {
    let logits = readout_logits(trace, decision, policy);
    let probs = rowwise_softmax(&logits, logits.len());
    let choice = argmax(&logits);
    (probs, choice)
}

/// Convenience: threshold a trace and fill in the readout choice.
pub fn decide(
    trace: &AccumulatorTrace,
    hidden: &HiddenTrace,
    theta: f32,
    timing: &RtTiming,
    policy: ReadoutPolicy,
) -> Decision {
    let mut d = stopping_time(trace, theta, timing);
    let (_, choice) = readout(hidden, &d, policy);
    d.choice = Some(choice);
    d
}

/// Sign-preserving denominator guard: ê = sign(e)·max(|e|, eps).
pub fn guarded_increment(e_tau: f32, eps_den: f32) -> f32 {
    let sign = if e_tau < 0.0 { -1.0 } else { 1.0 };
    sign * e_tau.abs().max(eps_den)
}

/// Installs the stopping-time surrogate on the tape.
///
/// The node's forward value is the exact integer τ; its backward multiplies
/// the upstream gradient by −1/ê toward `phi_tau` and +1/ê toward `theta`.
/// Callers must only create this node for crossed decisions; censored
/// trials contribute no gradient by construction.
pub fn surrogate_node(
    tape: &mut Tape,
    phi_tau: Var,
    theta: Var,
    tau: usize,
    e_tau: f32,
    eps_den: f32,
) -> Result<Var, RtifyError> {
    let denom = guarded_increment(e_tau, eps_den);
    let inv = 1.0 / denom;
    let node = tape.custom(
        &[phi_tau, theta],
        Array::scalar(tau as f32),
        Box::new(move |up| {
            let g = up.item();
            vec![Array::scalar(-g * inv), Array::scalar(g * inv)]
        }),
    )?;
    Ok(node)
}

/// Tape leaves for the evidence head and threshold.
pub struct RtifyLeaves {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub theta: Var,
}

pub fn insert_leaves(tape: &mut Tape, p: &RtifyParams, trainable: bool) -> RtifyLeaves {
    RtifyLeaves {
        w1: tape.leaf(p.w1.clone(), trainable),
        b1: tape.leaf(p.b1.clone(), trainable),
        w2: tape.leaf(p.w2.clone(), trainable),
        b2: tape.leaf(p.b2.clone(), trainable),
        theta: tape.leaf(p.theta.clone(), trainable),
    }
}

/// Evidence for `rows` stacked hidden states (rows × k) as a flat 1-D var.
pub fn evidence_on_tape(
    tape: &mut Tape,
    leaves: &RtifyLeaves,
    hidden: Var,
    rows: usize,
) -> Result<Var, DiffError> {
    let pre = tape.matmul(hidden, leaves.w1)?;
    let b1_tile = tape.tile(leaves.b1, rows)?;
    let pre = tape.add(pre, b1_tile)?;
    let act = tape.tanh(pre)?;
    let out = tape.matmul(act, leaves.w2)?;
    let b2_tile = tape.tile(leaves.b2, rows)?;
    let out = tape.add(out, b2_tile)?;
    tape.slice(out, 0, rows, vec![rows])
}

/// θ warm start: 0.75 × median of Φ_N over the given traces.
pub fn init_theta(params: &mut RtifyParams, traces: &[&HiddenTrace]) -> Result<(), RtifyError> {
    let mut finals = Vec::with_capacity(traces.len());
    for t in traces {
        let e = evidence_series(params, t)?;
        finals.push(accumulate(&e).phi_final());
    }
    finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if finals.is_empty() {
        0.0
    } else {
        finals[finals.len() / 2]
    };
    params.theta = Array::scalar((0.75 * median) as f32);
    Ok(())
}
