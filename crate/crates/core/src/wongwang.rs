//! Multi-population attractor circuit over a frozen classifier's logits:
//! gating variables S_i integrate a competitive drive until one population
//! crosses a decision threshold. All parameters train through the
//! stopping-time surrogate applied to the crossing statistic max_i S_i.
//!
//! Dynamics per population (time grid in ms, transfer output in Hz):
//!
//!   x_i = J_self·S_i − J_inh·Σ_{j≠i} S_j + J_in·drive_i + I0 + σ·η_i
//!   S_i ← clamp01( S_i + dt·( (1−S_i)·f(x_i)/1000 − S_i/τ_S ) )
//!
//! with f(x) = γ·max(ax−b, 0)/(1−exp(−d(ax−b))). The max(·,0) numerator
//! makes f jump to γ/d at ax−b → 0⁺; a config flag switches to the
//! continuous variant without the clamp.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffcore::{Adam, AdamConfig, Array, DiffError, Tape, Var};
use crate::fitting::FitLog;
use crate::objectives::{
    soft_histogram, taped_histogram_mse, taped_soft_histogram, HistSample, HistogramSpec,
    ObjectiveError,
};
use crate::rtify::{surrogate_node, Decision};
use crate::seed::{derive_seed, TAG_WW_NOISE, TAG_WW_RUN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;
use thiserror::Error;

/// Gating-rate conversion: the transfer function is in Hz, the grid in ms.
const RATE_PER_MS: f32 = 1e-3;
/// Below this |d·(ax−b)| the transfer uses its series expansion.
const SERIES_GUARD: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum WwError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("drive has {got} entries, circuit has {want} populations")]
    DriveDim { got: usize, want: usize },
    #[error("fit diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct WwParams {
    /// Population count (= classes).
    pub m: usize,
    /// Transfer gain, threshold and curvature.
    pub a: f32,
    pub b: f32,
    pub d: f32,
    /// Gating gain (inside the transfer function).
    pub gamma: f32,
    /// Gating time constant, ms.
    pub tau_s_ms: f32,
    pub j_self: f32,
    pub j_inh: f32,
    /// Input scaling applied to the classifier logits.
    pub j_in: f32,
    /// Baseline drive.
    pub i0: f32,
    pub sigma_noise: f32,
    /// Decision threshold on S.
    pub theta: f32,
    /// Integration step, ms. Not trainable.
    pub dt_ms: f32,
    /// Verbatim transfer with the max(·,0) numerator; false selects the
    /// continuous variant.
    pub hard_transfer: bool,
}

impl WwParams {
    /// Standard reduced-model starting basin; everything except `dt_ms` is
    /// trainable from here.
    pub fn defaults(m: usize) -> Self {
        WwParams {
            m,
            a: 270.0,
            b: 108.0,
            d: 0.154,
            gamma: 0.641,
            tau_s_ms: 100.0,
            j_self: 0.2609,
            j_inh: 0.0497,
            j_in: 0.04,
            i0: 0.378,
            sigma_noise: 0.025,
            theta: 0.7,
            dt_ms: 1.0,
            hard_transfer: true,
        }
    }

    pub fn validate(&self) -> Result<(), WwError> {
        if self.m < 2 {
            return Err(WwError::InvalidParams("need at least 2 populations".into()));
        }
        if self.tau_s_ms <= 0.0 || self.dt_ms <= 0.0 {
            return Err(WwError::InvalidParams("tau_s and dt must be positive".into()));
        }
        if self.dt_ms > self.tau_s_ms / 5.0 {
            return Err(WwError::InvalidParams(format!(
                "dt {} must be at most tau_s/5 = {}",
                self.dt_ms,
                self.tau_s_ms / 5.0
            )));
        }
        if !(0.0 < self.theta && self.theta < 1.0) {
            return Err(WwError::InvalidParams(format!(
                "theta must lie in (0,1), got {}",
                self.theta
            )));
        }
        Ok(())
    }

    /// Clamps trainable values back into the region where the invariants
    /// hold; applied after every optimizer step.
    fn project(&mut self) {
        self.tau_s_ms = self.tau_s_ms.max(5.0 * self.dt_ms);
        self.theta = self.theta.clamp(0.01, 0.99);
        self.d = self.d.max(1e-3);
        self.a = self.a.max(1e-3);
        self.gamma = self.gamma.max(1e-4);
        self.sigma_noise = self.sigma_noise.max(0.0);
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("wongwang", seed, config_hash);
        let fields = self.flat();
        ck.push("params", Array::from_vec(fields));
        ck.set_meta("populations", self.m);
        ck.set_meta("dt_ms", self.dt_ms);
        ck.set_meta("hard_transfer", self.hard_transfer as u8);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, WwError> {
        let flat = ck.get("params")?.data().to_vec();
        if flat.len() != 11 {
            return Err(WwError::InvalidParams(format!(
                "expected 11 packed parameters, got {}",
                flat.len()
            )));
        }
        let m: usize = ck
            .meta_value("populations")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| WwError::InvalidParams("missing populations meta".into()))?;
        let dt_ms: f32 = ck
            .meta_value("dt_ms")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| WwError::InvalidParams("missing dt_ms meta".into()))?;
        let hard = ck.meta_value("hard_transfer") != Some("0");
        Ok(WwParams {
            m,
            a: flat[0],
            b: flat[1],
            d: flat[2],
            gamma: flat[3],
            tau_s_ms: flat[4],
            j_self: flat[5],
            j_inh: flat[6],
            j_in: flat[7],
            i0: flat[8],
            sigma_noise: flat[9],
            theta: flat[10],
            dt_ms,
            hard_transfer: hard,
        })
    }

    fn flat(&self) -> Vec<f32> {
        vec![
            self.a,
            self.b,
            self.d,
            self.gamma,
            self.tau_s_ms,
            self.j_self,
            self.j_inh,
            self.j_in,
            self.i0,
            self.sigma_noise,
            self.theta,
        ]
    }
}

/// Population gating variables, clamped to [0,1] after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct WwState {
    pub s: Vec<f32>,
}

impl WwState {
    pub fn uniform(m: usize, value: f32) -> Self {
        WwState {
            s: vec![value.clamp(0.0, 1.0); m],
        }
    }

    pub fn max(&self) -> f32 {
        self.s.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn argmax(&self) -> usize {
        crate::backbone::argmax(&self.s)
    }
}

/// Default resting gating level.
pub const DEFAULT_S_INIT: f32 = 0.06;

// ── Transfer function ────────────────────────────────────────────────

/// f and its partials w.r.t. (x, a, b, d, γ).
fn transfer_with_partials(x: f32, a: f32, b: f32, d: f32, gamma: f32, hard: bool) -> (f32, [f32; 5]) {
    let u = a * x - b;
    if hard && u <= 0.0 {
        return (0.0, [0.0; 5]);
    }
    let v = d * u;
    let (g, dg_du, dg_dd) = if v.abs() < SERIES_GUARD {
        // u/(1−e^{−du}) = 1/d + u/2 + d·u²/12 + O((du)³)
        let g = 1.0 / d + u / 2.0 + d * u * u / 12.0;
        let dg_du = 0.5 + d * u / 6.0;
        let dg_dd = -1.0 / (d * d) + u * u / 12.0;
        (g, dg_du, dg_dd)
    } else {
        let ev = (-v).exp();
        let den = 1.0 - ev;
        let g = u / den;
        let dg_du = (den - u * d * ev) / (den * den);
        let dg_dd = -u * u * ev / (den * den);
        (g, dg_du, dg_dd)
    };
    let f = gamma * g;
    let df_du = gamma * dg_du;
    (
        f,
        [
            df_du * a,        // ∂f/∂x
            df_du * x,        // ∂f/∂a
            -df_du,           // ∂f/∂b
            gamma * dg_dd,    // ∂f/∂d
            g,                // ∂f/∂γ
        ],
    )
}

/// Firing-rate-like transfer f(x) = γ·max(ax−b,0)/(1−exp(−d(ax−b))).
pub fn transfer(x: f32, params: &WwParams) -> f32 {
    transfer_with_partials(x, params.a, params.b, params.d, params.gamma, params.hard_transfer).0
}

// ── Plain (untaped) dynamics ─────────────────────────────────────────

fn drive_sum(s: &[f32]) -> f32 {
    let total: f64 = s.iter().map(|v| *v as f64).sum();
    total as f32
}

/// One Euler step. `noise` must hold one standard-normal draw per
/// population, already scaled by √dt.
pub fn ww_step(state: &WwState, drive: &[f32], params: &WwParams, noise: &[f32]) -> WwState {
    debug_assert_eq!(drive.len(), params.m);
    debug_assert_eq!(noise.len(), params.m);
    let sum_s = drive_sum(&state.s);
    let mut next = Vec::with_capacity(params.m);
    for i in 0..params.m {
        let si = state.s[i];
        let others = sum_s - si;
        let x = (((params.j_self * si - params.j_inh * others) + params.j_in * drive[i])
            + params.i0)
            + params.sigma_noise * noise[i];
        let fx = transfer(x, params);
        let grow = ((1.0 - si) * fx) * RATE_PER_MS;
        let decay = si / params.tau_s_ms;
        let ds = (grow - decay) * params.dt_ms;
        next.push((si + ds).clamp(0.0, 1.0));
    }
    WwState { s: next }
}

/// Input to the circuit: static logits held constant, or a per-frame
/// sequence stepped every `steps_per_frame` integration steps.
#[derive(Debug, Clone)]
pub enum Drive {
    Static(Vec<f32>),
    Sequence {
        frames: Vec<Vec<f32>>,
        steps_per_frame: usize,
    },
}

impl Drive {
    pub fn dim(&self) -> usize {
        match self {
            Drive::Static(v) => v.len(),
            Drive::Sequence { frames, .. } => frames.first().map(|f| f.len()).unwrap_or(0),
        }
    }

    /// Drive at a 0-based integration step; sequences hold their last frame.
    pub fn at_step(&self, step: usize) -> &[f32] {
        match self {
            Drive::Static(v) => v,
            Drive::Sequence {
                frames,
                steps_per_frame,
            } => {
                let spf = (*steps_per_frame).max(1);
                let idx = (step / spf).min(frames.len() - 1);
                &frames[idx]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct WwRun {
    pub decision: Decision,
    /// `S` after every step, row 0 being the initial state.
    pub trajectory: Vec<Vec<f32>>,
}

fn noise_draws(
    sigma: f32,
    m: usize,
    dt_ms: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    // draws are taken regardless of sigma so trajectories with sigma=0
    // share the stream layout of noisy ones
    let scale = dt_ms.sqrt();
    let _ = sigma;
    (0..m)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Iterates the circuit until max_i S_i strictly exceeds θ or the step
/// budget runs out. The decision's RT is `t0 + τ·dt`.
pub fn ww_run(
    params: &WwParams,
    drive: &Drive,
    max_steps: usize,
    seed: u64,
    t0_ms: f32,
    s_init: f32,
) -> Result<WwRun, WwError> {
    params.validate()?;
    if drive.dim() != params.m {
        return Err(WwError::DriveDim {
            got: drive.dim(),
            want: params.m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_WW_RUN, 0));
    let mut state = WwState::uniform(params.m, s_init);
    let mut trajectory = vec![state.s.clone()];
    for step in 1..=max_steps {
        let noise = noise_draws(params.sigma_noise, params.m, params.dt_ms, &mut rng);
        state = ww_step(&state, drive.at_step(step - 1), params, &noise);
        trajectory.push(state.s.clone());
        if state.max() > params.theta {
            return Ok(WwRun {
                decision: Decision {
                    tau: step,
                    crossed: true,
                    choice: Some(state.argmax()),
                    rt_ms: t0_ms + step as f32 * params.dt_ms,
                },
                trajectory,
            });
        }
    }
    Ok(WwRun {
        decision: Decision {
            tau: max_steps,
            crossed: false,
            choice: Some(state.argmax()),
            rt_ms: t0_ms + max_steps as f32 * params.dt_ms,
        },
        trajectory,
    })
}

/// Writes a trajectory as CSV rows `(step, S_1..S_M)`.
pub fn write_trajectory_csv(path: &Path, trajectory: &[Vec<f32>]) -> Result<(), WwError> {
    let err = |detail: String| {
        WwError::InvalidParams(format!("trajectory csv {}: {detail}", path.display()))
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    let m = trajectory.first().map(|r| r.len()).unwrap_or(0);
    let mut header = vec!["step".to_string()];
    for i in 1..=m {
        header.push(format!("s_{i}"));
    }
    w.write_record(&header).map_err(|e| err(e.to_string()))?;
    for (step, row) in trajectory.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))?;
    Ok(())
}

// ── Taped dynamics ───────────────────────────────────────────────────

pub(crate) struct WwLeaves {
    pub a: Var,
    pub b: Var,
    pub d: Var,
    pub gamma: Var,
    pub tau_s: Var,
    pub j_self: Var,
    pub j_inh: Var,
    pub j_in: Var,
    pub i0: Var,
    pub sigma: Var,
    pub theta: Var,
}

pub(crate) fn insert_leaves(tape: &mut Tape, p: &WwParams, trainable: bool) -> WwLeaves {
    let mut leaf = |v: f32| tape.leaf(Array::scalar(v), trainable);
    WwLeaves {
        a: leaf(p.a),
        b: leaf(p.b),
        d: leaf(p.d),
        gamma: leaf(p.gamma),
        tau_s: leaf(p.tau_s_ms),
        j_self: leaf(p.j_self),
        j_inh: leaf(p.j_inh),
        j_in: leaf(p.j_in),
        i0: leaf(p.i0),
        sigma: leaf(p.sigma_noise),
        theta: leaf(p.theta),
    }
}

/// The transfer function as a custom tape node over `[x, a, b, d, γ]`.
fn transfer_on_tape(
    tape: &mut Tape,
    x: Var,
    leaves: &WwLeaves,
    hard: bool,
) -> Result<Var, DiffError> {
    let xv = tape.value(x).data().to_vec();
    let a = tape.value(leaves.a).item();
    let b = tape.value(leaves.b).item();
    let d = tape.value(leaves.d).item();
    let gamma = tape.value(leaves.gamma).item();
    let m = xv.len();

    let mut fwd = Vec::with_capacity(m);
    let mut partials = Vec::with_capacity(m);
    for xi in &xv {
        let (f, p) = transfer_with_partials(*xi, a, b, d, gamma, hard);
        fwd.push(f);
        partials.push(p);
    }
    tape.custom(
        &[x, leaves.a, leaves.b, leaves.d, leaves.gamma],
        Array::from_vec(fwd),
        Box::new(move |up| {
            let u = up.data();
            let mut gx = vec![0.0f32; m];
            let mut ga = 0.0f64;
            let mut gb = 0.0f64;
            let mut gd = 0.0f64;
            let mut gg = 0.0f64;
            for i in 0..m {
                gx[i] = u[i] * partials[i][0];
                ga += (u[i] * partials[i][1]) as f64;
                gb += (u[i] * partials[i][2]) as f64;
                gd += (u[i] * partials[i][3]) as f64;
                gg += (u[i] * partials[i][4]) as f64;
            }
            vec![
                Array::raw(vec![m], gx),
                Array::scalar(ga as f32),
                Array::scalar(gb as f32),
                Array::scalar(gd as f32),
                Array::scalar(gg as f32),
            ]
        }),
    )
}

pub(crate) struct WwTapeRun {
    pub tau: usize,
    pub crossed: bool,
    pub choice: usize,
    /// max_i S_i at the crossing step (crossed runs only).
    pub phi_tau: Option<Var>,
    /// max_i S_i at the final simulated step.
    pub phi_last: Var,
    /// Φ_τ − Φ_{τ−1} of the crossing statistic.
    pub increment: f32,
}

/// Unrolls the dynamics on the tape, mirroring [`ww_step`] arithmetic
/// exactly, and stops recording once the threshold is crossed.
pub(crate) fn run_on_tape(
    tape: &mut Tape,
    leaves: &WwLeaves,
    params: &WwParams,
    drive: &Drive,
    noise: &[Vec<f32>],
    max_steps: usize,
    s_init: f32,
) -> Result<WwTapeRun, WwError> {
    let m = params.m;
    let theta_val = tape.value(leaves.theta).item();
    let ones = tape.constant(Array::filled(vec![m], 1.0));
    let mut s = tape.constant(Array::filled(vec![m], s_init.clamp(0.0, 1.0)));
    let mut prev_max = s_init.clamp(0.0, 1.0);

    for step in 1..=max_steps {
        let drive_leaf = tape.constant(Array::from_vec(drive.at_step(step - 1).to_vec()));
        let noise_leaf = tape.constant(Array::from_vec(noise[step - 1].clone()));

        let sum_s = tape.sum(s)?;
        let bsum = tape.broadcast(sum_s, m)?;
        let others = tape.sub(bsum, s)?;
        let bjself = tape.broadcast(leaves.j_self, m)?;
        let t1 = tape.mul(bjself, s)?;
        let bjinh = tape.broadcast(leaves.j_inh, m)?;
        let t2 = tape.mul(bjinh, others)?;
        let x = tape.sub(t1, t2)?;
        let bjin = tape.broadcast(leaves.j_in, m)?;
        let t3 = tape.mul(bjin, drive_leaf)?;
        let x = tape.add(x, t3)?;
        let bi0 = tape.broadcast(leaves.i0, m)?;
        let x = tape.add(x, bi0)?;
        let bsig = tape.broadcast(leaves.sigma, m)?;
        let nz = tape.mul(bsig, noise_leaf)?;
        let x = tape.add(x, nz)?;

        let fx = transfer_on_tape(tape, x, leaves, params.hard_transfer)?;
        let grow0 = tape.sub(ones, s)?;
        let grow1 = tape.mul(grow0, fx)?;
        let grow = tape.scale(grow1, RATE_PER_MS)?;
        let btau = tape.broadcast(leaves.tau_s, m)?;
        let decay = tape.div(s, btau)?;
        let ds0 = tape.sub(grow, decay)?;
        let ds = tape.scale(ds0, params.dt_ms)?;
        let s_next = tape.add(s, ds)?;
        s = tape.clamp(s_next, 0.0, 1.0)?;

        let s_val = tape.value(s).data();
        let cur_max = s_val.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if cur_max > theta_val {
            let choice = crate::backbone::argmax(s_val);
            let phi_tau = tape.max(s)?;
            return Ok(WwTapeRun {
                tau: step,
                crossed: true,
                choice,
                phi_tau: Some(phi_tau),
                phi_last: phi_tau,
                increment: cur_max - prev_max,
            });
        }
        prev_max = cur_max;
    }

    let s_val = tape.value(s).data().to_vec();
    let choice = crate::backbone::argmax(&s_val);
    let phi_last = tape.max(s)?;
    Ok(WwTapeRun {
        tau: max_steps,
        crossed: false,
        choice,
        phi_tau: None,
        phi_last,
        increment: 0.0,
    })
}

// ── Fitting ──────────────────────────────────────────────────────────

/// One trial for the fit: the frozen classifier's logits plus labels.
#[derive(Debug, Clone)]
pub struct WwTrial {
    pub drive: Vec<f32>,
    pub label: usize,
    pub condition: usize,
}

#[derive(Debug, Clone)]
pub struct WwFitConfig {
    pub epochs: usize,
    pub lr: f32,
    pub max_steps: usize,
    pub eps_den: f32,
    pub seed: u64,
    pub grad_clip: Option<f32>,
    /// Adds (θ − Φ_N)₊ on censored trials so an unreachable threshold still
    /// receives a pull-down signal.
    pub censored_penalty: bool,
    pub t0_ms: f32,
    pub s_init: f32,
}

impl Default for WwFitConfig {
    fn default() -> Self {
        WwFitConfig {
            epochs: 200,
            lr: 0.01,
            max_steps: 500,
            eps_den: 1e-3,
            seed: 0,
            grad_clip: None,
            censored_penalty: true,
            t0_ms: 0.0,
            s_init: DEFAULT_S_INIT,
        }
    }
}

const PARAM_NAMES: [&str; 11] = [
    "a", "b", "d", "gamma", "tau_s", "j_self", "j_inh", "j_in", "i0", "sigma", "theta",
];

/// Fits all circuit parameters to reference signed-RT distributions through
/// the crossing-statistic surrogate. Noise realizations are fixed per epoch
/// (common random numbers), so gradients are pathwise.
pub fn ww_fit(
    trials: &[WwTrial],
    reference: &[Vec<f32>],
    params: &mut WwParams,
    spec: &HistogramSpec,
    cfg: &WwFitConfig,
) -> Result<FitLog, WwError> {
    params.validate()?;
    if trials.is_empty() {
        return Err(WwError::InvalidParams("no trials".into()));
    }
    let n_cond = reference.len();
    let ref_hists: Vec<Option<crate::objectives::SignedRtHistogram>> = reference
        .iter()
        .map(|rts| {
            if rts.is_empty() {
                None
            } else {
                Some(soft_histogram(rts, spec).expect("non-empty reference"))
            }
        })
        .collect();

    let mut adam = Adam::new(AdamConfig {
        lr: if cfg.lr > 0.0 { cfg.lr } else { 1.0 },
        clip_norm: cfg.grad_clip,
        ..Default::default()
    });
    let mut log = FitLog::default();
    let mut best: Option<(f64, WwParams)> = None;

    for epoch in 0..cfg.epochs {
        let snapshot = params.clone();
        match ww_epoch(trials, &ref_hists, n_cond, params, spec, cfg, epoch, &mut adam) {
            Ok(loss) => {
                log.push(epoch, loss);
                if best.as_ref().map(|(b, _)| loss < *b).unwrap_or(true) {
                    best = Some((loss, snapshot));
                }
            }
            Err(e) => {
                if let Some((_, best_params)) = best {
                    *params = best_params;
                }
                return Err(WwError::Diverged {
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn ww_epoch(
    trials: &[WwTrial],
    ref_hists: &[Option<crate::objectives::SignedRtHistogram>],
    n_cond: usize,
    params: &mut WwParams,
    spec: &HistogramSpec,
    cfg: &WwFitConfig,
    epoch: usize,
    adam: &mut Adam,
) -> Result<f64, WwError> {
    let mut tape = Tape::new();
    let leaves = insert_leaves(&mut tape, params, true);
    let mut per_cond: Vec<Vec<HistSample>> = vec![Vec::new(); n_cond];
    let mut penalties: Vec<Var> = Vec::new();

    for (ti, trial) in trials.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            TAG_WW_NOISE,
            (epoch * trials.len() + ti) as u64,
        ));
        let noise: Vec<Vec<f32>> = (0..cfg.max_steps)
            .map(|_| noise_draws(params.sigma_noise, params.m, params.dt_ms, &mut rng))
            .collect();
        let drive = Drive::Static(trial.drive.clone());
        let run = run_on_tape(&mut tape, &leaves, params, &drive, &noise, cfg.max_steps, cfg.s_init)?;
        let correct = run.choice == trial.label;
        if run.crossed {
            let tau_node = surrogate_node(
                &mut tape,
                run.phi_tau.unwrap(),
                leaves.theta,
                run.tau,
                run.increment,
                cfg.eps_den,
            )
            .map_err(|e| WwError::InvalidParams(e.to_string()))?;
            let sign = if correct { 1.0 } else { -1.0 };
            let rt = tape.scale(tau_node, sign * params.dt_ms)?;
            let rt = tape.offset(rt, sign * cfg.t0_ms)?;
            per_cond[trial.condition].push(HistSample::Var(rt));
        } else {
            per_cond[trial.condition].push(HistSample::Const(spec.censored_rt(correct)));
            if cfg.censored_penalty {
                let gap = tape.sub(leaves.theta, run.phi_last)?;
                penalties.push(tape.relu(gap)?);
            }
        }
    }

    let mut cond_losses: Vec<Var> = Vec::new();
    for (cond, samples) in per_cond.iter().enumerate() {
        let reference = match &ref_hists[cond] {
            Some(h) => h,
            None => continue,
        };
        if samples.is_empty() {
            continue;
        }
        let density = taped_soft_histogram(&mut tape, samples, spec)?;
        cond_losses.push(taped_histogram_mse(&mut tape, density, reference)?);
    }
    if cond_losses.is_empty() {
        return Err(WwError::InvalidParams(
            "no condition had both trials and reference data".into(),
        ));
    }
    let stacked = tape.concat(&cond_losses)?;
    let mut loss = tape.mean(stacked)?;
    if !penalties.is_empty() {
        let pen = tape.concat(&penalties)?;
        let pen_sum = tape.sum(pen)?;
        let pen_term = tape.scale(pen_sum, 1e-3 / trials.len() as f32)?;
        loss = tape.add(loss, pen_term)?;
    }

    let loss_val = tape.value(loss).item() as f64;
    if cfg.lr <= 0.0 {
        return Ok(loss_val);
    }

    let grads = tape.backward(loss)?;
    let gs = [
        grads.expect(leaves.a).clone(),
        grads.expect(leaves.b).clone(),
        grads.expect(leaves.d).clone(),
        grads.expect(leaves.gamma).clone(),
        grads.expect(leaves.tau_s).clone(),
        grads.expect(leaves.j_self).clone(),
        grads.expect(leaves.j_inh).clone(),
        grads.expect(leaves.j_in).clone(),
        grads.expect(leaves.i0).clone(),
        grads.expect(leaves.sigma).clone(),
        grads.expect(leaves.theta).clone(),
    ];
    let mut flat = params.flat();
    let mut arrays: Vec<Array> = flat.drain(..).map(Array::scalar).collect();
    {
        let mut named: Vec<(&str, &mut Array)> = PARAM_NAMES
            .iter()
            .zip(arrays.iter_mut())
            .map(|(n, a)| (*n, a))
            .collect();
        let grefs: Vec<&Array> = gs.iter().collect();
        adam.step(&mut named, &grefs)?;
    }
    params.a = arrays[0].item();
    params.b = arrays[1].item();
    params.d = arrays[2].item();
    params.gamma = arrays[3].item();
    params.tau_s_ms = arrays[4].item();
    params.j_self = arrays[5].item();
    params.j_inh = arrays[6].item();
    params.j_in = arrays[7].item();
    params.i0 = arrays[8].item();
    params.sigma_noise = arrays[9].item();
    params.theta = arrays[10].item();
    params.project();
    Ok(loss_val)
}

/// Per-condition signed RTs of the current circuit on a trial set,
/// for evaluation.
pub fn ww_signed_rts(
    trials: &[WwTrial],
    params: &WwParams,
    n_cond: usize,
    spec: &HistogramSpec,
    cfg: &WwFitConfig,
    seed_salt: u64,
) -> Result<Vec<Vec<f32>>, WwError> {
    let mut out = vec![Vec::new(); n_cond];
    for (ti, trial) in trials.iter().enumerate() {
        let run = ww_run(
            params,
            &Drive::Static(trial.drive.clone()),
            cfg.max_steps,
            derive_seed(cfg.seed, TAG_WW_RUN, seed_salt.wrapping_add(ti as u64)),
            cfg.t0_ms,
            cfg.s_init,
        )?;
        let correct = run.decision.choice == Some(trial.label);
        let rt = if run.decision.crossed {
            if correct {
                run.decision.rt_ms
            } else {
                -run.decision.rt_ms
            }
        } else {
            spec.censored_rt(correct)
        };
        out[trial.condition].push(rt);
    }
    Ok(out)
}
