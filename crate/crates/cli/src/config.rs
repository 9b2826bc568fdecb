//! Experiment configuration: a TOML file with one section per subsystem.
//! Unknown keys are rejected; the master seed is mandatory; a short hash of
//! the effective config is embedded in every output file.

use rtify_core::backbone::{LogitPool, TrainSchedule};
use rtify_core::fitting::{FitRtConfig, SelfPenaltyConfig};
use rtify_core::objectives::HistogramSpec;
use rtify_core::reference::DdmParams;
use rtify_core::rtify::{ReadoutPolicy, RtTiming};
use rtify_core::stimuli::{Direction, RdmConfig};
use rtify_core::wongwang::{WwFitConfig, WwParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(s) => write!(f, "config i/o: {s}"),
            ConfigError::Parse(s) => write!(f, "config parse: {s}"),
            ConfigError::Invalid(s) => write!(f, "invalid config: {s}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn default_workers() -> usize {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Mandatory; every derived RNG stream fans out from this.
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StimuliSection {
    pub n_dots: usize,
    pub coherences: Vec<f32>,
    pub directions_deg: Vec<f32>,
    pub n_frames: usize,
    pub frame_rate_hz: f32,
    pub field_size: f32,
    pub dot_step: f32,
    pub trials_per_config_train: usize,
    pub trials_per_config_eval: usize,
    pub trials_per_config_warmup: usize,
    pub warmup_coherence: f32,
}

impl Default for StimuliSection {
    fn default() -> Self {
        StimuliSection {
            n_dots: 100,
            coherences: rtify_core::stimuli::CANONICAL_COHERENCES.to_vec(),
            directions_deg: vec![0.0, 180.0],
            n_frames: 150,
            frame_rate_hz: 75.0,
            field_size: 64.0,
            dot_step: 3.0,
            trials_per_config_train: 50,
            trials_per_config_eval: 50,
            trials_per_config_warmup: 50,
            warmup_coherence: 0.999,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub hidden: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f32,
    pub post_warmup_lr: f32,
    pub batch_size: usize,
    /// "mean" or "final" per-step logit pooling for pre-training.
    pub pool: String,
    /// 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            hidden: 64,
            epochs: 100,
            warmup_epochs: 10,
            lr: 1e-3,
            post_warmup_lr: 3e-4,
            batch_size: 64,
            pool: "mean".into(),
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtifySection {
    pub hidden: usize,
    /// "sum-to-tau" or "at-tau".
    pub policy: String,
    pub eps_den: f32,
    pub t0_ms: f32,
    pub epochs: usize,
    pub lr: f32,
    pub censored_penalty: bool,
    pub censored_penalty_weight: f32,
    pub selfpenalty_epochs: usize,
    pub selfpenalty_lr: f32,
    pub grad_clip: f32,
}

impl Default for RtifySection {
    fn default() -> Self {
        RtifySection {
            hidden: 64,
            policy: "sum-to-tau".into(),
            eps_den: 1e-3,
            t0_ms: 0.0,
            epochs: 300,
            lr: 0.01,
            censored_penalty: true,
            censored_penalty_weight: 1e-3,
            selfpenalty_epochs: 300,
            selfpenalty_lr: 0.01,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesSection {
    pub hist_min_ms: f32,
    pub hist_max_ms: f32,
    pub bins: usize,
    pub bandwidth_ms: f32,
    /// Self-penalty strength λ.
    pub lambda: f32,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        ObjectivesSection {
            hist_min_ms: -2000.0,
            hist_max_ms: 2000.0,
            bins: 50,
            bandwidth_ms: 40.0,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WongwangSection {
    pub a: f32,
    pub b: f32,
    pub d: f32,
    pub gamma: f32,
    pub tau_s_ms: f32,
    pub j_self: f32,
    pub j_inh: f32,
    pub j_in: f32,
    pub i0: f32,
    pub sigma_noise: f32,
    pub theta: f32,
    pub dt_ms: f32,
    pub hard_transfer: bool,
    pub max_steps: usize,
    pub t0_ms: f32,
    pub s_init: f32,
    pub epochs: usize,
    pub lr: f32,
    pub grad_clip: f32,
}

impl Default for WongwangSection {
    fn default() -> Self {
        let p = WwParams::defaults(2);
        WongwangSection {
            a: p.a,
            b: p.b,
            d: p.d,
            gamma: p.gamma,
            tau_s_ms: p.tau_s_ms,
            j_self: p.j_self,
            j_inh: p.j_inh,
            j_in: p.j_in,
            i0: p.i0,
            sigma_noise: p.sigma_noise,
            theta: p.theta,
            dt_ms: p.dt_ms,
            hard_transfer: p.hard_transfer,
            max_steps: 2000,
            t0_ms: 0.0,
            s_init: rtify_core::wongwang::DEFAULT_S_INIT,
            epochs: 200,
            lr: 0.01,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub ddm_drift_per_s: f64,
    pub ddm_threshold: f64,
    pub ddm_noise: f64,
    pub ddm_t0_ms: f64,
    pub ddm_dt_ms: f64,
    pub censor_ms: f64,
    pub trials_per_condition: usize,
    pub entropy_grid: usize,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            ddm_drift_per_s: 30.0,
            ddm_threshold: 1.0,
            ddm_noise: 1.0,
            ddm_t0_ms: 250.0,
            ddm_dt_ms: 1.0,
            censor_ms: 2000.0,
            trials_per_condition: 2000,
            entropy_grid: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub stimuli: StimuliSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub rtify: RtifySection,
    #[serde(default)]
    pub objectives: ObjectivesSection,
    #[serde(default)]
    pub wongwang: WongwangSection,
    #[serde(default)]
    pub reference: ReferenceSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(seed) = seed_override {
            cfg.run.master_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.stimuli;
        for c in &s.coherences {
            if !(0.0..=1.0).contains(c) {
                return Err(ConfigError::Invalid(format!("coherence {c} outside [0,1]")));
            }
        }
        if s.coherences.is_empty() || s.directions_deg.is_empty() {
            return Err(ConfigError::Invalid(
                "need at least one coherence and one direction".into(),
            ));
        }
        if self.pool().is_none() {
            return Err(ConfigError::Invalid(format!(
                "backbone.pool must be \"mean\" or \"final\", got {:?}",
                self.backbone.pool
            )));
        }
        if self.policy().is_none() {
            return Err(ConfigError::Invalid(format!(
                "rtify.policy must be \"sum-to-tau\" or \"at-tau\", got {:?}",
                self.rtify.policy
            )));
        }
        if self.objectives.hist_max_ms <= self.objectives.hist_min_ms
            || self.objectives.bins == 0
            || self.objectives.bandwidth_ms <= 0.0
        {
            return Err(ConfigError::Invalid("bad histogram section".into()));
        }
        self.ww_params(2)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Short hash of the effective (post-override) configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn pool(&self) -> Option<LogitPool> {
        match self.backbone.pool.as_str() {
            "mean" => Some(LogitPool::Mean),
            "final" => Some(LogitPool::Final),
            _ => None,
        }
    }

    pub fn policy(&self) -> Option<ReadoutPolicy> {
        ReadoutPolicy::parse(&self.rtify.policy)
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.stimuli
            .directions_deg
            .iter()
            .map(|d| Direction::from_degrees(*d))
            .collect()
    }

    pub fn base_rdm(&self) -> RdmConfig {
        RdmConfig {
            n_dots: self.stimuli.n_dots,
            coherence: 0.5,
            direction: Direction::RIGHT,
            n_frames: self.stimuli.n_frames,
            frame_rate_hz: self.stimuli.frame_rate_hz,
            field_size: self.stimuli.field_size,
            dot_step: self.stimuli.dot_step,
            seed: 0,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.backbone.epochs,
            warmup_epochs: self.backbone.warmup_epochs,
            lr: self.backbone.lr,
            post_warmup_lr: self.backbone.post_warmup_lr,
            batch_size: self.backbone.batch_size,
            pool: self.pool().expect("validated"),
            grad_clip: clip_option(self.backbone.grad_clip),
            seed: self.run.master_seed,
        }
    }

    pub fn histogram_spec(&self) -> HistogramSpec {
        HistogramSpec {
            min_ms: self.objectives.hist_min_ms,
            max_ms: self.objectives.hist_max_ms,
            bins: self.objectives.bins,
            bandwidth_ms: self.objectives.bandwidth_ms,
        }
    }

    pub fn timing(&self) -> RtTiming {
        RtTiming::from_frame_rate(self.stimuli.frame_rate_hz, self.rtify.t0_ms)
    }

    pub fn fit_rt_config(&self, mode: rtify_core::fitting::FitMode) -> FitRtConfig {
        FitRtConfig {
            epochs: self.rtify.epochs,
            lr: self.rtify.lr,
            mode,
            policy: self.policy().expect("validated"),
            eps_den: self.rtify.eps_den,
            censored_penalty: self.rtify.censored_penalty,
            censored_penalty_weight: self.rtify.censored_penalty_weight,
            grad_clip: clip_option(self.rtify.grad_clip),
            init_theta: true,
        }
    }

    pub fn self_penalty_config(&self, lambda: Option<f32>) -> SelfPenaltyConfig {
        SelfPenaltyConfig {
            epochs: self.rtify.selfpenalty_epochs,
            lr: self.rtify.selfpenalty_lr,
            lambda: lambda.unwrap_or(self.objectives.lambda),
            policy: self.policy().expect("validated"),
            eps_den: self.rtify.eps_den,
            grad_clip: clip_option(self.rtify.grad_clip),
            init_theta: true,
        }
    }

    pub fn ww_params(&self, classes: usize) -> WwParams {
        let w = &self.wongwang;
        WwParams {
            m: classes,
            a: w.a,
            b: w.b,
            d: w.d,
            gamma: w.gamma,
            tau_s_ms: w.tau_s_ms,
            j_self: w.j_self,
            j_inh: w.j_inh,
            j_in: w.j_in,
            i0: w.i0,
            sigma_noise: w.sigma_noise,
            theta: w.theta,
            dt_ms: w.dt_ms,
            hard_transfer: w.hard_transfer,
        }
    }

    pub fn ww_fit_config(&self) -> WwFitConfig {
        let w = &self.wongwang;
        WwFitConfig {
            epochs: w.epochs,
            lr: w.lr,
            max_steps: w.max_steps,
            eps_den: self.rtify.eps_den,
            seed: self.run.master_seed,
            grad_clip: clip_option(w.grad_clip),
            censored_penalty: true,
            t0_ms: w.t0_ms,
            s_init: w.s_init,
        }
    }

    pub fn ddm_params(&self) -> DdmParams {
        let r = &self.reference;
        DdmParams {
            drift_per_s: r.ddm_drift_per_s,
            threshold: r.ddm_threshold,
            noise: r.ddm_noise,
            t0_ms: r.ddm_t0_ms,
            dt_ms: r.ddm_dt_ms,
            censor_ms: r.censor_ms,
        }
    }
}

fn clip_option(v: f32) -> Option<f32> {
    if v > 0.0 {
        Some(v)
    } else {
        None
    }
}

/// A fully documented default configuration, suitable for `--help`-free
/// onboarding: `rtify print-config > experiment.toml`.
pub const CONFIG_TEMPLATE: &str = r#"# rtify experiment configuration.
# Every value below is the documented default except run.master_seed,
# which is mandatory and has no default.

[run]
master_seed = 0     # REQUIRED: seeds every derived stream; set your own
workers = 0         # rayon threads; 0 = all cores

[stimuli]
n_dots = 100
coherences = [0.008, 0.016, 0.032, 0.064, 0.128, 0.256, 0.512]
directions_deg = [0.0, 180.0]   # rightward, leftward; labels in this order
n_frames = 150                  # steps per trial (75 Hz x 2 s)
frame_rate_hz = 75.0
field_size = 64.0               # pixels, toroidal wrap
dot_step = 3.0                  # pixels per frame
trials_per_config_train = 50    # per (coherence x direction) pair
trials_per_config_eval = 50
trials_per_config_warmup = 50
warmup_coherence = 0.999

[backbone]
hidden = 64
epochs = 100
warmup_epochs = 10         # full-coherence warm-up epochs at `lr`
lr = 0.001
post_warmup_lr = 0.0003
batch_size = 64
pool = "mean"              # pre-training readout: "mean" | "final"
grad_clip = 0.0            # global-norm clip; 0 disables

[rtify]
hidden = 64                # evidence-map hidden width
policy = "sum-to-tau"      # readout: "sum-to-tau" | "at-tau"
eps_den = 0.001            # surrogate denominator guard
t0_ms = 0.0                # non-decision offset added to model RTs
epochs = 300               # supervised fit epochs
lr = 0.01
censored_penalty = true    # (theta - Phi_N)+ pull-in on censored trials
censored_penalty_weight = 0.001
selfpenalty_epochs = 300
selfpenalty_lr = 0.01
grad_clip = 0.0

[objectives]
hist_min_ms = -2000.0      # signed-RT histogram range
hist_max_ms = 2000.0
bins = 50
bandwidth_ms = 40.0        # Gaussian soft-assignment kernel
lambda = 0.001             # self-penalty strength

[wongwang]
# initialization values; everything except dt_ms is trainable
a = 270.0
b = 108.0
d = 0.154
gamma = 0.641
tau_s_ms = 100.0
j_self = 0.2609
j_inh = 0.0497
j_in = 0.04
i0 = 0.378
sigma_noise = 0.025
theta = 0.7
dt_ms = 1.0
hard_transfer = true       # verbatim max(ax-b,0) numerator; false = continuous
max_steps = 2000
t0_ms = 0.0
s_init = 0.06
epochs = 200
lr = 0.01
grad_clip = 0.0

[reference]
ddm_drift_per_s = 30.0     # drift = this x coherence
ddm_threshold = 1.0
ddm_noise = 1.0
ddm_t0_ms = 250.0
ddm_dt_ms = 1.0
censor_ms = 2000.0
trials_per_condition = 2000
entropy_grid = 200         # log-spaced thresholds in (0, ln C]
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_and_roundtrips() {
        let cfg: ExperimentConfig = toml::from_str(CONFIG_TEMPLATE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.master_seed, 0);
        assert_eq!(cfg.stimuli.coherences.len(), 7);
        // hash is stable
        assert_eq!(cfg.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = "[run]\nmaster_seed = 1\nnot_a_key = 2\n";
        assert!(toml::from_str::<ExperimentConfig>(bad).is_err());
        let bad2 = "[run]\nmaster_seed = 1\n[stimuli]\nwhatever = 3\n";
        assert!(toml::from_str::<ExperimentConfig>(bad2).is_err());
    }

    #[test]
    fn master_seed_is_mandatory() {
        assert!(toml::from_str::<ExperimentConfig>("[stimuli]\nn_dots = 5\n").is_err());
    }

    #[test]
    fn seed_override_changes_hash() {
        let a: ExperimentConfig = toml::from_str("[run]\nmaster_seed = 1\n").unwrap();
        let mut b = a.clone();
        b.run.master_seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
