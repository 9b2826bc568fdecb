//! Adam optimizer with bias correction and optional global-norm clipping.

use super::array::Array;
use super::DiffError;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Clip the global L2 norm of the full gradient before the update.
    pub clip_norm: Option<f32>,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

struct Slot {
    name: String,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-parameter first/second moment state plus a step counter.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        if cfg.lr <= 0.0 {
            panic!("Adam learning rate must be positive, got {}", cfg.lr);
        }
        Adam {
            cfg,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    /// One bias-corrected update over named parameter/gradient pairs.
    ///
    /// The parameter list (names, order and shapes) must be identical on
    /// every call; moment slots are allocated on the first one. A non-finite
    /// gradient aborts with a diagnostic naming the offending leaf.
    pub fn step(&mut self, params: &mut [(&str, &mut Array)], grads: &[&Array]) -> Result<(), DiffError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.slots.is_empty() {
            for (name, p) in params.iter() {
                self.slots.push(Slot {
                    name: (*name).to_string(),
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                });
            }
        }
        assert_eq!(self.slots.len(), params.len(), "parameter set changed");

        for ((name, p), g) in params.iter().zip(grads) {
            let slot = self
                .slots
                .iter()
                .find(|s| s.name == *name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"));
            assert_eq!(slot.m.len(), p.numel(), "shape changed for {name}");
            assert_eq!(p.numel(), g.numel(), "gradient shape mismatch for {name}");
            for (i, gv) in g.data().iter().enumerate() {
                if !gv.is_finite() {
                    return Err(DiffError::NonFiniteGrad {
                        param: (*name).to_string(),
                        index: i,
                        value: *gv,
                    });
                }
            }
        }

        let clip_scale = match self.cfg.clip_norm {
            Some(max_norm) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| (*x as f64) * (*x as f64))
                    .sum();
                let norm = sq.sqrt() as f32;
                if norm > max_norm && norm > 0.0 {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - (b1 as f64).powf(t);
        let bc2 = 1.0 - (b2 as f64).powf(t);

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let slot = &mut self.slots[i];
            let g = grads[i].data();
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g[j] * clip_scale;
                slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * gj;
                slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * gj * gj;
                let m_hat = slot.m[j] as f64 / bc1;
                let v_hat = slot.v[j] as f64 / bc2;
                data[j] -= (self.cfg.lr as f64 * m_hat / (v_hat.sqrt() + self.cfg.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let mut w = Array::from_vec(vec![1.0, -2.0]);
        let g = Array::from_vec(vec![0.0, 0.0]);
        for _ in 0..5 {
            adam.step(&mut [("w", &mut w)], &[&g]).unwrap();
        }
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // with constant gradient g, the bias-corrected first update is
        // -lr * g / (|g| + eps), i.e. magnitude ~ lr
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        let mut w = Array::from_vec(vec![0.0]);
        let g = Array::from_vec(vec![3.7]);
        adam.step(&mut [("w", &mut w)], &[&g]).unwrap();
        assert!((w.data()[0] + 0.05).abs() < 1e-4, "got {}", w.data()[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // 100 steps on f(w) = (w-3)^2 from w=0 with lr=0.1
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let mut w = Array::from_vec(vec![0.0]);
        for _ in 0..100 {
            let g = Array::from_vec(vec![2.0 * (w.data()[0] - 3.0)]);
            adam.step(&mut [("w", &mut w)], &[&g]).unwrap();
        }
        assert!(
            (w.data()[0] - 3.0).abs() < 0.1,
            "w = {} after 100 steps",
            w.data()[0]
        );
    }

    #[test]
    fn non_finite_gradient_names_the_leaf() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let mut w = Array::from_vec(vec![1.0]);
        let g = Array::raw(vec![1], vec![f32::NAN]);
        let err = adam.step(&mut [("theta", &mut w)], &[&g]).unwrap_err();
        match err {
            DiffError::NonFiniteGrad { param, .. } => assert_eq!(param, "theta"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let cfg = AdamConfig {
            lr: 1.0,
            clip_norm: Some(1e-6),
            ..Default::default()
        };
        let mut adam = Adam::new(cfg);
        let mut w = Array::from_vec(vec![0.0, 0.0]);
        let g = Array::from_vec(vec![100.0, -50.0]);
        adam.step(&mut [("w", &mut w)], &[&g]).unwrap();
        // direction is preserved by sign, magnitude bounded by lr
        assert!(w.data()[0] < 0.0 && w.data()[1] > 0.0);
        for v in w.data() {
            assert!(v.abs() <= 1.0 + 1e-6);
        }
    }
}
