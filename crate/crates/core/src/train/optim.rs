//! Decoupled weight-decay Adam and the warmup/cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numkit::{GradMap, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators keyed by parameter name; update order is
/// the caller's parameter order (fixed by the models' `params_mut`).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-decay update with bias correction:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + λ·p)`.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &GradMap,
        lr: f64,
    ) -> Result<(), TrainError> {
        if lr < 0.0 {
            return Err(TrainError::Config(format!("negative learning rate {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (name, p) in params {
            let g = grads
                .get(p)
                .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NaNGradient(name));
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            *p = p.with_data(data)?;
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing (`<param>.m`, `<param>.v`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((
                format!("{name}.m"),
                Tensor::new(&[m.len()], m.clone()).expect("moments are finite"),
            ));
            out.push((
                format!("{name}.v"),
                Tensor::new(&[v.len()], v.clone()).expect("moments are finite"),
            ));
        }
        out
    }

    pub fn restore(
        config: AdamWConfig,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Self {
        let mut moments = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(base) = name.strip_suffix(".m") {
                let v_name = format!("{base}.v");
                if let Some(v) = tensors.get(&v_name) {
                    moments.insert(base.to_string(), (t.data().to_vec(), v.data().to_vec()));
                }
            }
        }
        Self {
            config,
            moments,
            step,
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub base_lr: f64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_ratio * self.total_steps as f64).round() as u64).max(1)
    }

    /// lr at a 0-based step: `(step+1)/W · base` through warmup, then
    /// `base · ½(1 + cos(π·progress))`, reaching 0 at `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.base_lr * (step + 1) as f64 / w as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - w).max(1) as f64;
        let progress = (step - w) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tape;
    use proptest::prelude::*;

    fn sgd_free_update(p0: f64, g: f64, lr: f64, cfg: AdamWConfig) -> f64 {
        // hand-rolled single Adam step, written independently of the impl
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        p0 - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p0)
    }

    fn grads_for(p: &Tensor, g: f64) -> GradMap {
        let mut tape = Tape::new();
        let v = tape.leaf(p);
        let s = tape.sum_all(v).unwrap();
        let scaled = tape.scale(s, g).unwrap();
        tape.backward(scaled).unwrap()
    }

    #[test]
    fn zero_gradient_and_zero_decay_leaves_parameters_unchanged() {
        let mut p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let grads = grads_for(&p, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(vec![("p".into(), &mut p)], &grads, 0.1).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::param(&[1], vec![1.0]).unwrap();
        let grads = grads_for(&p, 1.0);
        let mut opt = AdamW::new(cfg);
        opt.step(vec![("p".into(), &mut p)], &grads, 0.1).unwrap();
        let want = sgd_free_update(1.0, 1.0, 0.1, cfg);
        assert!((p.data()[0] - want).abs() < 1e-15, "{} vs {want}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_multiplicative_shrink() {
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::param(&[2], vec![2.0, -4.0]).unwrap();
        let grads = grads_for(&p, 0.0);
        let mut opt = AdamW::new(cfg);
        let lr = 0.1;
        opt.step(vec![("p".into(), &mut p)], &grads, lr).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - lr * 0.05));
        assert_eq!(p.data()[1], -4.0 * (1.0 - lr * 0.05));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let cfg = AdamWConfig::default();
        let mut p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(cfg);
        for _ in 0..3 {
            let grads = grads_for(&p, 0.7);
            opt.step(vec![("p".into(), &mut p)], &grads, 0.05).unwrap();
        }
        let state: BTreeMap<String, Tensor> = opt.state_tensors().into_iter().collect();
        let restored = AdamW::restore(cfg, opt.step_count(), &state);

        let mut pa = p.clone();
        let mut pb = p.clone();
        let mut oa = opt.clone();
        let mut ob = restored;
        let ga = grads_for(&pa, -0.3);
        let gb = grads_for(&pb, -0.3);
        oa.step(vec![("p".into(), &mut pa)], &ga, 0.05).unwrap();
        ob.step(vec![("p".into(), &mut pb)], &gb, 0.05).unwrap();
        assert!(pa.bit_eq(&pb));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// continuous, peaks at base_lr at warmup end, non-increasing after
        #[test]
        fn schedule_shape_holds(total in 10u64..500, ratio in 0.01f64..0.5, base in 1e-5f64..1.0) {
            let s = Schedule { warmup_ratio: ratio, total_steps: total, base_lr: base };
            let w = s.warmup_steps();
            prop_assert!(s.lr(w.saturating_sub(1)) <= base * (1.0 + 1e-12));
            prop_assert!((s.lr(w.saturating_sub(1)) - base).abs() < 1e-12);
            prop_assert!((s.lr(w) - base).abs() / base < 0.2); // continuity at the joint
            let mut prev = s.lr(w);
            for step in w + 1..total {
                let cur = s.lr(step);
                prop_assert!(cur <= prev + 1e-15);
                prop_assert!(cur >= 0.0);
                prev = cur;
            }
            for step in 0..w {
                prop_assert!((s.lr(step) - base * (step + 1) as f64 / w as f64).abs() < 1e-15);
            }
            prop_assert!(s.lr(total) == 0.0);
        }
    }
}
