//! Adam optimizer and the step-decay learning-rate schedule.

use std::collections::HashMap;

use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name; a
/// parameter that receives no gradient in a step is left untouched.
pub struct Adam {
    cfg: AdamConfig,
    steps: HashMap<String, u64>,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            steps: HashMap::new(),
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// an entry in `grads`. Non-finite gradients abort with the offending
    /// parameter named.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Array2<f64>>,
        lr: f64,
    ) -> Result<()> {
        // Deterministic order: walk the store, not the gradient map.
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {:?} is not finite",
                    name
                )));
            }
            let p = params.get_mut(&name).expect("name from store");
            assert_eq!(g.dim(), p.value.dim(), "gradient shape for {:?}", name);
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let t = *t;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g
            });
            let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
            let eps = self.cfg.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Step decay: `base_lr · 0.7^⌊epoch / 15⌋`.
pub fn lr_schedule(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.7f64.powi((epoch / 15) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Param;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_for_unit_gradient() {
        // With bias correction, step 1 is exactly lr · g/|g| for a constant
        // gradient (up to eps).
        let mut store = ParamStore::new();
        store.insert("p", Param::new(vec![1], array![[1.0]]));
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), array![[4.0]]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        let v = store.get("p").unwrap().value[[0, 0]];
        assert!((v - (1.0 - 0.1)).abs() < 1e-6, "got {}", v);
    }

    #[test]
    fn closed_form_two_steps() {
        // Hand-rolled Adam for two steps with g = [1, then 2].
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x: f64 = 0.3;
        for (t, g) in [(1, 1.0f64), (2, 2.0f64)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1f(t, b1));
            let vh = v / (1.0 - b1f(t, b2));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        fn b1f(t: u64, b: f64) -> f64 {
            b.powi(t as i32)
        }

        let mut store = ParamStore::new();
        store.insert("p", Param::new(vec![1], array![[0.3]]));
        let mut opt = Adam::new(AdamConfig {
            beta1: b1,
            beta2: b2,
            eps,
        });
        for g in [1.0, 2.0] {
            let mut grads = HashMap::new();
            grads.insert("p".to_string(), array![[g]]);
            opt.step(&mut store, &grads, lr).unwrap();
        }
        let got = store.get("p").unwrap().value[[0, 0]];
        assert!((got - x).abs() < 1e-12, "got {} want {}", got, x);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("bad.param", Param::new(vec![1], array![[0.0]]));
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = HashMap::new();
        grads.insert("bad.param".to_string(), array![[f64::NAN]]);
        let err = opt.step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("bad.param"));
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut store = ParamStore::new();
        store.insert("p", Param::new(vec![1], array![[1.5]]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &HashMap::new(), 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().value[[0, 0]], 1.5);
    }

    #[test]
    fn schedule_decays_every_15_epochs() {
        assert_eq!(lr_schedule(1e-3, 0), 1e-3);
        assert_eq!(lr_schedule(1e-3, 14), 1e-3);
        assert!((lr_schedule(1e-3, 15) - 0.7e-3).abs() < 1e-12);
        assert!((lr_schedule(1e-3, 45) - 1e-3 * 0.7f64.powi(3)).abs() < 1e-12);
    }
}
