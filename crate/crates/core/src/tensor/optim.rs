use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Rectified Adam: variance-rectified adaptive step, with an
    /// un-adapted momentum step while the rectification term is undefined.
    Radam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lookahead {
    /// Fast steps between slow-weight synchronizations.
    pub k: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead: Option<Lookahead>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, lookahead: None }
    }

    /// RAdam wrapped in Lookahead (k = 6, alpha = 0.5).
    pub fn ranger(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Radam,
            lr,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            lookahead: Some(Lookahead { k: 6, alpha: 0.5 }),
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    slow: Option<Vec<T>>,
}

/// First/second moment state for every trainable entry of one store.
pub struct Optimizer<T: Scalar = f32> {
    config: OptimizerConfig,
    step: u64,
    state: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, step: 0, state: IndexMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry using its accumulated
    /// gradient. Gradients are left in place; clear them with
    /// [`ParamStore::zero_grad`].
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::contract("optimizer_step", format!("parameter `{name}` has no gradient")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        // Rectification factor; None means "use the momentum-only step".
        let rect = match c.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho_t = rho_inf - 2.0 * self.step as f64 * b2.powi(t) / bc2;
                (rho_t > 4.0).then(|| {
                    (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
                })
            }
        };
        let sync = c.lookahead.filter(|la| la.k > 0 && self.step % la.k as u64 == 0);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let g: Vec<T> = p.grad().expect("checked above").to_vec();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                slow: c.lookahead.map(|_| p.data().to_vec()),
            });
            if st.m.len() != g.len() {
                return Err(Error::contract("optimizer_step", format!("parameter `{name}` changed shape")));
            }
            let data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                let m = b1 * st.m[i].as_f64() + (1.0 - b1) * gi;
                let v = b2 * st.v[i].as_f64() + (1.0 - b2) * gi * gi;
                st.m[i] = T::from_f64(m);
                st.v[i] = T::from_f64(v);
                let mhat = m / bc1;
                let upd = match rect {
                    Some(r) => r * mhat / ((v / bc2).sqrt() + c.eps),
                    None => mhat,
                };
                data[i] = T::from_f64(data[i].as_f64() - c.lr * upd);
            }
            if let (Some(la), Some(slow)) = (sync, st.slow.as_mut()) {
                for (s, d) in slow.iter_mut().zip(data.iter_mut()) {
                    let ns = s.as_f64() + la.alpha * (d.as_f64() - s.as_f64());
                    *s = T::from_f64(ns);
                    *d = *s;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_f64(vec![v.len()], v).unwrap());
        s
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut s = store(&[0.0, 0.0]);
        s.get_mut("p").unwrap().accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut cfg = OptimizerConfig::adam(0.1);
        cfg.eps = 1e-12;
        Optimizer::new(cfg).step(&mut s).unwrap();
        let d = s.get("p").unwrap().data();
        assert!((d[0] + 0.1).abs() < 1e-9 && (d[1] - 0.1).abs() < 1e-9, "{d:?}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[0.5, -2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::ranger(0.01));
        for _ in 0..10 {
            s.zero_grad();
            s.get_mut("p").unwrap().accumulate_grad(&[0.0, 0.0]).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get("p").unwrap().data(), &[0.5, -2.0]);
    }

    #[test]
    fn degenerate_lookahead_matches_adam() {
        let run = |la: Option<Lookahead>| {
            let mut s = store(&[1.0, 2.0, -1.0]);
            let mut cfg = OptimizerConfig::adam(0.05);
            cfg.lookahead = la;
            let mut opt = Optimizer::new(cfg);
            for _ in 0..20 {
                s.zero_grad();
                let g: Vec<f64> = s.get("p").unwrap().data().iter().map(|x| 2.0 * x).collect();
                s.get_mut("p").unwrap().accumulate_grad(&g).unwrap();
                opt.step(&mut s).unwrap();
            }
            s.get("p").unwrap().data().to_vec()
        };
        assert_eq!(run(None), run(Some(Lookahead { k: 1, alpha: 1.0 })));
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = store(&[1.0]);
        let err = Optimizer::new(OptimizerConfig::adam(0.1)).step(&mut s).unwrap_err();
        assert!(err.is_contract());
    }

    #[test]
    fn step_counter_increments() {
        let mut s = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::ranger(0.1));
        for i in 1..=7 {
            s.zero_grad();
            s.get_mut("p").unwrap().accumulate_grad(&[0.3]).unwrap();
            opt.step(&mut s).unwrap();
            assert_eq!(opt.steps(), i);
        }
    }

    #[test]
    fn radam_minimizes_quadratic() {
        let mut s = store(&[3.0, -4.0]);
        let mut opt = Optimizer::new(OptimizerConfig::ranger(0.05));
        for _ in 0..3000 {
            s.zero_grad();
            let g: Vec<f64> = s.get("p").unwrap().data().iter().map(|x| 2.0 * x).collect();
            s.get_mut("p").unwrap().accumulate_grad(&g).unwrap();
            opt.step(&mut s).unwrap();
        }
        let d = s.get("p").unwrap().data();
        assert!(d.iter().all(|v| v.abs() < 0.05), "{d:?}");
    }
}
