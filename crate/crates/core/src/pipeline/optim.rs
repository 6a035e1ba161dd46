use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const EPS: f64 = 1e-8;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [(String, Mat)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies to weight matrices
/// (names ending in `.w`) only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (name, v) in p.iter() {
                z.insert(name.clone(), Mat::zeros(v.dim()));
            }
            z
        };
        Self { lr, beta1, beta2, weight_decay, t: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Mat)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::invalid(format!("optimizer has no state for {name}")));
            };
            let decay = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                *p -= self.lr * (update + decay * *p);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("a.w", array![[1.0, -2.0]]);
        p.insert("a.b", array![[0.5]]);
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.999, 0.0);
        opt.step(&mut p, &[("a.w".into(), array![[3.0, -0.01]]), ("a.b".into(), array![[-4.0]])]).unwrap();
        let w = p.get("a.w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-5);
        assert!((p.get("a.b").unwrap()[[0, 0]] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = ParamStore::new();
        p.insert("a.w", array![[1.0]]);
        p.insert("a.b", array![[1.0]]);
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.999, 0.5);
        opt.step(&mut p, &[("a.w".into(), array![[0.0]]), ("a.b".into(), array![[0.0]])]).unwrap();
        assert!((p.get("a.w").unwrap()[[0, 0]] - 0.95).abs() < 1e-12);
        assert_eq!(p.get("a.b").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![("x".to_string(), array![[3.0, 4.0]])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1[[0, 0]] - 0.6).abs() < 1e-12);
        let mut small = vec![("x".to_string(), array![[0.3]])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].1[[0, 0]], 0.3);
    }
}
