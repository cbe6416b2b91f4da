use super::params::ParamStore;

/// Adam with the usual defaults; only the learning rate is configured
/// externally. Each instance keeps its own step counter, so independent
/// parameter groups (main networks vs. critic) get correct bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Apply one update to every trainable tensor whose name starts with one
    /// of `prefixes` (an empty list updates everything), then clear those
    /// grads.
    pub fn step(&mut self, store: &mut ParamStore, prefixes: &[&str]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            if !p.trainable
                || !(prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre)))
            {
                continue;
            }
            for ((w, g), (m, v)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter_mut())
                .zip(p.m.iter_mut().zip(p.v.iter_mut()))
            {
                let gd = *g as f64;
                let md = self.beta1 * *m as f64 + (1.0 - self.beta1) * gd;
                let vd = self.beta2 * *v as f64 + (1.0 - self.beta2) * gd * gd;
                *m = md as f32;
                *v = vd as f32;
                let mhat = md / bc1;
                let vhat = vd / bc2;
                *w -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
                *g = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ArrayD::from_elem(IxDyn(&[2]), 5.0f32), true);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            // f(x) = (x - 3)^2, df/dx = 2 (x - 3)
            let vals: Vec<f32> = store.get(id).value.iter().copied().collect();
            for (g, v) in store.get_mut(id).grad.iter_mut().zip(&vals) {
                *g = 2.0 * (v - 3.0);
            }
            adam.step(&mut store, &[]);
        }
        for &v in store.get(id).value.iter() {
            assert!((v - 3.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn prefix_limits_updates() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", ArrayD::from_elem(IxDyn(&[1]), 1.0f32), true);
        let b = store.add("critic.w", ArrayD::from_elem(IxDyn(&[1]), 1.0f32), true);
        store.get_mut(a).grad.fill(1.0);
        store.get_mut(b).grad.fill(1.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &["enc."]);
        assert!(store.get(a).value[0] < 1.0);
        assert_eq!(store.get(b).value[0], 1.0);
    }
}
