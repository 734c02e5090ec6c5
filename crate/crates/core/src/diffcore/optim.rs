use super::{DiffError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    step: u64,
}

/// Rejects the whole update if any trainable gradient is non-finite.
fn check_finite(store: &ParamStore, grads: &[Option<Tensor>]) -> Result<(), DiffError> {
    if grads.len() != store.len() {
        return Err(DiffError::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, p) in store.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != p.value.shape() {
                return Err(DiffError::Shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if p.trainable && !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    Ok(())
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, first: vec![None; store.len()], second: vec![None; store.len()], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First-moment accumulator of one parameter; `None` until it is first updated.
    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first.get(index).and_then(|m| m.as_ref())
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are skipped and their moments stay untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<(), DiffError> {
        check_finite(store, grads)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, kept for ablations.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<(), DiffError> {
        check_finite(store, grads)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            for (p, &gj) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= self.lr * gj;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", "x", Tensor::vector(values.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[1.0, -2.0, 3.5]);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &s);
        for _ in 0..5 {
            opt.step(&mut s, &[Some(Tensor::zeros(&[3]))]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut s = store_with(&[0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &s);
        let g = Tensor::vector(vec![0.3, -2.0]);
        let mut prev = s.value(s.ids().next().unwrap()).data().to_vec();
        for _ in 0..50 {
            opt.step(&mut s, &[Some(g.clone())]).unwrap();
            let cur = s.value(s.ids().next().unwrap()).data().to_vec();
            assert!(cur[0] < prev[0]);
            assert!(cur[1] > prev[1]);
            prev = cur;
        }
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // m_hat = g and v_hat = g^2 after one step, so |update| = lr * |g| / (|g| + eps).
        for &g in &[1e-3, 0.5, 7.0, -3.0] {
            let mut s = store_with(&[1.0]);
            let lr = 5e-4;
            let mut opt = Adam::new(AdamConfig::with_lr(lr), &s);
            opt.step(&mut s, &[Some(Tensor::vector(vec![g]))]).unwrap();
            let moved = (s.value(s.ids().next().unwrap()).item() - 1.0).abs();
            let expected = lr * g.abs() / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g}: {moved} vs {expected}");
            assert!((moved - lr).abs() / lr < 1e-5);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name() {
        let mut s = store_with(&[1.0, 2.0]);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &s);
        let err = opt.step(&mut s, &[Some(Tensor::vector(vec![1.0, f64::NAN]))]).unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteGradient(ref n) if n == "w.x"));
        assert_eq!(s, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn frozen_parameters_keep_moments_untouched() {
        let mut s = ParamStore::new();
        s.add("a", "p", Tensor::vector(vec![1.0]));
        s.add("b", "p", Tensor::vector(vec![1.0]));
        s.set_group_trainable("b", false);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &s);
        let g = vec![Some(Tensor::vector(vec![1.0])), Some(Tensor::vector(vec![1.0]))];
        opt.step(&mut s, &g).unwrap();
        assert!(opt.first_moment(0).is_some());
        assert!(opt.first_moment(1).is_none());
        assert_eq!(s.value(s.find("b.p").unwrap()).item(), 1.0);
    }

    #[test]
    fn sgd_step() {
        let mut s = store_with(&[1.0]);
        Sgd { lr: 0.5 }.step(&mut s, &[Some(Tensor::vector(vec![2.0]))]).unwrap();
        assert_eq!(s.value(s.find("w.x").unwrap()).item(), 0.0);
    }
}
