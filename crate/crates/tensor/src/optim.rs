use crate::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with per-parameter moment buffers aligned to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        let first = match kind {
            OptimizerKind::Adam { .. } => zeros,
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            step: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    /// Applies one update with `grads` aligned to store order, then bumps
    /// the store version.
    pub fn apply_update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            let missing = store
                .iter()
                .nth(grads.len())
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            return Err(TensorError::MissingGrad(missing));
        }
        for (idx, g) in grads.iter().enumerate() {
            let (name, p) = store.by_index(idx);
            if g.shape() != p.shape() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (idx, g) in grads.iter().enumerate() {
                    let m = &mut self.first_moment[idx];
                    let v = &mut self.second_moment[idx];
                    let p = store.by_index_mut(idx).data_mut();
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                for (idx, g) in grads.iter().enumerate() {
                    let p = store.by_index_mut(idx).data_mut();
                    for (pi, gi) in p.iter_mut().zip(g.data()) {
                        *pi -= lr * gi;
                    }
                }
            }
        }
        store.bump_version();
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params_and_bump_version() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::row(vec![1.0, -2.0])).unwrap();
        let before = store.clone();
        let mut opt = Optimizer::new(OptimizerKind::adam(), &store);
        opt.apply_update(&mut store, &[Tensor::zeros(&[1, 2])], 1e-3)
            .unwrap();
        assert_eq!(store.get("a"), before.get("a"));
        assert_eq!(store.version(), before.version() + 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), &store);
        let lr = 1e-4;
        opt.apply_update(&mut store, &[Tensor::scalar(1.0)], lr).unwrap();
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let expected = -lr / (1.0 + 1e-8);
        assert_eq!(store.get("w").unwrap().item(), expected);
    }

    #[test]
    fn identical_inputs_identical_results() {
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        let mut oa = Optimizer::new(OptimizerKind::adam(), &a);
        let mut ob = Optimizer::new(OptimizerKind::adam(), &b);
        for g in [0.5, -1.0, 2.0] {
            oa.apply_update(&mut a, &[Tensor::scalar(g)], 0.01).unwrap();
            ob.apply_update(&mut b, &[Tensor::scalar(g)], 0.01).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn missing_grads_rejected() {
        let mut store = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &store);
        assert!(matches!(
            opt.apply_update(&mut store, &[], 0.1),
            Err(TensorError::MissingGrad(_))
        ));
        assert_eq!(store.version(), 0);
    }

    #[test]
    fn sgd_step() {
        let mut store = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &store);
        opt.apply_update(&mut store, &[Tensor::scalar(2.0)], 0.25).unwrap();
        assert_eq!(store.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::row(vec![0.3, 0.4])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
