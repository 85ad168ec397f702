use crate::params::ParamStore;

/// Adam with L2 regularization added to the gradient (`g + wd·θ`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen parameters
    /// keep their values and moments.
    pub fn update(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let (theta, grad) = (p.value.data_mut(), &p.grad);
            for i in 0..theta.len() {
                let th = theta[i] as f64;
                let g = grad[i] as f64 + self.weight_decay * th;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                theta[i] = (th - step) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hd2s_tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.get_mut(id).grad = vec![0.5, -2.0];
        let mut adam = Adam::new(0.1, 0.0);
        adam.update(&mut store);
        let v = store.get(id).value.data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut adam = Adam::new(0.1, 0.5);
        adam.update(&mut store);
        // gradient 0 + 0.5·2 = 1, so the first step is −lr
        assert!((store.get(id).value.data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut adam = Adam::new(0.05, 0.0);
        for _ in 0..500 {
            let w = store.get(id).value.data()[0];
            store.get_mut(id).grad = vec![2.0 * (w - 1.0)];
            adam.update(&mut store);
        }
        assert!((store.get(id).value.data()[0] - 1.0).abs() < 1e-2);
    }
}
