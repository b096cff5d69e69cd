//! Adam with decoupled weight decay (the AdamW update). Weight decay
//! is applied directly to the parameter, not mixed into the gradient
//! moments, which keeps the reported decay coefficient meaningful at
//! these magnitudes.

use ndarray::ArrayD;

use super::ParamTree;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: ParamTree,
    v: ParamTree,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: ParamTree::new(),
            v: ParamTree::new(),
        }
    }

    /// One update. Only parameters present in `grads` move; moment
    /// state is keyed by name and created lazily. Iteration follows the
    /// sorted name order of the gradient map, so updates are
    /// reproducible.
    pub fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(
                param.shape(),
                grad.shape(),
                "gradient shape mismatch for {name}"
            );
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *param)
                .and(&mut *m)
                .and(&mut *v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}
