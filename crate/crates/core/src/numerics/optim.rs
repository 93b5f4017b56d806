use crate::numerics::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Moments indexed by parameter id.
    pub state: Vec<Moments>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: Vec::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient, then
    /// clears all gradients. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        for (p, st) in store.iter_mut().zip(&mut self.state) {
            let Some(grad) = p.grad.take() else { continue };
            if st.m.is_empty() {
                st.m = vec![0.0; grad.len()];
                st.v = vec![0.0; grad.len()];
            }
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Steps taken for each parameter, in store order.
    pub fn steps(&self) -> Vec<u64> {
        self.state.iter().map(|s| s.step).collect()
    }
}
