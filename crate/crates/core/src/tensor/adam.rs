use indexmap::IndexMap;

use super::{shape_err, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First/second moment buffers for a named parameter set.
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<usize>, Moments<T>)>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &IndexMap<String, Tensor<T>>) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                let zeros = vec![T::zero(); p.numel()];
                (name.clone(), (p.shape().to_vec(), Moments { m: zeros.clone(), v: zeros }))
            })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update. Parameters without an entry in `grads`
    /// are left untouched.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor<T>>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| shape_err("adam_step", format!("no parameter named {name}")))?;
            let (shape, _) =
                self.moments.get(name).ok_or_else(|| shape_err("adam_step", format!("no optimizer state for {name}")))?;
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(shape_err(
                    "adam_step",
                    format!("{name}: state {shape:?}, param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (_, mom) = self.moments.get_mut(name).expect("checked above");
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut mom.m).zip(&mut mom.v) {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
