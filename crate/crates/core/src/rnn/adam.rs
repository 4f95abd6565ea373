use super::{NetParams, RnnError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment accumulators over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    /// Bias-corrected update of a flat parameter vector.
    pub fn update_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), RnnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(RnnError::Shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(RnnError::NonFinite(format!("gradient of parameter {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One Adam step on a network's parameters.
pub fn adam_update(state: &mut AdamState, params: &mut NetParams, grads: &NetParams, lr: f64) -> Result<(), RnnError> {
    let mut flat = params.flatten();
    let g = grads.flatten();
    state.update_flat(&mut flat, &g, lr).map_err(|e| match e {
        RnnError::NonFinite(_) => {
            let idx = g.iter().position(|v| !v.is_finite()).unwrap_or(0);
            RnnError::NonFinite(format!("gradient of {}", grads.name_of(idx)))
        }
        other => other,
    })?;
    params.load_flat(&flat)
}
