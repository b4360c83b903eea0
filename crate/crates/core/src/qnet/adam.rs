use crate::error::{Error, Result};

use super::{Gradients, QNetwork};

/// Adam optimizer moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &QNetwork, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: net.zero_gradients(),
            v: net.zero_gradients(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to `net`.
    pub fn step(&mut self, net: &mut QNetwork, grads: &Gradients) -> Result<()> {
        if grads.trunk.len() != net.trunk.len() || grads.heads.len() != net.heads.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient layers",
                expected: net.trunk.len() + net.heads.len(),
                got: grads.trunk.len() + grads.heads.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);

        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((p, m), v), g) in net
            .layers_mut()
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut())
            .zip(grads.layers())
        {
            ndarray::Zip::from(&mut p.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut p.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetConfig;

    #[test]
    fn first_step_moves_each_parameter_by_lr() {
        // With bias correction, step one is lr * sign(g) (up to epsilon).
        let mut net = QNetwork::new(2, &[2], &NetConfig { hidden_layers: 1, hidden_width: 3 }, 0);
        let before = net.flatten_params();
        let mut grads = net.zero_gradients();
        grads.trunk[0].weights.fill(0.5);
        grads.heads[0].bias.fill(-2.0);
        let mut adam = AdamState::new(&net, 0.01);
        adam.step(&mut net, &grads).unwrap();
        let after = net.flatten_params();
        for ((b, a), g) in before.iter().zip(&after).zip(grads.flatten()) {
            let expected = if g == 0.0 { 0.0 } else { -0.01 * g.signum() };
            assert!((a - b - expected).abs() < 1e-9, "{a} {b} {g}");
        }
    }
}
