use super::ParamVector;

/// Adam hyperparameters; the defaults are the usual momentum settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&self, state: &mut AdamState, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        assert_eq!(state.m.len(), params.len(), "optimizer state / params length");
        assert_eq!(grad.len(), params.len(), "gradient / params length");
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .0
            .iter_mut()
            .zip(&grad.0)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_magnitude_lr() {
        let adam = Adam::default();
        for &g in &[1e-3, 0.5, -20.0] {
            let mut st = AdamState::new(1);
            let mut p = ParamVector(vec![1.0]);
            adam.step(&mut st, &mut p, &ParamVector(vec![g]), 0.01);
            let delta = p.0[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6 * 0.01 / g.abs().min(1.0) + 1e-9);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let adam = Adam::default();
        let mut st = AdamState::new(3);
        let mut p = ParamVector(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        adam.step(&mut st, &mut p, &ParamVector::zeros(3), 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // 1/2 (theta - 3)^2 from 0 with lr 0.1; simulated trajectory oracle:
        // the distance to the optimum shrinks monotonically for the first 20
        // steps (momentum builds up) and the iterate ends close to 3.
        let adam = Adam::default();
        let mut st = AdamState::new(1);
        let mut p = ParamVector(vec![0.0]);
        let mut dist = Vec::new();
        for _ in 0..100 {
            let g = ParamVector(vec![p.0[0] - 3.0]);
            adam.step(&mut st, &mut p, &g, 0.1);
            dist.push((p.0[0] - 3.0).abs());
        }
        for w in dist[..20].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(dist[99] < dist[0]);
        assert!(dist[99] < 0.5, "final distance {}", dist[99]);
    }

    #[test]
    fn deterministic() {
        let adam = Adam::default();
        let run = || {
            let mut st = AdamState::new(2);
            let mut p = ParamVector(vec![0.3, -0.1]);
            for i in 0..50 {
                let g = ParamVector(vec![(i as f64).sin(), p.0[0] * p.0[1]]);
                adam.step(&mut st, &mut p, &g, 0.01);
            }
            p
        };
        assert_eq!(run().0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   run().0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
