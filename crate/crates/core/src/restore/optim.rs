//! Adam and the learning-rate schedule.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;

/// One-cycle learning rate: linear ramp to `peak` over the first 30% of
/// `total` steps, then linear decay towards zero (the last step keeps a
/// small positive rate).
pub fn one_cycle(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let warm = ((total as f64 * WARMUP_FRACTION).round() as usize)
        .max(1)
        .min(total);
    if step < warm {
        peak * (step + 1) as f64 / warm as f64
    } else if total == warm {
        peak
    } else {
        peak * (total - step.min(total)) as f64 / (total - warm + 1) as f64
    }
}
