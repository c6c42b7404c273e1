//! Adam with bias-corrected moments, plus a row-lazy variant for embeddings.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Step counter plus hyperparameters. Moment buffers live next to the
/// parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the step counter. Call once per optimizer step, before any
    /// [`Adam::update`] for that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t.max(1) as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    /// Dense update of `params` in place.
    pub fn update(&self, params: &mut [f64], grads: &[f64], moments: &mut Moments) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), moments.m.len());
        let (c1, c2) = self.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Lazy update: only `rows` (each `dim` wide) of `params` and their
    /// moments are touched. Rows absent from the batch keep stale moments.
    pub fn update_rows(
        &self,
        params: &mut [f64],
        grads: &[f64],
        moments: &mut Moments,
        dim: usize,
        rows: &[u32],
    ) {
        let (c1, c2) = self.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for &r in rows {
            let span = r as usize * dim..(r as usize + 1) * dim;
            for i in span {
                let g = grads[i];
                let m = &mut moments.m[i];
                let v = &mut moments.v[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
