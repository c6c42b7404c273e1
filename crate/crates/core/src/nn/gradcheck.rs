//! Analytic-versus-central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{batch_loss, batch_loss_and_grads, Objective, Workspace};
use super::params::ParamStore;
use crate::error::Result;
use crate::feature::SparseSample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates checked when the model has more parameters than this.
    pub coords: usize,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords: 256,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: Option<usize>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` on a random
/// subset of coordinates of `params` (all of them if there are few).
/// `params` is restored before returning.
pub fn grad_check<F>(
    params: &mut [f64],
    analytic: &[f64],
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len(), "one analytic entry per parameter");
    let n = params.len();
    let idx: Vec<usize> = if n <= cfg.coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, n, cfg.coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for &i in &idx {
        let orig = params[i];
        params[i] = orig + cfg.step;
        let up = loss(params);
        params[i] = orig - cfg.step;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up? - down?) / (2.0 * cfg.step);
        let err = relative_error(analytic[i], numeric, cfg.floor);
        if err > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(err);
            worst = Some(i);
        }
    }
    Ok(GradCheckReport {
        checked: idx.len(),
        max_rel_err,
        worst,
        passed: max_rel_err < cfg.tolerance,
    })
}

/// Analytic gradient of `objective` on `batch`, flattened.
pub fn analytic_gradient(
    store: &ParamStore,
    objective: Objective,
    batch: &[&SparseSample],
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut ws = Workspace::default();
    let mut grads = store.zero_grads();
    batch_loss_and_grads(store, objective, batch, weights, &mut ws, &mut grads)?;
    Ok(grads.flat())
}

/// [`grad_check`] over a [`ParamStore`] graph. `corrupt` scales the analytic
/// gradient at one flat index before comparing, for mutation testing.
pub fn check_store(
    store: &ParamStore,
    objective: Objective,
    batch: &[&SparseSample],
    weights: Option<&[f64]>,
    corrupt: Option<(usize, f64)>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut analytic = analytic_gradient(store, objective, batch, weights)?;
    if let Some((i, factor)) = corrupt {
        analytic[i] *= factor;
    }
    let mut probe = store.clone();
    let mut ws = Workspace::default();
    let mut params = store.flat_params();
    grad_check(
        &mut params,
        &analytic,
        |p| {
            probe.set_flat_params(p)?;
            batch_loss(&probe, objective, batch, weights, &mut ws)
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_agrees_to_machine_precision() {
        let xs = [0.5, -1.0, 2.0];
        let mut w = vec![0.3, 0.1, -0.2];
        let analytic = xs.to_vec();
        let cfg = GradCheckConfig::default();
        let rep = grad_check(
            &mut w,
            &analytic,
            |p| Ok(p.iter().zip(&xs).map(|(a, b)| a * b).sum()),
            &cfg,
        )
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
        assert_eq!(w, vec![0.3, 0.1, -0.2]);
    }

    #[test]
    fn scalar_sigmoid_ce_closed_form() {
        // p = sigmoid(w), label 1: d/dw CE = sigmoid(w) - 1.
        let sig = |w: f64| 1.0 / (1.0 + (-w).exp());
        for w0 in [-2.0, 0.0, 0.7] {
            let mut w = vec![w0];
            let rep = grad_check(
                &mut w,
                &[sig(w0) - 1.0],
                |p| Ok(-sig(p[0]).ln()),
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(rep.passed, "w={w0}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn doubled_gradient_fails() {
        let mut w = vec![1.0, 2.0];
        let rep = grad_check(
            &mut w,
            &[2.0, 8.0],
            |p| Ok(p[0] * p[0] + p[1] * p[1]),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst, Some(1));
    }
}
