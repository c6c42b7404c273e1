//! CVR estimators: BASE on the clicked subspace, independently trained CTR
//! and CTCVR networks, DIVISION, and ESMM / ESMM-NS.

mod base;
mod esmm;
pub mod train;

pub use base::{train_base_cvr, train_independent, train_on, BaseModel, Role};
pub use esmm::{train_esmm, train_esmm_with, EsmmModel};
pub use train::TrainConfig;

use crate::error::Result;
use crate::feature::SparseSample;
use crate::nn::cross_entropy;

/// Chunk size used for batched inference.
pub(crate) const PREDICT_CHUNK: usize = 512;

/// pCTR, pCVR and pCTCVR for one impression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    pub pctr: f64,
    pub pcvr: f64,
    pub pctcvr: f64,
}

impl ModelOutput {
    pub fn from_factors(pctr: f64, pcvr: f64) -> Self {
        Self {
            pctr,
            pcvr,
            pctcvr: pctcvr_compose(pctr, pcvr),
        }
    }
}

/// `p(y=1, z=1 | x) = p(y=1 | x) * p(z=1 | y=1, x)`.
pub fn pctcvr_compose(pctr: f64, pcvr: f64) -> f64 {
    pctr * pcvr
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivisionOutput {
    /// Not clamped; may exceed 1.
    pub pcvr: f64,
    pub exceeded_one: bool,
}

/// Default floor placed under pCTR before dividing.
pub const DIVISION_FLOOR: f64 = 1e-6;

/// `pctcvr / max(pctr, floor)`, flagging results above 1.
pub fn division_cvr(pctcvr: f64, pctr: f64, floor: f64) -> DivisionOutput {
    let pcvr = pctcvr / pctr.max(floor);
    DivisionOutput {
        pcvr,
        exceeded_one: pcvr > 1.0,
    }
}

/// Batch mean of `CE(y, pctr) + CE(y & z, pctr * pcvr)`. There is no term on
/// pCVR by itself.
pub fn esmm_loss(outputs: &[ModelOutput], labels: &[(bool, bool)]) -> f64 {
    assert_eq!(outputs.len(), labels.len(), "one label pair per output");
    assert!(!outputs.is_empty(), "empty batch");
    let total: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(o, &(y, z))| cross_entropy(y, o.pctr) + cross_entropy(y && z, o.pctr * o.pcvr))
        .sum();
    total / outputs.len() as f64
}

/// Anything that scores impressions with a conversion-given-click estimate.
pub trait CvrPredictor {
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>>;
}

impl<F> CvrPredictor for F
where
    F: Fn(&[SparseSample]) -> Result<Vec<f64>>,
{
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        self(samples)
    }
}

/// pCVR obtained by dividing two independently trained networks.
pub struct Division<'a> {
    pub ctr: &'a BaseModel,
    pub ctcvr: &'a BaseModel,
    pub floor: f64,
}

impl Division<'_> {
    pub fn predict(&self, samples: &[SparseSample]) -> Result<Vec<DivisionOutput>> {
        let ctr = self.ctr.predict(samples)?;
        let ctcvr = self.ctcvr.predict(samples)?;
        Ok(ctcvr
            .iter()
            .zip(&ctr)
            .map(|(&a, &b)| division_cvr(a, b, self.floor))
            .collect())
    }
}

impl CvrPredictor for Division<'_> {
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        Ok(self.predict(samples)?.into_iter().map(|d| d.pcvr).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::PROB_CLAMP;

    #[test]
    fn compose_examples() {
        assert_eq!(pctcvr_compose(0.5, 0.5), 0.25);
        assert_eq!(pctcvr_compose(1.0, 0.37), 0.37);
        assert!((pctcvr_compose(0.04, 0.005) - 0.0002).abs() < 1e-18);
    }

    #[test]
    fn division_examples() {
        assert_eq!(
            division_cvr(0.25, 0.5, DIVISION_FLOOR),
            DivisionOutput {
                pcvr: 0.5,
                exceeded_one: false
            }
        );
        let d = division_cvr(0.3, 0.2, DIVISION_FLOOR);
        assert!((d.pcvr - 1.5).abs() < 1e-12 && d.exceeded_one);
        let d = division_cvr(0.1, 0.0, 1e-6);
        assert!((d.pcvr - 1e5).abs() < 1e-6 && d.exceeded_one);
    }

    #[test]
    fn loss_on_unclicked_half_half() {
        // Independently: -ln(0.5) and -ln(0.75).
        let want = std::f64::consts::LN_2 + (4.0f64 / 3.0).ln();
        let out = [ModelOutput::from_factors(0.5, 0.5)];
        let got = esmm_loss(&out, &[(false, false)]);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.980829).abs() < 1e-6);
    }

    #[test]
    fn loss_at_clamp_optimum_is_tiny() {
        let p = 1.0 - PROB_CLAMP;
        let got = esmm_loss(&[ModelOutput::from_factors(p, p)], &[(true, true)]);
        assert!((got - 3e-7).abs() < 1e-12, "{got}");
    }

    #[test]
    fn loss_is_batch_mean() {
        let o = ModelOutput::from_factors(0.3, 0.2);
        let one = esmm_loss(&[o], &[(true, false)]);
        let two = esmm_loss(&[o, o], &[(true, false), (true, false)]);
        assert!((one - two).abs() < 1e-15);
    }
}
