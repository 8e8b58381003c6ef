use rayon::prelude::*;

use super::kde::{AxisMoments, KdeConfig, PairDistance, ReferenceDensity};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// The texture regularizer on the local field.
///
/// For every lattice position and every offset in the configured set, the
/// `d_l` channel values at the two positions form a sample of 2-D points.
/// Its KDE is compared with the smoothed prior over the grid by summed
/// squared difference; the loss is the mean over all (position, offset)
/// pairs.
#[derive(Clone, Debug)]
pub struct TextureLoss {
    cfg: KdeConfig,
    reference: ReferenceDensity,
}

impl TextureLoss {
    pub fn new(cfg: &KdeConfig) -> Result<Self> {
        Ok(TextureLoss {
            cfg: cfg.clone(),
            reference: ReferenceDensity::new(cfg)?,
        })
    }

    pub fn config(&self) -> &KdeConfig {
        &self.cfg
    }

    pub fn reference(&self) -> &ReferenceDensity {
        &self.reference
    }

    pub fn pair_distance(&self) -> PairDistance<'_> {
        PairDistance::new(&self.reference, self.cfg.sigma)
    }

    /// Number of (position, offset) pairs on an `l × m` lattice.
    pub fn pair_count(&self, l: usize, m: usize) -> usize {
        self.cfg.offsets.len() * l.saturating_sub(1) * m.saturating_sub(1)
    }

    pub fn value<T: Scalar>(&self, zl: &Tensor4<T>) -> Result<f64> {
        Ok(self.eval(zl, false)?.0)
    }

    pub fn value_and_grad<T: Scalar>(&self, zl: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
        let (v, g) = self.eval(zl, true)?;
        Ok((v, g.expect("requested")))
    }

    fn eval<T: Scalar>(&self, zl: &Tensor4<T>, with_grad: bool) -> Result<(f64, Option<Tensor4<T>>)> {
        let s = zl.shape();
        if s.batch != 1 {
            return Err(Error::Dimension(format!("texture loss takes one local field, got {s}")));
        }
        if s.height < 2 || s.width < 2 {
            return Err(Error::Validation(format!(
                "texture loss needs a lattice of at least 2x2, got {}x{}",
                s.height, s.width
            )));
        }
        if s.channels == 0 {
            return Err(Error::Validation("texture loss needs d_local >= 1".into()));
        }
        let (l, m, d) = (s.height, s.width, s.channels);
        let dist = self.pair_distance();
        let moments: Vec<AxisMoments> = (0..l * m)
            .into_par_iter()
            .map(|pos| {
                let v: Vec<f64> = (0..d).map(|c| zl.data()[c * l * m + pos].as_f64()).collect();
                dist.moments(&v, with_grad)
            })
            .collect();
        let pairs: Vec<(usize, usize)> = self
            .cfg
            .offsets
            .iter()
            .flat_map(|&(dl, dm)| {
                (0..l - 1).flat_map(move |y| {
                    (0..m - 1).map(move |x| (y * m + x, (y + dl) * m + x + dm))
                })
            })
            .collect();
        let results: Vec<(f64, Vec<f64>, Vec<f64>)> = pairs
            .par_iter()
            .map(|&(p, q)| dist.eval_moments(&moments[p], &moments[q], with_grad))
            .collect();
        let inv = 1.0 / pairs.len() as f64;
        let value = results.iter().map(|r| r.0).sum::<f64>() * inv;
        if !value.is_finite() {
            return Err(Error::Numeric("texture loss is not finite".into()));
        }
        if !with_grad {
            return Ok((value, None));
        }
        let mut grad = vec![0.0f64; s.numel()];
        for (&(p, q), (_, gx, gy)) in pairs.iter().zip(&results) {
            for c in 0..d {
                grad[c * l * m + p] += gx[c] * inv;
                grad[c * l * m + q] += gy[c] * inv;
            }
        }
        let grad = Tensor4::from_vec(s, grad.into_iter().map(T::from_f64).collect())?;
        Ok((value, Some(grad)))
    }
}

/// Convenience wrapper building the reference density on each call.
pub fn texture_loss<T: Scalar>(zl: &Tensor4<T>, cfg: &KdeConfig) -> Result<f64> {
    TextureLoss::new(cfg)?.value(zl)
}
