use serde::{Deserialize, Serialize};

use super::correspondence::{Correspondence, CorrespondenceMap};
use super::kde::KdeConfig;
use super::texture::TextureLoss;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentState};
use crate::kernels;
use crate::tape::Tape;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Objective settings: `L = L_content + alpha_l · L_texture`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub map: CorrespondenceMap,
    pub alpha_l: f64,
    pub kde: KdeConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            map: CorrespondenceMap::Identity,
            alpha_l: 5.0,
            kde: KdeConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_l >= 0.0 && self.alpha_l.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha_l must be a non-negative number, got {}",
                self.alpha_l
            )));
        }
        self.kde.validate()
    }
}

/// `mean((φ(content) − φ(generated))²)`.
pub fn content_loss<T: Scalar>(
    content: &Tensor4<T>,
    generated: &Tensor4<T>,
    map: &Correspondence,
) -> Result<f64> {
    if content.shape() != generated.shape() {
        return Err(Error::Dimension(format!(
            "content {} and generated {} differ in shape",
            content.shape(),
            generated.shape()
        )));
    }
    let diff = kernels::zip_with(&map.apply(content)?, &map.apply(generated)?, "content loss", |a, b| {
        a - b
    })?;
    kernels::mean_sq(&diff)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub content: f64,
    pub texture: f64,
}

/// Loss terms and gradients with respect to both latent fields.
#[derive(Clone, Debug)]
pub struct LossGrad<T: Scalar> {
    pub terms: LossTerms,
    pub zg: Tensor4<T>,
    pub zl: Tensor4<T>,
}

/// Evaluates the objective for one content image against latents of the
/// matching lattice. `φ(content)` and the reference density are computed
/// once.
#[derive(Clone, Debug)]
pub struct LossEvaluator<'a> {
    generator: &'a Generator,
    target: Tensor4<f64>,
    map: Correspondence,
    alpha_l: f64,
    texture: TextureLoss,
    lattice: (usize, usize),
}

impl<'a> LossEvaluator<'a> {
    pub fn new(generator: &'a Generator, content: &Tensor4<f32>, cfg: &LossConfig) -> Result<Self> {
        Self::with_map(generator, content, cfg, cfg.map.prepare()?)
    }

    /// Like [`LossEvaluator::new`] with an already prepared map.
    pub fn with_map(
        generator: &'a Generator,
        content: &Tensor4<f32>,
        cfg: &LossConfig,
        map: Correspondence,
    ) -> Result<Self> {
        cfg.validate()?;
        if !generator.is_calibrated() {
            return Err(Error::State(
                "generator batch-norm statistics are not calibrated; run the calibrate command first"
                    .into(),
            ));
        }
        let s = content.shape();
        let f = generator.spec().upsample_factor();
        if s.batch != 1 || s.channels != 3 || !s.height.is_multiple_of(f) || !s.width.is_multiple_of(f) || s.height == 0 || s.width == 0 {
            return Err(Error::Dimension(format!(
                "content {s} must be a 1x3 image with sides divisible by {f}"
            )));
        }
        let target = map.apply(&content.cast::<f64>())?;
        Ok(LossEvaluator {
            generator,
            target,
            map,
            alpha_l: cfg.alpha_l,
            texture: TextureLoss::new(&cfg.kde)?,
            lattice: (s.height / f, s.width / f),
        })
    }

    pub fn generator(&self) -> &Generator {
        self.generator
    }

    pub fn lattice(&self) -> (usize, usize) {
        self.lattice
    }

    pub fn alpha_l(&self) -> f64 {
        self.alpha_l
    }

    pub fn texture_loss(&self) -> &TextureLoss {
        &self.texture
    }

    fn check_latent(&self, zg: Shape4, zl: Shape4) -> Result<()> {
        let (l, m) = self.lattice;
        if (zg.height, zg.width) != (l, m) || (zl.height, zl.width) != (l, m) {
            return Err(Error::Dimension(format!(
                "latent fields {zg} / {zl} do not match the content lattice {l}x{m}"
            )));
        }
        Ok(())
    }

    /// Texture term. Lattices narrower than 2 carry no neighbor pairs and
    /// count as 0 when the term is switched off; with `report` unset and
    /// the term switched off, the value is skipped and reported as NaN.
    fn texture_value<T: Scalar>(
        &self,
        zl: &Tensor4<T>,
        with_grad: bool,
        report: bool,
    ) -> Result<(f64, Option<Tensor4<T>>)> {
        let (l, m) = self.lattice;
        if self.alpha_l == 0.0 {
            if l < 2 || m < 2 {
                return Ok((0.0, None));
            }
            if !report {
                return Ok((f64::NAN, None));
            }
        }
        if with_grad && self.alpha_l > 0.0 {
            let (v, g) = self.texture.value_and_grad(zl)?;
            Ok((v, Some(g)))
        } else {
            Ok((self.texture.value(zl)?, None))
        }
    }

    fn combine(&self, content: f64, texture: f64) -> Result<LossTerms> {
        if !content.is_finite() {
            return Err(Error::Numeric(format!("content loss is {content}")));
        }
        let total = if self.alpha_l == 0.0 {
            content
        } else {
            content + self.alpha_l * texture
        };
        Ok(LossTerms {
            total,
            content,
            texture,
        })
    }

    /// Forward-only evaluation.
    pub fn terms(&self, latent: &LatentState) -> Result<LossTerms> {
        self.check_latent(latent.zg.shape(), latent.zl.shape())?;
        let out = self.generator.forward::<f32>(latent)?;
        let phi = self.map.apply(&out)?;
        let diff = kernels::zip_with(&phi, &self.target.cast(), "content loss", |a, b| a - b)?;
        let content = kernels::mean_sq(&diff)?;
        let (texture, _) = self.texture_value(&latent.zl, false, true)?;
        self.combine(content, texture)
    }

    pub fn evaluate(&self, latent: &LatentState) -> Result<LossGrad<f32>> {
        self.evaluate_fields(&latent.zg, &latent.zl, &latent.phases)
    }

    /// Like [`LossEvaluator::evaluate`], but when `alpha_l` is 0 the texture
    /// value, which then only serves reporting, is left as NaN.
    pub fn evaluate_objective(&self, latent: &LatentState) -> Result<LossGrad<f32>> {
        self.evaluate_inner(&latent.zg, &latent.zl, &latent.phases, false)
    }

    /// Texture value of a local field on this evaluator's lattice.
    pub fn texture_of(&self, zl: &Tensor4<f32>) -> Result<f64> {
        Ok(self.texture_value(zl, false, true)?.0)
    }

    /// One forward and backward pass at precision `T`.
    pub fn evaluate_fields<T: Scalar>(
        &self,
        zg: &Tensor4<T>,
        zl: &Tensor4<T>,
        phases: &[f64],
    ) -> Result<LossGrad<T>> {
        self.evaluate_inner(zg, zl, phases, true)
    }

    fn evaluate_inner<T: Scalar>(
        &self,
        zg: &Tensor4<T>,
        zl: &Tensor4<T>,
        phases: &[f64],
        report_texture: bool,
    ) -> Result<LossGrad<T>> {
        self.check_latent(zg.shape(), zl.shape())?;
        let mut tape = Tape::<T>::new();
        let zg_var = tape.param(zg.clone());
        let zl_var = tape.param(zl.clone());
        let out = self
            .generator
            .forward_on_tape(&mut tape, zg_var, zl_var, phases, (0, 0))?;
        let phi = self.map.apply_on_tape(&mut tape, out)?;
        let target = tape.constant(self.target.cast());
        let diff = tape.sub(phi, target)?;
        let content_var = tape.mean_sq(diff)?;
        let content = kernels::mean_sq(tape.value(diff))?;
        let (texture, texture_grad) = self.texture_value(zl, true, report_texture)?;
        let terms = self.combine(content, texture)?;
        let total = match texture_grad {
            Some(grad) => {
                let texture_var = tape.scalar_with_grad(zl_var, texture, Some(grad))?;
                let weighted = tape.scale(texture_var, self.alpha_l)?;
                tape.add(content_var, weighted)?
            }
            None => content_var,
        };
        let mut grads = tape.backward(total)?;
        Ok(LossGrad {
            terms,
            zg: grads.take(zg_var).expect("param leaf"),
            zl: grads.take(zl_var).expect("param leaf"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{CalibrationConfig, GeneratorSpec};

    fn setup() -> (Generator, LatentState, Tensor4<f32>) {
        let g = Generator::random(GeneratorSpec::toy(2), 1)
            .unwrap()
            .calibrate_bn(&CalibrationConfig {
                n_samples: 8,
                lattice: 4,
                seed: 1,
                batch_size: 4,
            })
            .unwrap();
        let z = LatentState::sample_prior(g.spec(), 3, 3, 5).unwrap();
        let content = Tensor4::from_fn(Shape4::new(1, 3, 12, 12), |_, c, h, w| {
            ((c + h * w) as f32 * 0.1).sin() * 0.5
        });
        (g, z, content)
    }

    #[test]
    fn identity_constant_example() {
        let c = Tensor4::<f64>::zeros(Shape4::new(1, 3, 4, 4));
        let g = Tensor4::<f64>::full(Shape4::new(1, 3, 4, 4), 0.3);
        let v = content_loss(&c, &g, &Correspondence::identity()).unwrap();
        assert!((v - 0.09).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_total_is_content() {
        let (g, z, content) = setup();
        let cfg = LossConfig {
            alpha_l: 0.0,
            ..LossConfig::default()
        };
        let ev = LossEvaluator::new(&g, &content, &cfg).unwrap();
        let r = ev.evaluate(&z).unwrap();
        assert_eq!(r.terms.total, r.terms.content);
        assert!(r.zl.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_is_linear_in_alpha() {
        let (g, z, content) = setup();
        let ev = LossEvaluator::new(&g, &content, &LossConfig::default()).unwrap();
        let r = ev.evaluate(&z).unwrap();
        let tex = ev.texture_loss().value(&z.zl).unwrap();
        assert!((r.terms.total - r.terms.content - 5.0 * tex).abs() < 1e-9 * r.terms.total);
        assert_eq!(ev.terms(&z).unwrap().content, r.terms.content);
    }

    #[test]
    fn texture_does_not_touch_global_gradient() {
        let (g, z, content) = setup();
        let a = LossEvaluator::new(&g, &content, &LossConfig { alpha_l: 0.0, ..LossConfig::default() })
            .unwrap()
            .evaluate(&z)
            .unwrap();
        let b = LossEvaluator::new(&g, &content, &LossConfig::default())
            .unwrap()
            .evaluate(&z)
            .unwrap();
        assert_eq!(a.zg, b.zg);
        assert_ne!(a.zl, b.zl);
    }

    #[test]
    fn content_must_match_upsampling() {
        let (g, _, _) = setup();
        let content = Tensor4::<f32>::zeros(Shape4::new(1, 3, 10, 12));
        assert!(matches!(
            LossEvaluator::new(&g, &content, &LossConfig::default()),
            Err(Error::Dimension(_))
        ));
    }
}
