//! The fully convolutional texture generator `G(Z)`.
//!
//! `Z = [Z^g, Z^l, Z^p]` is concatenated on the channel axis, where the
//! periodic part `Z^p` is a set of plane waves whose wave numbers an MLP
//! derives from `Z^g` at every lattice position. The stack is `depth`
//! stride-2 transposed convolutions, each hidden one followed by
//! fixed-statistics batch norm and relu, the last by tanh.

mod calibrate;
pub mod format;
mod latent;
mod margin;
mod spec;
mod weights;

use std::sync::Arc;

pub use calibrate::CalibrationConfig;
pub use latent::LatentState;
pub use margin::{receptive_margin, receptive_margin_of_layers, LayerGeom};
pub use spec::GeneratorSpec;
pub use weights::{manifest, BatchNormParams, ConvLayer, GeneratorWeights, PeriodicMlp};

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, ChannelAffine, ConvGeom};
use crate::tape::{channel_vector, Tape, Var};
use crate::tensor::{Scalar, Shape4, Tensor4};

const POINTWISE: ConvGeom = ConvGeom::new(1, 0, 0);

/// A generator architecture together with its weights.
///
/// Immutable once built; share it across threads behind a reference.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    weights: GeneratorWeights,
    affines: Vec<Arc<ChannelAffine>>,
}

struct CastParams<T: Scalar> {
    convs: Vec<(Tensor4<T>, Vec<T>)>,
    w1: Tensor4<T>,
    b1: Vec<T>,
    w2: Tensor4<T>,
    b2: Vec<T>,
}

fn cast_vec<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x as f64)).collect()
}

impl Generator {
    pub fn new(spec: GeneratorSpec, weights: GeneratorWeights) -> Result<Self> {
        spec.validate()?;
        let expected = manifest(&spec);
        let actual = weights.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Dimension(format!(
                "architecture needs {} tensors, weights provide {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, dims), data) in expected.iter().zip(actual) {
            if dims.iter().product::<usize>() != data.len() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {dims:?}, got {} values",
                    data.len()
                )));
            }
        }
        for (i, conv) in weights.convs.iter().enumerate() {
            let want = Shape4::new(spec.in_channels(i), spec.channels[i], spec.kernel, spec.kernel);
            if conv.weight.shape() != want {
                return Err(Error::Dimension(format!(
                    "conv{i}.weight has shape {}, expected {want}",
                    conv.weight.shape()
                )));
            }
        }
        let affines = weights
            .norms
            .iter()
            .map(|bn| {
                ChannelAffine::from_batch_norm(&bn.mean, &bn.var, &bn.gamma, &bn.beta, spec.bn_eps)
                    .map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator {
            spec,
            weights,
            affines,
        })
    }

    /// Randomly initialized, uncalibrated generator.
    pub fn random(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let weights = GeneratorWeights::random(&spec, seed)?;
        Generator::new(spec, weights)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn weights(&self) -> &GeneratorWeights {
        &self.weights
    }

    pub fn is_calibrated(&self) -> bool {
        self.weights.calibrated
    }

    pub fn into_parts(self) -> (GeneratorSpec, GeneratorWeights) {
        (self.spec, self.weights)
    }

    fn require_calibrated(&self) -> Result<()> {
        if self.weights.calibrated {
            Ok(())
        } else {
            Err(Error::State(
                "generator batch-norm statistics are not calibrated; run the calibrate command first"
                    .into(),
            ))
        }
    }

    fn cast_params<T: Scalar>(&self) -> CastParams<T> {
        let w = &self.weights;
        CastParams {
            convs: w
                .convs
                .iter()
                .map(|c| (c.weight.cast(), cast_vec(&c.bias)))
                .collect(),
            w1: w.mlp.w1.cast(),
            b1: cast_vec(&w.mlp.b1),
            w2: w.mlp.w2.cast(),
            b2: cast_vec(&w.mlp.b2),
        }
    }

    fn check_phases(&self, phases: &[f64]) -> Result<()> {
        if phases.len() != self.spec.d_periodic {
            return Err(Error::Dimension(format!(
                "{} phases for {} periodic channels",
                phases.len(),
                self.spec.d_periodic
            )));
        }
        Ok(())
    }

    fn check_fields(&self, zg: Shape4, zl: Shape4) -> Result<()> {
        if zg.batch != 1 || zg.channels != self.spec.d_global {
            return Err(Error::Dimension(format!(
                "global field {zg} does not match d_global = {}",
                self.spec.d_global
            )));
        }
        if zl != Shape4::new(1, self.spec.d_local, zg.height, zg.width) {
            return Err(Error::Dimension(format!(
                "local field {zl} does not match global field {zg} with d_local = {}",
                self.spec.d_local
            )));
        }
        Ok(())
    }

    /// Plane-wave channels `sin(k_i · (λ, μ) + φ_i)` with wave numbers
    /// `k = MLP(Z^g)` per position. `origin` is the absolute lattice
    /// coordinate of `zg`'s first row and column.
    pub fn periodic_basis<T: Scalar>(
        &self,
        zg: &Tensor4<T>,
        phases: &[f64],
        origin: (usize, usize),
    ) -> Result<Tensor4<T>> {
        self.periodic_basis_with(&self.cast_params(), zg, phases, origin)
    }

    fn periodic_basis_with<T: Scalar>(
        &self,
        p: &CastParams<T>,
        zg: &Tensor4<T>,
        phases: &[f64],
        origin: (usize, usize),
    ) -> Result<Tensor4<T>> {
        let s = zg.shape();
        self.check_phases(phases)?;
        if phases.is_empty() {
            return Ok(Tensor4::zeros(Shape4::new(s.batch, 0, s.height, s.width)));
        }
        let hidden = kernels::conv2d(zg, &p.w1, Some(&p.b1), POINTWISE)?;
        let hidden = kernels::activate(&hidden, Activation::Relu);
        let k = kernels::conv2d(&hidden, &p.w2, Some(&p.b2), POINTWISE)?;
        kernels::plane_wave(&k, phases, origin)
    }

    /// Renders a full latent state.
    pub fn forward<T: Scalar>(&self, latent: &LatentState) -> Result<Tensor4<T>> {
        self.forward_fields(&latent.zg.cast(), &latent.zl.cast(), &latent.phases, (0, 0))
    }

    /// Renders a (sub-)lattice whose top-left position sits at `origin` in
    /// absolute lattice coordinates.
    pub fn forward_fields<T: Scalar>(
        &self,
        zg: &Tensor4<T>,
        zl: &Tensor4<T>,
        phases: &[f64],
        origin: (usize, usize),
    ) -> Result<Tensor4<T>> {
        self.require_calibrated()?;
        self.check_fields(zg.shape(), zl.shape())?;
        let p = self.cast_params::<T>();
        let zp = self.periodic_basis_with(&p, zg, phases, origin)?;
        let mut x = kernels::concat_channels(&[zg, zl, &zp])?;
        let geom = self.spec.layer_geom();
        for (i, (w, b)) in p.convs.iter().enumerate() {
            x = kernels::conv_transpose2d(&x, w, Some(b), geom)?;
            x = match self.affines.get(i) {
                Some(affine) => kernels::activate(&affine.apply(&x)?, Activation::Relu),
                None => kernels::activate(&x, Activation::Tanh),
            };
        }
        if !x.is_finite() {
            return Err(Error::Numeric("generator output is not finite".into()));
        }
        Ok(x)
    }

    /// Post-normalization, pre-relu activations of every hidden layer.
    pub fn hidden_activations<T: Scalar>(&self, latent: &LatentState) -> Result<Vec<Tensor4<T>>> {
        self.require_calibrated()?;
        let p = self.cast_params::<T>();
        let zg = latent.zg.cast();
        let zp = self.periodic_basis_with(&p, &zg, &latent.phases, (0, 0))?;
        let mut x = kernels::concat_channels(&[&zg, &latent.zl.cast(), &zp])?;
        let geom = self.spec.layer_geom();
        let mut out = Vec::new();
        for (i, affine) in self.affines.iter().enumerate() {
            let (w, b) = &p.convs[i];
            x = kernels::conv_transpose2d(&x, w, Some(b), geom)?;
            x = affine.apply(&x)?;
            out.push(x.clone());
            x = kernels::activate(&x, Activation::Relu);
        }
        Ok(out)
    }

    /// Records the forward pass on `tape`. Generator weights enter as
    /// constants; gradients flow to `zg` (also through the wave-number MLP)
    /// and `zl`.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        zg: Var,
        zl: Var,
        phases: &[f64],
        origin: (usize, usize),
    ) -> Result<Var> {
        self.require_calibrated()?;
        self.check_fields(tape.value(zg).shape(), tape.value(zl).shape())?;
        let p = self.cast_params::<T>();
        self.check_phases(phases)?;
        let mut parts = vec![zg, zl];
        if self.spec.d_periodic > 0 {
            let w1 = tape.constant(p.w1);
            let b1 = tape.constant(channel_vector(&p.b1));
            let w2 = tape.constant(p.w2);
            let b2 = tape.constant(channel_vector(&p.b2));
            let h = tape.conv2d(zg, w1, Some(b1), POINTWISE)?;
            let h = tape.relu(h)?;
            let k = tape.conv2d(h, w2, Some(b2), POINTWISE)?;
            parts.push(tape.plane_wave(k, phases, origin)?);
        }
        let mut x = tape.concat_channels(&parts)?;
        let geom = self.spec.layer_geom();
        for (i, (w, b)) in p.convs.into_iter().enumerate() {
            let w = tape.constant(w);
            let b = tape.constant(channel_vector(&b));
            x = tape.conv_transpose2d(x, w, Some(b), geom)?;
            x = match self.affines.get(i) {
                Some(affine) => {
                    let y = tape.batch_norm_fixed(x, affine.clone())?;
                    tape.relu(y)?
                }
                None => tape.tanh(x)?,
            };
        }
        Ok(x)
    }

    /// Estimated peak bytes of activations for one forward pass over an
    /// `l × m` lattice: the largest input+output pair of any layer.
    pub fn activation_bytes(&self, l: usize, m: usize) -> usize {
        let mut peak = 0;
        let mut channels = self.spec.latent_channels();
        let (mut h, mut w) = (l, m);
        for &out in &self.spec.channels {
            let (oh, ow) = (2 * h, 2 * w);
            peak = peak.max(channels * h * w + out * oh * ow);
            channels = out;
            h = oh;
            w = ow;
        }
        peak * std::mem::size_of::<f32>()
    }
}
