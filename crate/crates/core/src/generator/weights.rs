use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::GeneratorSpec;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// One transposed convolution; weight laid out (in_ch, out_ch, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor4<f32>,
    pub bias: Vec<f32>,
}

/// Batch-norm statistics and affine parameters for one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BatchNormParams {
    fn identity(channels: usize) -> Self {
        BatchNormParams {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Maps global channels to plane-wave numbers: one relu hidden layer, then a
/// linear layer with `2 * d_periodic` outputs. Weights use the (out, in, 1, 1)
/// layout of a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicMlp {
    pub w1: Tensor4<f32>,
    pub b1: Vec<f32>,
    pub w2: Tensor4<f32>,
    pub b2: Vec<f32>,
}

/// Parameters of a generator. `calibrated` is set once fixed batch-norm
/// statistics have been computed from prior samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub convs: Vec<ConvLayer>,
    /// One entry per hidden layer (`depth - 1`); the output layer has none.
    pub norms: Vec<BatchNormParams>,
    pub mlp: PeriodicMlp,
    pub calibrated: bool,
}

/// Tensor names and shapes in file order.
pub fn manifest(spec: &GeneratorSpec) -> Vec<(String, Vec<usize>)> {
    let k = spec.kernel;
    let mut out = Vec::new();
    for i in 0..spec.depth {
        let (cin, cout) = (spec.in_channels(i), spec.channels[i]);
        out.push((format!("conv{i}.weight"), vec![cin, cout, k, k]));
        out.push((format!("conv{i}.bias"), vec![cout]));
        if i + 1 < spec.depth {
            for field in ["mean", "var", "gamma", "beta"] {
                out.push((format!("bn{i}.{field}"), vec![cout]));
            }
        }
    }
    let (h, p2) = (spec.mlp_hidden, 2 * spec.d_periodic);
    out.push(("mlp.w1".into(), vec![h, spec.d_global, 1, 1]));
    out.push(("mlp.b1".into(), vec![h]));
    out.push(("mlp.w2".into(), vec![p2, h, 1, 1]));
    out.push(("mlp.b2".into(), vec![p2]));
    out
}

fn shape4(dims: &[usize]) -> Shape4 {
    Shape4::new(dims[0], dims[1], dims[2], dims[3])
}

impl GeneratorWeights {
    /// Random initialization scaled so each layer roughly preserves
    /// activation variance. Batch-norm statistics are left uncalibrated.
    pub fn random(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |std: f64, n: usize| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng) as f32).collect()
        };
        let k = spec.kernel as f64;
        let mut tensors = Vec::new();
        for (name, dims) in manifest(spec) {
            let n: usize = dims.iter().product();
            let values = if name.ends_with(".weight") {
                // each output pixel of a stride-2 layer sees about k²/4 taps per input channel
                let fan_in = dims[0] as f64 * (k * k / 4.0).max(1.0);
                let last = name == format!("conv{}.weight", spec.depth - 1);
                let gain = if last { 1.0 } else { 2f64.sqrt() };
                normal(gain / fan_in.sqrt(), n)
            } else if name == "mlp.w1" || name == "mlp.w2" {
                normal((2.0 / dims[1].max(1) as f64).sqrt(), n)
            } else if name.ends_with(".var") || name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            tensors.push(values);
        }
        Self::from_tensors(spec, tensors, false)
    }

    /// All-zero parameters with identity batch norm.
    pub fn zeros(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = manifest(spec)
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                if name.ends_with(".var") || name.ends_with(".gamma") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                }
            })
            .collect();
        Self::from_tensors(spec, tensors, false)
    }

    /// Assembles weights from flat tensors in [`manifest`] order.
    pub fn from_tensors(spec: &GeneratorSpec, tensors: Vec<Vec<f32>>, calibrated: bool) -> Result<Self> {
        let entries = manifest(spec);
        if tensors.len() != entries.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors for this architecture, got {}",
                entries.len(),
                tensors.len()
            )));
        }
        for ((name, dims), t) in entries.iter().zip(&tensors) {
            let n: usize = dims.iter().product();
            if t.len() != n {
                return Err(Error::Dimension(format!(
                    "tensor {name} has {} values, expected {n} for shape {dims:?}",
                    t.len()
                )));
            }
        }
        let mut it = entries.into_iter().map(|(_, dims)| dims).zip(tensors);
        let mut next = || it.next().expect("length checked above");
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..spec.depth {
            let (dims, w) = next();
            let weight = Tensor4::from_vec(shape4(&dims), w)?;
            let bias = next().1;
            convs.push(ConvLayer { weight, bias });
            if i + 1 < spec.depth {
                norms.push(BatchNormParams {
                    mean: next().1,
                    var: next().1,
                    gamma: next().1,
                    beta: next().1,
                });
            }
        }
        let (d1, w1) = next();
        let b1 = next().1;
        let (d2, w2) = next();
        let b2 = next().1;
        let mlp = PeriodicMlp {
            w1: Tensor4::from_vec(shape4(&d1), w1)?,
            b1,
            w2: Tensor4::from_vec(shape4(&d2), w2)?,
            b2,
        };
        let weights = GeneratorWeights {
            convs,
            norms,
            mlp,
            calibrated,
        };
        weights.check_variances()?;
        Ok(weights)
    }

    /// Flat tensors in [`manifest`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(conv.weight.data());
            out.push(&conv.bias);
            if let Some(bn) = self.norms.get(i) {
                out.extend([&bn.mean[..], &bn.var, &bn.gamma, &bn.beta]);
            }
        }
        out.extend([self.mlp.w1.data(), &self.mlp.b1, self.mlp.w2.data(), &self.mlp.b2]);
        out
    }

    fn check_variances(&self) -> Result<()> {
        for (i, bn) in self.norms.iter().enumerate() {
            if let Some(v) = bn.var.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Validation(format!(
                    "bn{i}.var contains invalid variance {v}"
                )));
            }
        }
        Ok(())
    }

    /// Resets batch-norm statistics to identity and clears the calibrated flag.
    pub fn uncalibrated(mut self) -> Self {
        for bn in &mut self.norms {
            let fresh = BatchNormParams::identity(bn.mean.len());
            bn.mean = fresh.mean;
            bn.var = fresh.var;
        }
        self.calibrated = false;
        self
    }
}
