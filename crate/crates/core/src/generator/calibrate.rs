use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Generator, LatentState};
use crate::error::{Error, Result};
use crate::kernels::{self, Activation, ChannelAffine};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub n_samples: usize,
    /// Side of the square latent lattice of each prior draw.
    pub lattice: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_samples: 256,
            lattice: 16,
            seed: 0,
            batch_size: 16,
        }
    }
}

/// Per-channel first and second moments of one batch at every hidden layer.
struct BatchMoments {
    count: usize,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

fn stack(samples: &[Tensor4<f32>]) -> Result<Tensor4<f32>> {
    let s = samples[0].shape();
    let mut data = Vec::with_capacity(s.numel() * samples.len());
    for t in samples {
        data.extend_from_slice(t.data());
    }
    Tensor4::from_vec(Shape4::new(samples.len(), s.channels, s.height, s.width), data)
}

fn channel_moments(x: &Tensor4<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.batch * s.plane()) as f64;
    let mut mean = vec![0.0; s.channels];
    let mut var = vec![0.0; s.channels];
    for c in 0..s.channels {
        let mut sum = 0.0;
        for n in 0..s.batch {
            sum += x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for n in 0..s.batch {
            sq += x
                .plane(n, c)
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    (mean, var)
}

impl Generator {
    /// Estimates fixed batch-norm statistics from prior draws.
    ///
    /// Each batch runs in training mode (normalized by its own statistics);
    /// the per-batch moments are pooled into one mean and variance per
    /// channel. Gamma and beta are kept. The result is marked calibrated.
    pub fn calibrate_bn(self, cfg: &CalibrationConfig) -> Result<Generator> {
        if cfg.n_samples < 2 {
            return Err(Error::Validation(format!(
                "calibration needs at least 2 samples, got {}",
                cfg.n_samples
            )));
        }
        if cfg.lattice == 0 || cfg.batch_size == 0 {
            return Err(Error::Validation(
                "calibration lattice and batch size must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let seeds: Vec<u64> = (0..cfg.n_samples).map(|_| rng.random()).collect();
        let batches = seeds
            .par_chunks(cfg.batch_size)
            .map(|chunk| self.batch_moments(chunk, cfg.lattice))
            .collect::<Result<Vec<_>>>()?;

        let total: usize = batches.iter().map(|b| b.count).sum();
        let (spec, mut weights) = self.into_parts();
        for (i, norm) in weights.norms.iter_mut().enumerate() {
            let c = norm.mean.len();
            let mut mean = vec![0.0; c];
            let mut second = vec![0.0; c];
            for b in &batches {
                let w = b.count as f64 / total as f64;
                let (bm, bv) = &b.layers[i];
                for ch in 0..c {
                    mean[ch] += w * bm[ch];
                    second[ch] += w * (bv[ch] + bm[ch] * bm[ch]);
                }
            }
            for ch in 0..c {
                norm.mean[ch] = mean[ch] as f32;
                norm.var[ch] = (second[ch] - mean[ch] * mean[ch]).max(0.0) as f32;
            }
        }
        weights.calibrated = true;
        Generator::new(spec, weights)
    }

    fn batch_moments(&self, seeds: &[u64], lattice: usize) -> Result<BatchMoments> {
        let spec = self.spec();
        let samples = seeds
            .iter()
            .map(|&seed| {
                let z = LatentState::sample_prior(spec, lattice, lattice, seed)?;
                let zp = self.periodic_basis(&z.zg, &z.phases, (0, 0))?;
                kernels::concat_channels(&[&z.zg, &z.zl, &zp])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = stack(&samples)?;
        let geom = spec.layer_geom();
        let w = self.weights();
        let mut layers = Vec::with_capacity(w.norms.len());
        for (conv, bn) in w.convs.iter().zip(&w.norms) {
            x = kernels::conv_transpose2d(&x, &conv.weight, Some(&conv.bias), geom)?;
            let (mean, var) = channel_moments(&x);
            let affine = ChannelAffine {
                scale: var
                    .iter()
                    .zip(&bn.gamma)
                    .map(|(&v, &g)| g as f64 / (v + spec.bn_eps).sqrt())
                    .collect(),
                mean: mean.clone(),
                beta: bn.beta.iter().map(|&b| b as f64).collect(),
            };
            x = kernels::activate(&affine.apply(&x)?, Activation::Relu);
            layers.push((mean, var));
        }
        Ok(BatchMoments {
            count: seeds.len(),
            layers,
        })
    }
}
