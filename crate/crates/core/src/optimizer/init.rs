use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, LatentState};
use crate::losses::{LossEvaluator, LossTerms};
use crate::tensor::{Shape4, Tensor4};

/// Mixes a base seed with an index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Overlap weights of `n` output cells over `len` input cells.
fn area_weights(len: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len as f64 / n as f64;
    (0..n)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut j = a.floor() as usize;
            while (j as f64) < b && j < len {
                let overlap = (b.min((j + 1) as f64) - a.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((j, overlap / scale));
                }
                j += 1;
            }
            w
        })
        .collect()
}

/// Area-average resampling of every channel to `l × m`.
pub fn area_resample(image: &Tensor4<f32>, l: usize, m: usize) -> Result<Tensor4<f64>> {
    let s = image.shape();
    if l == 0 || m == 0 || s.height == 0 || s.width == 0 {
        return Err(Error::Validation(format!(
            "cannot resample {s} to {l}x{m}"
        )));
    }
    let rows = area_weights(s.height, l);
    let cols = area_weights(s.width, m);
    Ok(Tensor4::from_fn(
        Shape4::new(s.batch, s.channels, l, m),
        |n, c, y, x| {
            let plane = image.plane(n, c);
            let mut acc = 0.0;
            for &(r, wr) in &rows[y] {
                for &(q, wq) in &cols[x] {
                    acc += wr * wq * plane[r * s.width + q] as f64;
                }
            }
            acc
        },
    ))
}

/// `Z^g = sin(R Î)` per position, with `Î` the content downscaled to the
/// lattice and `R ~ N(0, gain²)` of size `d_g × 3`. The local field and
/// phases come from the prior.
pub fn random_projection_init(
    content: &Tensor4<f32>,
    spec: &GeneratorSpec,
    lattice: (usize, usize),
    seed: u64,
    gain: f64,
) -> Result<LatentState> {
    if content.shape().channels != 3 {
        return Err(Error::Dimension(format!(
            "random projection needs an RGB image, got {}",
            content.shape()
        )));
    }
    let (l, m) = lattice;
    let small = area_resample(content, l, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, gain.abs()).map_err(|e| Error::Validation(e.to_string()))?;
    let r: Vec<[f64; 3]> = (0..spec.d_global)
        .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
        .collect();
    let prior = LatentState::sample_prior(spec, l, m, derive_seed(seed, u64::MAX))?;
    let zg = Tensor4::from_fn(Shape4::new(1, spec.d_global, l, m), |_, c, y, x| {
        let proj: f64 = (0..3).map(|k| r[c][k] * small.get(0, k, y, x)).sum();
        proj.sin() as f32
    });
    Ok(LatentState { zg, ..prior })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    RandomProjection,
    /// A plain prior draw: one texture everywhere.
    SingleTexture,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub seed: u64,
    pub kind: CandidateKind,
    pub terms: LossTerms,
    pub latent: LatentState,
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub candidates: Vec<Candidate>,
    /// Index of the lowest total loss (first on ties).
    pub best: usize,
}

impl Exploration {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// Scores `n` random-projection candidates and one single-texture
/// candidate, with seeds derived from `seed`.
pub fn explore_inits(
    evaluator: &LossEvaluator<'_>,
    content: &Tensor4<f32>,
    n: usize,
    seed: u64,
    gain: f64,
) -> Result<Exploration> {
    if n == 0 {
        return Err(Error::Validation("need at least one initialization sample".into()));
    }
    let spec = evaluator.generator().spec();
    let lattice = evaluator.lattice();
    let candidates = (0..=n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let (kind, latent) = if i < n {
                (
                    CandidateKind::RandomProjection,
                    random_projection_init(content, spec, lattice, s, gain)?,
                )
            } else {
                (
                    CandidateKind::SingleTexture,
                    LatentState::sample_prior(spec, lattice.0, lattice.1, s)?,
                )
            };
            let terms = evaluator.terms(&latent)?;
            Ok(Candidate {
                seed: s,
                kind,
                terms,
                latent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = candidates
        .iter()
        .enumerate()
        .fold(0, |best, (i, c)| {
            if c.terms.total < candidates[best].terms.total {
                i
            } else {
                best
            }
        });
    Ok(Exploration { candidates, best })
}
