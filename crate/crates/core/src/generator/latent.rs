use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::GeneratorSpec;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// The optimization variable: global field, local field and the fixed
/// phases of the periodic channels, over an `L × M` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// 1 × d_global × L × M
    pub zg: Tensor4<f32>,
    /// 1 × d_local × L × M
    pub zl: Tensor4<f32>,
    /// One phase in [0, 2π) per periodic channel.
    pub phases: Vec<f64>,
}

impl LatentState {
    /// Lattice size `(L, M)`.
    pub fn lattice(&self) -> (usize, usize) {
        let s = self.zg.shape();
        (s.height, s.width)
    }

    /// Draws from the prior: one global vector broadcast over the lattice,
    /// i.i.d. local noise, uniform phases. All fields are uniform on [-1, 1].
    pub fn sample_prior(spec: &GeneratorSpec, l: usize, m: usize, seed: u64) -> Result<Self> {
        if l == 0 || m == 0 {
            return Err(Error::Validation(format!("lattice must be at least 1x1, got {l}x{m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global: Vec<f32> = (0..spec.d_global).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let zg = broadcast_global(&global, l, m);
        let zl_shape = Shape4::new(1, spec.d_local, l, m);
        let zl_data = (0..zl_shape.numel()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let zl = Tensor4::from_vec(zl_shape, zl_data)?;
        let phases = sample_phases(&mut rng, spec.d_periodic);
        Ok(LatentState { zg, zl, phases })
    }

    /// Checks channel counts against `spec`, lattice agreement and the
    /// [-1, 1] box.
    pub fn validate(&self, spec: &GeneratorSpec) -> Result<()> {
        let (l, m) = self.lattice();
        let gs = self.zg.shape();
        let ls = self.zl.shape();
        if gs.batch != 1 || gs.channels != spec.d_global {
            return Err(Error::Dimension(format!(
                "global field {gs} does not match d_global = {}",
                spec.d_global
            )));
        }
        if ls != Shape4::new(1, spec.d_local, l, m) {
            return Err(Error::Dimension(format!(
                "local field {ls} does not match 1x{}x{l}x{m}",
                spec.d_local
            )));
        }
        if self.phases.len() != spec.d_periodic {
            return Err(Error::Dimension(format!(
                "{} phases for {} periodic channels",
                self.phases.len(),
                spec.d_periodic
            )));
        }
        if l == 0 || m == 0 {
            return Err(Error::Validation("empty lattice".into()));
        }
        let outside = |t: &Tensor4<f32>| t.data().iter().any(|v| !(-1.0..=1.0).contains(v));
        if outside(&self.zg) || outside(&self.zl) {
            return Err(Error::Validation("latent values must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// Sub-lattice `[l0, l0+h) × [m0, m0+w)`; phases are shared.
    pub fn window(&self, l0: usize, m0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(LatentState {
            zg: self.zg.window(l0, m0, h, w)?,
            zl: self.zl.window(l0, m0, h, w)?,
            phases: self.phases.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&LatentRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: LatentRecord = serde_json::from_str(text)?;
        rec.try_into()
    }
}

pub(crate) fn broadcast_global(global: &[f32], l: usize, m: usize) -> Tensor4<f32> {
    Tensor4::from_fn(Shape4::new(1, global.len(), l, m), |_, c, _, _| global[c])
}

pub(crate) fn sample_phases(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..TAU)).collect()
}

#[derive(Serialize, Deserialize)]
struct LatentRecord {
    lattice: [usize; 2],
    d_global: usize,
    d_local: usize,
    zg: Vec<f32>,
    zl: Vec<f32>,
    phases: Vec<f64>,
}

impl From<&LatentState> for LatentRecord {
    fn from(s: &LatentState) -> Self {
        let (l, m) = s.lattice();
        LatentRecord {
            lattice: [l, m],
            d_global: s.zg.shape().channels,
            d_local: s.zl.shape().channels,
            zg: s.zg.data().to_vec(),
            zl: s.zl.data().to_vec(),
            phases: s.phases.clone(),
        }
    }
}

impl TryFrom<LatentRecord> for LatentState {
    type Error = Error;

    fn try_from(r: LatentRecord) -> Result<Self> {
        let [l, m] = r.lattice;
        Ok(LatentState {
            zg: Tensor4::from_vec(Shape4::new(1, r.d_global, l, m), r.zg)?,
            zl: Tensor4::from_vec(Shape4::new(1, r.d_local, l, m), r.zl)?,
            phases: r.phases,
        })
    }
}
