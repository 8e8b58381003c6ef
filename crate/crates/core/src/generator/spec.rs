use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;

fn default_bn_eps() -> f64 {
    1e-5
}

/// Architecture of the fully convolutional texture generator.
///
/// The latent tensor has `d_global + d_local + d_periodic` channels; each of
/// the `depth` transposed convolutions doubles the spatial size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub depth: usize,
    /// Output channels of every layer; the last entry is 3 (RGB).
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub d_global: usize,
    pub d_local: usize,
    pub d_periodic: usize,
    pub mlp_hidden: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            depth: 5,
            channels: vec![64, 32, 16, 8, 3],
            kernel: 5,
            d_global: 20,
            d_local: 36,
            d_periodic: 4,
            mlp_hidden: 60,
            bn_eps: default_bn_eps(),
        }
    }
}

impl GeneratorSpec {
    /// Small architecture for tests and desk-scale experiments.
    pub fn toy(depth: usize) -> Self {
        let mut channels = vec![16; depth.saturating_sub(1)];
        channels.push(3);
        GeneratorSpec {
            depth,
            channels,
            kernel: 5,
            d_global: 4,
            d_local: 8,
            d_periodic: 2,
            mlp_hidden: 8,
            bn_eps: default_bn_eps(),
        }
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.depth
    }

    pub fn latent_channels(&self) -> usize {
        self.d_global + self.d_local + self.d_periodic
    }

    /// Input channel count of layer `i`.
    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.latent_channels()
        } else {
            self.channels[layer - 1]
        }
    }

    /// Geometry shared by every layer: stride 2 with padding and output
    /// padding chosen so the layer exactly doubles its input.
    pub fn layer_geom(&self) -> ConvGeom {
        let padding = (self.kernel - 1) / 2;
        ConvGeom::new(2, padding, 2 + 2 * padding - self.kernel)
    }

    /// Output image size (height, width) for an `l × m` latent lattice,
    /// computed without allocating.
    pub fn output_size(&self, l: usize, m: usize) -> (usize, usize) {
        let geom = self.layer_geom();
        let (mut h, mut w) = (l, m);
        for _ in 0..self.depth {
            h = geom.transposed_len(h, self.kernel).unwrap_or(0);
            w = geom.transposed_len(w, self.kernel).unwrap_or(0);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.depth < 1 {
            return fail("generator depth must be at least 1".into());
        }
        if self.depth > 16 {
            return fail(format!("generator depth {} is unreasonably large", self.depth));
        }
        if self.channels.len() != self.depth {
            return fail(format!(
                "channels lists {} layers but depth is {}",
                self.channels.len(),
                self.depth
            ));
        }
        if self.channels.last() != Some(&3) {
            return fail("the last layer must produce 3 channels".into());
        }
        if self.channels.contains(&0) {
            return fail("layer channel counts must be positive".into());
        }
        if self.kernel < 1 {
            return fail("kernel size must be positive".into());
        }
        if self.d_global < 1 {
            return fail("d_global must be at least 1".into());
        }
        if self.d_periodic > 0 && self.mlp_hidden == 0 {
            return fail("periodic channels need a non-empty MLP hidden layer".into());
        }
        if !(self.bn_eps >= 0.0 && self.bn_eps.is_finite()) {
            return fail(format!("bn_eps must be non-negative, got {}", self.bn_eps));
        }
        Ok(())
    }
}
