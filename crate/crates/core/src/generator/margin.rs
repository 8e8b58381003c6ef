use super::spec::GeneratorSpec;

/// Geometry of one upsampling transposed convolution that scales its input
/// by exactly `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Latent positions beyond a chunk that can influence that chunk's pixels.
///
/// A tile renders its latent window in isolation, so every intermediate
/// activation a crop pixel depends on must lie inside the window's footprint
/// at that level. The dependency interval of one latent position's pixels is
/// propagated back through the stack and compared with the footprint of a
/// window padded by `m` at every level.
pub fn receptive_margin(spec: &GeneratorSpec) -> usize {
    let geom = spec.layer_geom();
    let layers = vec![
        LayerGeom {
            kernel: spec.kernel,
            stride: geom.stride,
            padding: geom.padding,
        };
        spec.depth
    ];
    receptive_margin_of_layers(&layers)
}

pub fn receptive_margin_of_layers(layers: &[LayerGeom]) -> usize {
    let mut scales = vec![1i64];
    for l in layers {
        scales.push(scales.last().unwrap() * l.stride as i64);
    }
    // dependency interval of the crop [0, S_D) at each level, top down
    let mut lo = 0i64;
    let mut hi = scales[layers.len()] - 1;
    let mut margin = 0i64;
    for (j, l) in layers.iter().enumerate().rev() {
        let (k, s, p) = (l.kernel as i64, l.stride as i64, l.padding as i64);
        lo = (lo + p - k + 1).div_euclid(s) + i64::from((lo + p - k + 1).rem_euclid(s) != 0);
        hi = (hi + p).div_euclid(s);
        // footprint of window [-m, m] at level j is [-m S_j, (m + 1) S_j - 1]
        let scale = scales[j];
        let left = (-lo + scale - 1).div_euclid(scale);
        let right = (hi + 1 + scale - 1).div_euclid(scale) - 1;
        margin = margin.max(left).max(right);
    }
    margin as usize
}
