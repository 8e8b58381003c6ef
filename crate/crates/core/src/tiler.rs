//! Chunked rendering of large latent lattices.
//!
//! Each tile renders its chunk plus a margin of neighboring latent positions
//! and keeps only the chunk's pixels. Because the generator is local, the
//! kept pixels equal those of a single full-size forward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{receptive_margin, Generator, GeneratorSpec, LatentState};
use crate::image_io::ImageBuffer;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    /// Latent positions this tile is responsible for.
    pub core: Rect,
    /// Latent positions rendered: the core grown by the margin, clamped to
    /// the lattice.
    pub window: Rect,
    /// Pixels kept, relative to the window's rendered output.
    pub crop: Rect,
    /// Where the crop lands in the full output.
    pub dest: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub lattice: (usize, usize),
    pub chunk: (usize, usize),
    pub margin: usize,
    pub factor: usize,
    pub tiles: Vec<Tile>,
}

fn spans(len: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..len)
        .step_by(chunk)
        .map(|s| (s, chunk.min(len - s)))
        .collect()
}

/// Splits an `l × m` lattice into chunks of at most `chunk` positions per
/// axis. Chunks must exceed twice the receptive margin.
pub fn plan_tiles(l: usize, m: usize, chunk: (usize, usize), spec: &GeneratorSpec) -> Result<TilePlan> {
    let margin = receptive_margin(spec);
    if l == 0 || m == 0 {
        return Err(Error::Validation(format!("lattice must be non-empty, got {l}x{m}")));
    }
    if chunk.0 < 2 * margin + 1 || chunk.1 < 2 * margin + 1 {
        return Err(Error::Validation(format!(
            "chunk {}x{} is too small for receptive margin {margin}; need at least {}",
            chunk.0,
            chunk.1,
            2 * margin + 1
        )));
    }
    let factor = spec.upsample_factor();
    let mut tiles = Vec::new();
    for &(y0, h) in &spans(l, chunk.0) {
        for &(x0, w) in &spans(m, chunk.1) {
            let wy0 = y0.saturating_sub(margin);
            let wx0 = x0.saturating_sub(margin);
            let wy1 = (y0 + h + margin).min(l);
            let wx1 = (x0 + w + margin).min(m);
            tiles.push(Tile {
                core: Rect {
                    y0,
                    x0,
                    height: h,
                    width: w,
                },
                window: Rect {
                    y0: wy0,
                    x0: wx0,
                    height: wy1 - wy0,
                    width: wx1 - wx0,
                },
                crop: Rect {
                    y0: (y0 - wy0) * factor,
                    x0: (x0 - wx0) * factor,
                    height: h * factor,
                    width: w * factor,
                },
                dest: (y0 * factor, x0 * factor),
            });
        }
    }
    Ok(TilePlan {
        lattice: (l, m),
        chunk,
        margin,
        factor,
        tiles,
    })
}

impl TilePlan {
    pub fn output_size(&self) -> (usize, usize) {
        (self.lattice.0 * self.factor, self.lattice.1 * self.factor)
    }

    /// Peak activation bytes of the largest tile.
    pub fn tile_memory(&self, generator: &Generator) -> usize {
        self.tiles
            .iter()
            .map(|t| generator.activation_bytes(t.window.height, t.window.width))
            .max()
            .unwrap_or(0)
    }

    /// Peak activation bytes of rendering the lattice in one pass.
    pub fn monolithic_memory(&self, generator: &Generator) -> usize {
        generator.activation_bytes(self.lattice.0, self.lattice.1)
    }
}

fn render_tile(generator: &Generator, latent: &LatentState, tile: &Tile) -> Result<Tensor4<f32>> {
    let w = tile.window;
    let part = latent.window(w.y0, w.x0, w.height, w.width)?;
    let out = generator.forward_fields(&part.zg, &part.zl, &part.phases, (w.y0, w.x0))?;
    let c = tile.crop;
    out.window(c.y0, c.x0, c.height, c.width)
}

fn check(generator: &Generator, latent: &LatentState, plan: &TilePlan) -> Result<()> {
    if latent.lattice() != plan.lattice {
        return Err(Error::Dimension(format!(
            "plan covers {:?} but the latent lattice is {:?}",
            plan.lattice,
            latent.lattice()
        )));
    }
    if plan.factor != generator.spec().upsample_factor() {
        return Err(Error::Dimension("plan was made for a different generator depth".into()));
    }
    Ok(())
}

/// Renders all tiles in parallel and assembles the output tensor.
pub fn render_tiled_tensor(generator: &Generator, latent: &LatentState, plan: &TilePlan) -> Result<Tensor4<f32>> {
    check(generator, latent, plan)?;
    let parts = plan
        .tiles
        .par_iter()
        .map(|t| render_tile(generator, latent, t))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = plan.output_size();
    let mut out = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for (tile, part) in plan.tiles.iter().zip(&parts) {
        out.paste(part, tile.dest.0, tile.dest.1)?;
    }
    Ok(out)
}

/// Renders tiles one at a time in the given order.
pub fn render_tiled_in_order(
    generator: &Generator,
    latent: &LatentState,
    plan: &TilePlan,
    order: &[usize],
) -> Result<Tensor4<f32>> {
    check(generator, latent, plan)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..plan.tiles.len()).collect::<Vec<_>>() {
        return Err(Error::Validation("tile order must be a permutation of the plan's tiles".into()));
    }
    let (h, w) = plan.output_size();
    let mut out = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for &i in order {
        let tile = &plan.tiles[i];
        out.paste(&render_tile(generator, latent, tile)?, tile.dest.0, tile.dest.1)?;
    }
    Ok(out)
}

pub fn render_tiled(generator: &Generator, latent: &LatentState, plan: &TilePlan) -> Result<ImageBuffer> {
    ImageBuffer::from_tensor(&render_tiled_tensor(generator, latent, plan)?)
}

/// Latent state whose global field blends four corner vectors bilinearly
/// (corners ordered top-left, top-right, bottom-left, bottom-right). The
/// local field and phases are drawn from the prior with `seed`.
pub fn morph_latent(
    spec: &GeneratorSpec,
    corners: &[Vec<f32>; 4],
    l: usize,
    m: usize,
    seed: u64,
) -> Result<LatentState> {
    if corners.iter().any(|c| c.len() != spec.d_global) {
        return Err(Error::Dimension(format!(
            "corner vectors must have d_global = {} entries",
            spec.d_global
        )));
    }
    let prior = LatentState::sample_prior(spec, l, m, seed)?;
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let [tl, tr, bl, br] = corners;
    let zg = Tensor4::from_fn(Shape4::new(1, spec.d_global, l, m), |_, c, y, x| {
        let (u, v) = (frac(y, l), frac(x, m));
        let (a, b, d, e) = (tl[c] as f64, tr[c] as f64, bl[c] as f64, br[c] as f64);
        (a + u * (d - a) + v * (b - a) + u * v * (e - d - b + a)) as f32
    });
    Ok(LatentState { zg, ..prior })
}

/// Global vectors for morph corners from 1 or 4 seeds.
pub fn corner_vectors(spec: &GeneratorSpec, seeds: &[u64]) -> Result<[Vec<f32>; 4]> {
    let draw = |s: u64| -> Result<Vec<f32>> {
        Ok(LatentState::sample_prior(spec, 1, 1, s)?.zg.into_vec())
    };
    match seeds {
        [s] => {
            let v = draw(*s)?;
            Ok([v.clone(), v.clone(), v.clone(), v])
        }
        [a, b, c, d] => Ok([draw(*a)?, draw(*b)?, draw(*c)?, draw(*d)?]),
        _ => Err(Error::Validation(format!(
            "morph needs 1 or 4 corner seeds, got {}",
            seeds.len()
        ))),
    }
}

/// Renders a morph grid between the textures of the corner seeds.
pub fn morph_grid(
    generator: &Generator,
    seeds: &[u64],
    lattice: (usize, usize),
    chunk: (usize, usize),
    noise_seed: u64,
) -> Result<ImageBuffer> {
    let spec = generator.spec();
    let corners = corner_vectors(spec, seeds)?;
    let latent = morph_latent(spec, &corners, lattice.0, lattice.1, noise_seed)?;
    let plan = plan_tiles(lattice.0, lattice.1, chunk, spec)?;
    render_tiled(generator, &latent, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_plan() {
        let spec = GeneratorSpec::toy(2);
        let p = plan_tiles(8, 8, (8, 8), &spec).unwrap();
        assert_eq!(p.tiles.len(), 1);
        let t = p.tiles[0];
        assert_eq!(t.crop, Rect { y0: 0, x0: 0, height: 32, width: 32 });
    }

    #[test]
    fn crops_partition_output() {
        let spec = GeneratorSpec::toy(2);
        let p = plan_tiles(13, 7, (5, 5), &spec).unwrap();
        let (h, w) = p.output_size();
        let mut hit = vec![0u8; h * w];
        for t in &p.tiles {
            for y in 0..t.crop.height {
                for x in 0..t.crop.width {
                    hit[(t.dest.0 + y) * w + t.dest.1 + x] += 1;
                }
            }
        }
        assert!(hit.iter().all(|&c| c == 1));
    }

    #[test]
    fn chunk_below_margin_is_rejected() {
        let spec = GeneratorSpec::toy(2);
        assert!(matches!(plan_tiles(8, 8, (4, 8), &spec), Err(Error::Validation(_))));
    }

    #[test]
    fn morph_corners_are_exact() {
        let spec = GeneratorSpec::toy(2);
        let c = corner_vectors(&spec, &[1, 2, 3, 4]).unwrap();
        let z = morph_latent(&spec, &c, 5, 6, 0).unwrap();
        for ch in 0..spec.d_global {
            assert_eq!(z.zg.get(0, ch, 0, 0), c[0][ch]);
            assert_eq!(z.zg.get(0, ch, 0, 5), c[1][ch]);
            assert_eq!(z.zg.get(0, ch, 4, 0), c[2][ch]);
            assert_eq!(z.zg.get(0, ch, 4, 5), c[3][ch]);
        }
    }

    #[test]
    fn equal_corners_give_constant_field() {
        let spec = GeneratorSpec::toy(2);
        let c = corner_vectors(&spec, &[9]).unwrap();
        let z = morph_latent(&spec, &c, 4, 4, 0).unwrap();
        for ch in 0..spec.d_global {
            assert!(z.zg.plane(0, ch).iter().all(|&v| v == c[0][ch]));
        }
    }
}
