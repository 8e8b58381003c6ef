mod common;

use common::{calibrated, random_latent, tiling_check};
use mosaic_core::generator::{receptive_margin, GeneratorSpec};
use mosaic_core::tiler::{morph_grid, plan_tiles, render_tiled, render_tiled_tensor, DEFAULT_CHUNK};
use mosaic_core::Error;

#[test]
fn tiled_matches_monolithic_over_seeds() {
    for seed in 0..10 {
        let r = tiling_check(seed);
        assert!(r.max_diff < 1e-5, "seed {seed}: max diff {}", r.max_diff);
        assert!(r.order_independent, "seed {seed}");
    }
}

#[test]
fn deeper_generator_tiles_seamlessly() {
    let g = calibrated(GeneratorSpec::toy(3), 5);
    let chunk = 2 * receptive_margin(g.spec()) + 1;
    let z = random_latent(g.spec(), 2 * chunk + 2, chunk + 3, 8);
    let plan = plan_tiles(2 * chunk + 2, chunk + 3, (chunk, chunk), g.spec()).unwrap();
    assert_eq!(plan.tiles.len(), 6);
    let tiled = render_tiled_tensor(&g, &z, &plan).unwrap();
    let mono = g.forward::<f32>(&z).unwrap();
    assert!(tiled.max_abs_diff(&mono).unwrap() < 1e-5);
}

#[test]
fn single_tile_is_bit_identical() {
    let g = calibrated(GeneratorSpec::toy(2), 2);
    let z = random_latent(g.spec(), 9, 7, 1);
    let plan = plan_tiles(9, 7, (9, 7), g.spec()).unwrap();
    let tiled = render_tiled_tensor(&g, &z, &plan).unwrap();
    assert_eq!(tiled.data(), g.forward::<f32>(&z).unwrap().data());
}

#[test]
fn four_tiles_halve_peak_memory() {
    let g = calibrated(GeneratorSpec::default(), 1);
    let plan = plan_tiles(2 * DEFAULT_CHUNK, 2 * DEFAULT_CHUNK, (DEFAULT_CHUNK, DEFAULT_CHUNK), g.spec()).unwrap();
    assert_eq!(plan.tiles.len(), 4);
    let (tile, mono) = (plan.tile_memory(&g), plan.monolithic_memory(&g));
    assert!((tile as f64) < 0.5 * mono as f64, "{tile} vs {mono}");
}

#[test]
fn plan_partitions_output() {
    let spec = GeneratorSpec::default();
    let m = receptive_margin(&spec);
    let plan = plan_tiles(64, 40, (32, 32), &spec).unwrap();
    let (h, w) = plan.output_size();
    assert_eq!((h, w), (64 * 32, 40 * 32));
    let mut cover = vec![0u8; h * w];
    for t in &plan.tiles {
        for y in t.dest.0..t.dest.0 + t.crop.height {
            for x in t.dest.1..t.dest.1 + t.crop.width {
                cover[y * w + x] += 1;
            }
        }
        let (c, win) = (t.core, t.window);
        assert!(c.y0 - win.y0 >= m || win.y0 == 0);
        assert!(c.x0 - win.x0 >= m || win.x0 == 0);
        assert!(win.y0 + win.height - (c.y0 + c.height) >= m || win.y0 + win.height == 64);
        assert!(win.x0 + win.width - (c.x0 + c.width) >= m || win.x0 + win.width == 40);
    }
    assert!(cover.iter().all(|&c| c == 1));
}

#[test]
fn mismatched_plan_is_rejected() {
    let g = calibrated(GeneratorSpec::toy(2), 3);
    let chunk = 2 * receptive_margin(g.spec()) + 1;
    let plan = plan_tiles(chunk, chunk, (chunk, chunk), g.spec()).unwrap();
    let z = random_latent(g.spec(), chunk + 1, chunk, 0);
    assert!(matches!(render_tiled(&g, &z, &plan), Err(Error::Dimension(_))));
    assert!(matches!(
        plan_tiles(8, 8, (1, 1), g.spec()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn morph_grid_size() {
    let g = calibrated(GeneratorSpec::toy(2), 4);
    let img = morph_grid(&g, &[1, 2, 3, 4], (12, 10), (8, 8), 0).unwrap();
    assert_eq!((img.height, img.width), (48, 40));
    assert!(morph_grid(&g, &[1, 2], (4, 4), (8, 8), 0).is_err());
}
