//! Fixtures, finite-difference oracles and scaled experiments shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::time::Instant;

use mosaic_core::generator::format::{decode_generator, fnv1a, WeightFileError};
use mosaic_core::generator::{
    manifest, receptive_margin, CalibrationConfig, Generator, GeneratorSpec, LatentState,
};
use mosaic_core::kernels::{self, ChannelAffine, ConvGeom};
use mosaic_core::losses::{
    Correspondence, CorrespondenceMap, FeatureExtractor, FeatureExtractorSpec, KdeConfig, LossConfig,
    LossEvaluator, PairDistance, ReferenceDensity, TextureLoss,
};
use mosaic_core::optimizer::{explore_inits, optimize_observed, OptimizerConfig, Status};
use mosaic_core::tape::{Tape, Var};
use mosaic_core::tiler::{plan_tiles, render_tiled_in_order, render_tiled_tensor};
use mosaic_core::{Result, Shape4, Tensor4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Depth-2 generator used by the scaled experiments: 64×64 content maps to
/// a 16×16 lattice.
pub fn toy_spec() -> GeneratorSpec {
    GeneratorSpec {
        depth: 2,
        channels: vec![32, 3],
        kernel: 5,
        d_global: 8,
        d_local: 64,
        d_periodic: 2,
        mlp_hidden: 16,
        ..GeneratorSpec::default()
    }
}

pub fn calibrated(spec: GeneratorSpec, seed: u64) -> Generator {
    Generator::random(spec, seed)
        .unwrap()
        .calibrate_bn(&CalibrationConfig {
            n_samples: 64,
            lattice: 8,
            seed,
            batch_size: 16,
        })
        .unwrap()
}

pub fn toy_generator(seed: u64) -> Generator {
    calibrated(toy_spec(), 100 + seed)
}

/// 64×64 test card: color ramps, oblique stripes and a coarse checker.
pub fn synthetic_content(seed: u64) -> Tensor4<f32> {
    let f = 0.3 + 0.05 * seed as f32;
    Tensor4::from_fn(Shape4::new(1, 3, 64, 64), |_, c, y, x| {
        let (yf, xf) = (y as f32, x as f32);
        let base = [0.5 * (xf / 64.0 - 0.5), 0.4 * (yf / 64.0 - 0.5), 0.0][c];
        let stripes = (f * (xf + 0.5 * yf)).sin() * 0.4;
        let blob = if ((x / 16) + (y / 16)) % 2 == 0 { 0.2 } else { -0.2 };
        base + stripes * [1.0, 0.6, -0.8][c] + blob
    })
}

// ---------------------------------------------------------------------------
// Finite differences

const FD_STEP: f64 = 1e-6;

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a floor for gradients that vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    diff / scale.max(1e-8)
}

/// Central differences of `f` with respect to every element of `x`.
pub fn central_diff(x: &Tensor4<f64>, mut f: impl FnMut(&Tensor4<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = v - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.cases >= 5 && self.worst < self.tol
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Gradient of `mean_sq(op(inputs) − target)` by the tape and by central
/// differences; returns the worst relative error over the inputs.
fn check_op(inputs: &[Tensor4<f64>], op: &Build, target_seed: u64) -> f64 {
    let forward = |xs: &[Tensor4<f64>]| -> Tensor4<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    };
    let out_shape = forward(inputs).shape();
    let target = random_tensor(out_shape, &mut rng(target_seed), -1.0, 1.0);
    let objective = |xs: &[Tensor4<f64>]| -> f64 {
        let out = forward(xs);
        let d = kernels::zip_with(&out, &target, "objective", |a, b| a - b).unwrap();
        kernels::mean_sq(&d).unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = op(&mut tape, &vars).unwrap();
    let t = tape.constant(target.clone());
    let diff = tape.sub(out, t).unwrap();
    let loss = tape.mean_sq(diff).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        let numeric = central_diff(&inputs[k], |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            objective(&xs)
        });
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

fn run_op(name: &str, shapes: usize, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor4<f64>>, Box<Build>)) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..shapes {
        let (inputs, op) = case(&mut r);
        worst = worst.max(check_op(&inputs, op.as_ref(), seed * 1000 + i as u64));
    }
    Check {
        name: name.into(),
        cases: shapes,
        worst,
        tol: 1e-4,
    }
}

fn shape(r: &mut ChaCha8Rng, max_n: usize, max_c: usize, max_hw: usize) -> Shape4 {
    Shape4::new(
        r.random_range(1..=max_n),
        r.random_range(1..=max_c),
        r.random_range(1..=max_hw),
        r.random_range(1..=max_hw),
    )
}

fn unary(f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Box<Build> {
    Box::new(move |t: &mut Tape<f64>, v: &[Var]| f(t, v[0]))
}

/// Finite-difference checks of every differentiable tape primitive on
/// `shapes` random shapes each.
pub fn primitive_checks(shapes: usize) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(run_op("conv_transpose2d", shapes, 1, |r| {
        let (ic, oc) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = r.random_range(1..=5);
        let stride = r.random_range(1..=2);
        let padding = r.random_range(0..=(k - 1) / 2);
        let geom = ConvGeom::new(stride, padding, r.random_range(0..stride));
        let x = random_tensor(Shape4::new(r.random_range(1..=2), ic, r.random_range(2..=4), r.random_range(2..=4)), r, -1.0, 1.0);
        let w = random_tensor(Shape4::new(ic, oc, k, k), r, -0.5, 0.5);
        let op: Box<Build> = Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], None, geom));
        (vec![x, w], op)
    }));
    out.push(run_op("conv_transpose2d+bias", shapes, 2, |r| {
        let (ic, oc) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = 2 * r.random_range(0..=2) + 1;
        let geom = ConvGeom::new(2, (k - 1) / 2, 1);
        let x = random_tensor(Shape4::new(r.random_range(1..=2), ic, r.random_range(1..=3), r.random_range(1..=3)), r, -1.0, 1.0);
        let w = random_tensor(Shape4::new(ic, oc, k, k), r, -0.5, 0.5);
        let b = random_tensor(Shape4::new(1, 1, 1, oc), r, -0.5, 0.5);
        let op: Box<Build> = Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), geom));
        (vec![x, w, b], op)
    }));
    out.push(run_op("conv2d", shapes, 3, |r| {
        let (ic, oc) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let geom = ConvGeom::new(stride, r.random_range(0..=1), 0);
        let hw = r.random_range(k.max(2)..=5);
        let x = random_tensor(Shape4::new(r.random_range(1..=2), ic, hw, hw + 1), r, -1.0, 1.0);
        let w = random_tensor(Shape4::new(oc, ic, k, k), r, -0.5, 0.5);
        let b = random_tensor(Shape4::new(1, 1, 1, oc), r, -0.5, 0.5);
        let op: Box<Build> = Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom));
        (vec![x, w, b], op)
    }));
    out.push(run_op("avg_pool2d", shapes, 4, |r| {
        let k = [1, 2, 4][r.random_range(0..3)];
        let s = shape(r, 2, 3, 2);
        let x = random_tensor(Shape4::new(s.batch, s.channels, s.height * k, s.width * k), r, -1.0, 1.0);
        let op: Box<Build> = Box::new(move |t, v| t.avg_pool2d(v[0], k));
        (vec![x], op)
    }));
    out.push(run_op("batch_norm_fixed", shapes, 5, |r| {
        let s = shape(r, 2, 4, 4);
        let c = s.channels;
        let draw = |r: &mut ChaCha8Rng, lo: f32, hi: f32| (0..c).map(|_| r.random_range(lo..hi)).collect::<Vec<f32>>();
        let (mean, var, gamma, beta) = (draw(r, -0.5, 0.5), draw(r, 0.1, 2.0), draw(r, 0.5, 1.5), draw(r, -0.5, 0.5));
        let affine = std::sync::Arc::new(ChannelAffine::from_batch_norm(&mean, &var, &gamma, &beta, 1e-5).unwrap());
        let x = random_tensor(s, r, -1.0, 1.0);
        let op: Box<Build> = Box::new(move |t, v| t.batch_norm_fixed(v[0], affine.clone()));
        (vec![x], op)
    }));
    out.push(run_op("relu", shapes, 6, |r| (vec![random_tensor(shape(r, 2, 3, 4), r, -1.0, 1.0)], unary(Tape::relu))));
    out.push(run_op("tanh", shapes, 7, |r| (vec![random_tensor(shape(r, 2, 3, 4), r, -2.0, 2.0)], unary(Tape::tanh))));
    out.push(run_op("sin", shapes, 8, |r| (vec![random_tensor(shape(r, 2, 3, 4), r, -3.0, 3.0)], unary(Tape::sin))));
    out.push(run_op("plane_wave", shapes, 9, |r| {
        let waves = r.random_range(1..=3);
        let s = shape(r, 2, 1, 4);
        let k = random_tensor(Shape4::new(s.batch, 2 * waves, s.height, s.width), r, -1.0, 1.0);
        let phases: Vec<f64> = (0..waves).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
        let origin = (r.random_range(0..5), r.random_range(0..5));
        let op: Box<Build> = Box::new(move |t, v| t.plane_wave(v[0], &phases, origin));
        (vec![k], op)
    }));
    out.push(run_op("concat_channels", shapes, 10, |r| {
        let s = shape(r, 2, 3, 4);
        let parts = r.random_range(1..=3);
        let xs: Vec<Tensor4<f64>> = (0..parts)
            .map(|_| random_tensor(Shape4::new(s.batch, r.random_range(1..=3), s.height, s.width), r, -1.0, 1.0))
            .collect();
        let op: Box<Build> = Box::new(|t, v| t.concat_channels(v));
        (xs, op)
    }));
    out.push(run_op("channel_mean", shapes, 11, |r| (vec![random_tensor(shape(r, 2, 4, 4), r, -1.0, 1.0)], unary(Tape::channel_mean))));
    out.push(run_op("add", shapes, 12, |r| {
        let s = shape(r, 2, 3, 4);
        let op: Box<Build> = Box::new(|t, v| t.add(v[0], v[1]));
        (vec![random_tensor(s, r, -1.0, 1.0), random_tensor(s, r, -1.0, 1.0)], op)
    }));
    out.push(run_op("sub", shapes, 13, |r| {
        let s = shape(r, 2, 3, 4);
        let op: Box<Build> = Box::new(|t, v| t.sub(v[0], v[1]));
        (vec![random_tensor(s, r, -1.0, 1.0), random_tensor(s, r, -1.0, 1.0)], op)
    }));
    out.push(run_op("scale", shapes, 14, |r| {
        let f = r.random_range(-3.0..3.0);
        let op: Box<Build> = Box::new(move |t, v| t.scale(v[0], f));
        (vec![random_tensor(shape(r, 2, 3, 4), r, -1.0, 1.0)], op)
    }));
    out.push(run_op("mean_sq", shapes, 15, |r| (vec![random_tensor(shape(r, 2, 3, 4), r, -1.0, 1.0)], unary(Tape::mean_sq))));
    out
}

fn small_generator(seed: u64) -> Generator {
    Generator::random(GeneratorSpec::toy(2), seed)
        .unwrap()
        .calibrate_bn(&CalibrationConfig {
            n_samples: 16,
            lattice: 4,
            seed,
            batch_size: 8,
        })
        .unwrap()
}

/// Finite-difference checks of the content, texture and total losses on
/// `shapes` random configurations each.
pub fn loss_checks(shapes: usize) -> Vec<Check> {
    let mut r = rng(77);
    let fx = FeatureExtractor::random(
        FeatureExtractorSpec {
            in_channels: 3,
            channels: vec![4, 5],
            kernel: 3,
        },
        5,
    )
    .unwrap();
    let maps = |i: usize| -> Correspondence {
        match i % 5 {
            0 => Correspondence::identity(),
            1 => CorrespondenceMap::Downscale(2).prepare().unwrap(),
            2 => CorrespondenceMap::LumaDownscale(4).prepare().unwrap(),
            3 => Correspondence::features(fx.clone(), 2).unwrap(),
            _ => CorrespondenceMap::Downscale(4).prepare().unwrap(),
        }
    };
    let mut content_worst = 0.0f64;
    let mut total_worst = 0.0f64;
    for i in 0..shapes {
        let g = small_generator(i as u64);
        let (l, m) = (r.random_range(2..=4), r.random_range(2..=4));
        let img = random_tensor(Shape4::new(1, 3, 4 * l, 4 * m), &mut r, -0.8, 0.8).cast::<f32>();
        let z = LatentState::sample_prior(g.spec(), l, m, i as u64).unwrap();
        let (zg, zl) = (z.zg.cast::<f64>(), z.zl.cast::<f64>());
        for (alpha, worst) in [(0.0, &mut content_worst), (5.0, &mut total_worst)] {
            let cfg = LossConfig {
                alpha_l: alpha,
                ..LossConfig::default()
            };
            let ev = LossEvaluator::with_map(&g, &img, &cfg, maps(i)).unwrap();
            let res = ev.evaluate_fields(&zg, &zl, &z.phases).unwrap();
            let ng = central_diff(&zg, |p| ev.evaluate_fields(p, &zl, &z.phases).unwrap().terms.total);
            let nl = central_diff(&zl, |p| ev.evaluate_fields(&zg, p, &z.phases).unwrap().terms.total);
            *worst = worst.max(rel_err(res.zg.data(), &ng)).max(rel_err(res.zl.data(), &nl));
        }
    }
    let texture = TextureLoss::new(&KdeConfig::default()).unwrap();
    let mut texture_worst = 0.0f64;
    for i in 0..shapes {
        let (l, m, d) = if i == 0 {
            (4, 4, 8)
        } else {
            (r.random_range(2..=5), r.random_range(2..=5), r.random_range(1..=10))
        };
        let z = random_tensor(Shape4::new(1, d, l, m), &mut r, -1.0, 1.0);
        let (_, grad) = texture.value_and_grad(&z).unwrap();
        let numeric = central_diff(&z, |p| texture.value(p).unwrap());
        texture_worst = texture_worst.max(rel_err(grad.data(), &numeric));
    }
    let check = |name: &str, worst| Check {
        name: name.into(),
        cases: shapes,
        worst,
        tol: 1e-3,
    };
    vec![
        check("content loss", content_worst),
        check("texture loss", texture_worst),
        check("total loss", total_worst),
    ]
}

// ---------------------------------------------------------------------------
// Scaled experiments

pub struct KdeDescent {
    pub initial: f64,
    pub last: f64,
    /// First step at which the distance fell below 20% of `initial`.
    pub reached: Option<usize>,
    pub seconds: f64,
}

pub const KDE_DESCENT_RATE: f64 = 1e-3;

/// Gradient descent on the pair-sample distance to the smoothed prior,
/// starting from 100 points of a tight Gaussian cluster off the center.
pub fn kde_descent(seed: u64, steps: usize) -> KdeDescent {
    let t0 = Instant::now();
    let reference = ReferenceDensity::new(&KdeConfig::default()).unwrap();
    let dist = PairDistance::new(&reference, 0.1);
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.15).unwrap();
    let mut xs: Vec<f64> = (0..100).map(|_| 0.4 + noise.sample(&mut r)).collect();
    let mut ys: Vec<f64> = (0..100).map(|_| -0.3 + noise.sample(&mut r)).collect();
    let initial = dist.value(&xs, &ys);
    let mut reached = None;
    let mut last = initial;
    for step in 0..=steps {
        let (v, gx, gy) = dist.value_and_grad(&xs, &ys);
        last = v;
        if reached.is_none() && v < 0.2 * initial {
            reached = Some(step);
        }
        if step == steps {
            break;
        }
        for i in 0..xs.len() {
            xs[i] -= KDE_DESCENT_RATE * gx[i];
            ys[i] -= KDE_DESCENT_RATE * gy[i];
        }
    }
    KdeDescent {
        initial,
        last,
        reached,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub latent: LatentState,
    pub content: f64,
    pub texture: f64,
    pub status: Status,
    /// Contract violations seen by the observer: iterates outside the box
    /// or accepted losses that did not strictly decrease.
    pub violations: Vec<String>,
}

/// Optimizes and watches every iterate for box feasibility and strict
/// decrease of the accepted losses.
pub fn watched_run(ev: &LossEvaluator<'_>, init: &LatentState, cfg: &OptimizerConfig) -> RunSummary {
    let mut violations = Vec::new();
    let mut last_accepted = f64::INFINITY;
    let out = optimize_observed(ev, init, cfg, |lat, rec| {
        if let Some(v) = lat.zg.data().iter().chain(lat.zl.data()).find(|v| !(v.abs() <= 1.0)) {
            violations.push(format!("iter {}: value {v} outside [-1, 1]", rec.iter));
        }
        if rec.accepted {
            if !(rec.total < last_accepted) {
                violations.push(format!(
                    "iter {}: accepted loss {} after {last_accepted}",
                    rec.iter, rec.total
                ));
            }
            last_accepted = rec.total;
        }
    })
    .unwrap();
    RunSummary {
        texture: ev.texture_loss().value(&out.latent.zl).unwrap(),
        latent: out.latent,
        content: out.terms.content,
        status: out.status,
        violations,
    }
}

/// The three paired runs for one seed: (i) global field only, (ii) both
/// fields without texture term, (iii) both fields with `alpha_l = 5`. All
/// start from the same explored initialization.
pub fn paired_runs(seed: u64) -> [RunSummary; 3] {
    let g = toy_generator(seed);
    let img = synthetic_content(seed);
    let cfg = |alpha: f64| LossConfig {
        alpha_l: alpha,
        ..LossConfig::default()
    };
    let plain = LossEvaluator::new(&g, &img, &cfg(0.0)).unwrap();
    let init = explore_inits(&plain, &img, 20, seed, 3.0).unwrap().best().latent.clone();
    let textured = LossEvaluator::new(&g, &img, &cfg(5.0)).unwrap();
    let opt = |local: bool| OptimizerConfig {
        optimize_local: local,
        seed,
        ..OptimizerConfig::default()
    };
    [
        watched_run(&plain, &init, &opt(false)),
        watched_run(&plain, &init, &opt(true)),
        watched_run(&textured, &init, &opt(true)),
    ]
}

/// Block sums of the squared discrete Laplacian of the channel-mean image.
pub fn laplacian_energy(image: &Tensor4<f32>, block: usize) -> Vec<f64> {
    let s = image.shape();
    let (h, w) = (s.height, s.width);
    let luma = |y: usize, x: usize| (0..s.channels).map(|c| image.get(0, c, y, x) as f64).sum::<f64>() / s.channels as f64;
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let mut e = vec![0.0; bh * bw];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let l = luma(y - 1, x) + luma(y + 1, x) + luma(y, x - 1) + luma(y, x + 1) - 4.0 * luma(y, x);
            e[(y / block) * bw + x / block] += l * l;
        }
    }
    e
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub const ABLATION_FACTORS: [usize; 3] = [1, 4, 16];
pub const ENERGY_BLOCK: usize = 8;

pub struct Ablation {
    /// Content loss after 16× average pooling, per downscale factor.
    pub coarse_loss: [f64; 3],
    /// Correlation of output and content Laplacian energy maps.
    pub transfer: [f64; 3],
}

/// Optimizes with identity, 4× and 16× downscale maps from a shared
/// initialization.
pub fn map_ablation(seed: u64) -> Ablation {
    let g = toy_generator(seed);
    let img = synthetic_content(seed);
    let plain = LossEvaluator::new(
        &g,
        &img,
        &LossConfig {
            alpha_l: 0.0,
            ..LossConfig::default()
        },
    )
    .unwrap();
    let init = explore_inits(&plain, &img, 20, seed, 3.0).unwrap().best().latent.clone();
    let coarse = |t: &Tensor4<f32>| kernels::avg_pool2d(t, 16).unwrap();
    let target = coarse(&img);
    let content_energy = laplacian_energy(&img, ENERGY_BLOCK);
    let mut coarse_loss = [0.0; 3];
    let mut transfer = [0.0; 3];
    for (i, &k) in ABLATION_FACTORS.iter().enumerate() {
        let map = if k == 1 {
            CorrespondenceMap::Identity
        } else {
            CorrespondenceMap::Downscale(k)
        };
        let ev = LossEvaluator::new(
            &g,
            &img,
            &LossConfig {
                map,
                ..LossConfig::default()
            },
        )
        .unwrap();
        let out = watched_run(&ev, &init, &OptimizerConfig { seed, ..OptimizerConfig::default() });
        let rendered = g.forward::<f32>(&out.latent).unwrap();
        let d = kernels::zip_with(&coarse(&rendered), &target, "coarse", |a, b| a - b).unwrap();
        coarse_loss[i] = kernels::mean_sq(&d).unwrap();
        transfer[i] = pearson(&laplacian_energy(&rendered, ENERGY_BLOCK), &content_energy);
    }
    Ablation {
        coarse_loss,
        transfer,
    }
}

// ---------------------------------------------------------------------------
// Tiling

pub struct TilingCheck {
    /// Worst tiled-vs-monolithic difference over the 2×2 and 3×1 tilings.
    pub max_diff: f64,
    /// Every tested execution order produced identical bytes.
    pub order_independent: bool,
}

/// Fully random latent state (global field not broadcast).
pub fn random_latent(spec: &GeneratorSpec, l: usize, m: usize, seed: u64) -> LatentState {
    let mut r = rng(seed);
    let mut z = LatentState::sample_prior(spec, l, m, seed).unwrap();
    z.zg = Tensor4::from_fn(z.zg.shape(), |_, _, _, _| r.random_range(-1.0..=1.0));
    z
}

/// Renders a depth-2 toy latent tiled 2×2 and 3×1 and compares against the
/// monolithic forward; the 2×2 plan is also rendered in several orders.
pub fn tiling_check(seed: u64) -> TilingCheck {
    let g = calibrated(GeneratorSpec::toy(2), 300 + seed);
    let chunk = 2 * receptive_margin(g.spec()) + 3;
    let mut max_diff = 0.0f64;
    let mut order_independent = true;
    for (ty, tx) in [(2, 2), (3, 1)] {
        let (l, m) = (ty * chunk - 1, tx * chunk);
        let z = random_latent(g.spec(), l, m, seed);
        let mono = g.forward::<f32>(&z).unwrap();
        let plan = plan_tiles(l, m, (chunk, chunk), g.spec()).unwrap();
        assert_eq!(plan.tiles.len(), ty * tx);
        let tiled = render_tiled_tensor(&g, &z, &plan).unwrap();
        max_diff = max_diff.max(tiled.max_abs_diff(&mono).unwrap());

        let n = plan.tiles.len();
        let mut orders: Vec<Vec<usize>> = vec![(0..n).rev().collect()];
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(&mut rng(seed));
        orders.push(shuffled);
        for order in orders {
            let again = render_tiled_in_order(&g, &z, &plan, &order).unwrap();
            let same = again.data().iter().zip(tiled.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            order_independent &= same;
        }
    }
    TilingCheck {
        max_diff,
        order_independent,
    }
}

// ---------------------------------------------------------------------------
// Weight files

pub struct FormatCase {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Byte offset in `bytes` where the payload of a generator file starts.
pub fn payload_offset(bytes: &[u8]) -> usize {
    12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize
}

/// Save/load/save byte identity plus the magic, truncation and checksum
/// corruptions, on a calibrated depth-5 generator.
pub fn weight_format_cases(dir: &std::path::Path) -> Vec<FormatCase> {
    let g = calibrated(GeneratorSpec::toy(5), 77);
    let first = dir.join("first.gnsc");
    let second = dir.join("second.gnsc");
    g.save(&first).unwrap();
    let loaded = Generator::load(&first).unwrap();
    loaded.save(&second).unwrap();
    let bytes = std::fs::read(&first).unwrap();
    let identical = bytes == std::fs::read(&second).unwrap() && loaded.weights() == g.weights();
    let mut cases = vec![FormatCase {
        name: "round trip",
        passed: identical,
        detail: format!("{} bytes", bytes.len()),
    }];

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"GNSX");
    let r = decode_generator(&magic);
    cases.push(FormatCase {
        name: "magic",
        passed: matches!(r, Err(mosaic_core::Error::WeightFile(WeightFileError::BadMagic(_)))),
        detail: describe(&r),
    });

    // keep only the first four layers' tensors, re-checksummed
    let offset = payload_offset(&bytes);
    let kept: usize = manifest(g.spec())
        .iter()
        .take_while(|(name, _)| !name.starts_with("conv4"))
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    let mut short = bytes[..offset + kept].to_vec();
    let sum = fnv1a(&short[offset..]);
    short.extend_from_slice(&sum.to_le_bytes());
    let r = decode_generator(&short);
    cases.push(FormatCase {
        name: "truncation",
        passed: matches!(r, Err(mosaic_core::Error::WeightFile(WeightFileError::Truncated(_)))),
        detail: describe(&r),
    });

    let mut flipped = bytes.clone();
    flipped[offset + kept / 2] ^= 0x10;
    let r = decode_generator(&flipped);
    cases.push(FormatCase {
        name: "checksum",
        passed: matches!(r, Err(mosaic_core::Error::WeightFile(WeightFileError::Checksum { .. }))),
        detail: describe(&r),
    });
    cases
}

fn describe<T>(r: &Result<T>) -> String {
    match r {
        Ok(_) => "decoded without error".into(),
        Err(e) => e.to_string(),
    }
}
