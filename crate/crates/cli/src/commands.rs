use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mosaic_core::generator::format::inspect;
use mosaic_core::generator::{receptive_margin, CalibrationConfig, Generator, GeneratorSpec, LatentState};
use mosaic_core::image_io::ImageBuffer;
use mosaic_core::losses::LossEvaluator;
use mosaic_core::optimizer::{explore_inits, optimize, CandidateKind, Status};
use mosaic_core::tiler::{morph_grid, plan_tiles, render_tiled};
use mosaic_core::{Shape4, Tensor4};
use serde::Serialize;

use crate::config::JobConfig;

pub fn load_calibrated(path: &Path) -> Result<Generator> {
    let g = Generator::load(path).with_context(|| format!("loading weights {}", path.display()))?;
    if !g.is_calibrated() {
        bail!(
            "{} has no batch-norm statistics; run `mosaic-engine calibrate --weights {} --out <calibrated.gnsc>` first",
            path.display(),
            path.display()
        );
    }
    Ok(g)
}

/// Loads the content image, cropped to a multiple of the upsampling factor.
pub fn load_content(path: &Path, factor: usize) -> Result<Tensor4<f32>> {
    let img = ImageBuffer::load(path).with_context(|| format!("loading content {}", path.display()))?;
    let cropped = img.center_crop_to_multiple(factor)?;
    if (cropped.width, cropped.height) != (img.width, img.height) {
        warn!(
            "content {}x{} is not a multiple of {factor}; using the centered {}x{} crop",
            img.width, img.height, cropped.width, cropped.height
        );
    }
    Ok(cropped.to_tensor())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Chunk sizes for a lattice; an axis no longer than `chunk` is one span.
fn chunk_for(spec: &GeneratorSpec, lattice: (usize, usize), chunk: usize) -> (usize, usize) {
    let floor = 2 * receptive_margin(spec) + 1;
    let axis = |len: usize| if chunk >= len { chunk.max(floor) } else { chunk };
    (axis(lattice.0), axis(lattice.1))
}

fn render(g: &Generator, latent: &LatentState, chunk: usize, out: &Path) -> Result<()> {
    let (l, m) = latent.lattice();
    let plan = plan_tiles(l, m, chunk_for(g.spec(), (l, m), chunk), g.spec())?;
    info!(
        "rendering {} tile(s), {} bytes of activations per tile ({} monolithic)",
        plan.tiles.len(),
        plan.tile_memory(g),
        plan.monolithic_memory(g)
    );
    render_tiled(g, latent, &plan)?
        .save(out)
        .with_context(|| format!("writing {}", out.display()))
}

/// Optimizes a mosaic and writes the image, its trace CSV and its latent
/// state. Returns the optimizer status.
pub fn mosaic(job: &JobConfig) -> Result<Status> {
    let g = load_calibrated(&job.weights)?;
    let content = load_content(&job.content, g.spec().upsample_factor())?;
    let ev = LossEvaluator::new(&g, &content, &job.loss)?;
    let (l, m) = ev.lattice();
    info!("content lattice {l}x{m}, map {}, alpha_l {}", job.loss.map, job.loss.alpha_l);
    let ex = explore_inits(&ev, &content, job.optimizer.n_init_samples, job.seed, job.optimizer.projection_gain)?;
    let best = ex.best();
    info!("initialization seed {} with loss {:.6}", best.seed, best.terms.total);
    let out = optimize(&ev, &best.latent, &job.optimizer)?;
    info!(
        "{} after {} trace rows: content {:.6}, texture {:.6}, total {:.6}",
        out.status,
        out.trace.records.len(),
        out.terms.content,
        out.terms.texture,
        out.terms.total
    );
    render(&g, &out.latent, job.chunk, &job.out)?;
    out.trace.write_csv(&sibling(&job.out, ".trace.csv"))?;
    write_text(&sibling(&job.out, ".latent.json"), &out.latent.to_json()?)?;
    Ok(out.status)
}

#[derive(Debug, Serialize)]
struct GalleryRecord {
    seed: u64,
    loss: f64,
    file: String,
}

/// Renders every initialization candidate without optimizing and writes a
/// JSON-lines manifest next to them.
pub fn explore(job: &JobConfig) -> Result<()> {
    let g = load_calibrated(&job.weights)?;
    let content = load_content(&job.content, g.spec().upsample_factor())?;
    let ev = LossEvaluator::new(&g, &content, &job.loss)?;
    let ex = explore_inits(&ev, &content, job.gallery, job.seed, job.optimizer.projection_gain)?;
    fs::create_dir_all(&job.out).with_context(|| format!("creating {}", job.out.display()))?;
    let mut manifest = String::new();
    for (i, c) in ex.candidates.iter().enumerate() {
        let name = match c.kind {
            CandidateKind::RandomProjection => format!("candidate-{i:03}"),
            CandidateKind::SingleTexture => "single-texture".to_string(),
        };
        let file = format!("{name}.png");
        render(&g, &c.latent, job.chunk, &job.out.join(&file))?;
        write_text(&job.out.join(format!("{name}.json")), &c.latent.to_json()?)?;
        let record = GalleryRecord {
            seed: c.seed,
            loss: c.terms.total,
            file,
        };
        manifest.push_str(&serde_json::to_string(&record)?);
        manifest.push('\n');
    }
    write_text(&job.out.join("gallery.jsonl"), &manifest)?;
    let best = ex.best();
    println!("best candidate: seed {} loss {:.6}", best.seed, best.terms.total);
    Ok(())
}

pub fn morph(weights: &Path, seeds: &[u64], size: (usize, usize), chunk: usize, noise: u64, out: &Path) -> Result<()> {
    let g = load_calibrated(weights)?;
    let img = morph_grid(&g, seeds, size, chunk_for(g.spec(), size, chunk), noise)?;
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}x{} morph grid to {}", img.width, img.height, out.display());
    Ok(())
}

pub fn calibrate(weights: &Path, cfg: &CalibrationConfig, out: &Path) -> Result<()> {
    let g = Generator::load(weights).with_context(|| format!("loading weights {}", weights.display()))?;
    if g.is_calibrated() {
        info!("{} is already calibrated; recomputing the statistics", weights.display());
    }
    let g = g.calibrate_bn(cfg)?;
    g.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote calibrated weights to {}", out.display());
    Ok(())
}

pub fn inspect_file(weights: &Path, mut w: impl Write) -> Result<()> {
    let bytes = fs::read(weights).with_context(|| format!("reading {}", weights.display()))?;
    let info = inspect(&bytes)?;
    let h = &info.header;
    writeln!(w, "file:        {}", weights.display())?;
    writeln!(w, "kind:        {}", h.kind)?;
    writeln!(w, "creator:     {}", h.creator)?;
    writeln!(w, "calibrated:  {}", h.calibrated)?;
    if let Ok(spec) = serde_json::from_value::<GeneratorSpec>(serde_json::Value::Object(h.spec.clone())) {
        writeln!(w, "depth:       {}", spec.depth)?;
        writeln!(w, "channels:    {:?}", spec.channels)?;
        writeln!(w, "kernel:      {}", spec.kernel)?;
        writeln!(w, "d_global:    {}", spec.d_global)?;
        writeln!(w, "d_local:     {}", spec.d_local)?;
        writeln!(w, "d_periodic:  {}", spec.d_periodic)?;
        writeln!(w, "mlp_hidden:  {}", spec.mlp_hidden)?;
        writeln!(w, "upsampling:  {}x", spec.upsample_factor())?;
        writeln!(
            w,
            "margin:      {} latent positions",
            receptive_margin(&spec)
        )?;
    }
    writeln!(w, "tensors:     {}", h.tensors.len())?;
    writeln!(w, "payload:     {} bytes", info.payload_bytes)?;
    writeln!(w, "checksum:    {:#018x} (verified)", info.checksum)?;
    Ok(())
}

pub fn new_weights(spec: GeneratorSpec, seed: u64, calibration: Option<&CalibrationConfig>, out: &Path) -> Result<()> {
    let mut g = Generator::random(spec, seed)?;
    if let Some(cfg) = calibration {
        g = g.calibrate_bn(cfg)?;
    }
    g.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} weights to {}",
        if g.is_calibrated() { "calibrated random" } else { "random" },
        out.display()
    );
    Ok(())
}

/// Writes a synthetic RGB test card with the given size.
pub fn test_card(width: usize, height: usize, seed: u64, out: &Path) -> Result<()> {
    let f = 0.2 + 0.05 * (seed % 8) as f32;
    let t = Tensor4::from_fn(Shape4::new(1, 3, height, width), |_, c, y, x| {
        let (yf, xf) = (y as f32, x as f32);
        let ramp = [xf / width as f32 - 0.5, yf / height as f32 - 0.5, 0.0][c];
        let stripes = (f * (xf + 0.5 * yf)).sin() * 0.4 * [1.0, 0.6, -0.8][c];
        let checker = if (x / 16 + y / 16) % 2 == 0 { 0.2 } else { -0.2 };
        ramp + stripes + checker
    });
    ImageBuffer::from_tensor(&t)?
        .save(out)
        .with_context(|| format!("writing {}", out.display()))
}
