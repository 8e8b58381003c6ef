//! Job settings: built-in defaults, overridden by a JSON file, overridden by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mosaic_core::losses::{CorrespondenceMap, LossConfig};
use mosaic_core::optimizer::OptimizerConfig;
use mosaic_core::tiler::DEFAULT_CHUNK;
use serde::{Deserialize, Serialize};

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobFile {
    pub weights: Option<PathBuf>,
    pub content: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss: Option<LossConfig>,
    pub optimizer: Option<OptimizerConfig>,
    pub chunk: Option<usize>,
    pub seed: Option<u64>,
    pub gallery: Option<usize>,
}

impl JobFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line; `None` defers to the file or default.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub weights: Option<PathBuf>,
    pub content: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub map: Option<CorrespondenceMap>,
    pub alpha_l: Option<f64>,
    pub iters: Option<usize>,
    pub init_samples: Option<usize>,
    pub seed: Option<u64>,
    pub chunk: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub weights: PathBuf,
    pub content: PathBuf,
    pub out: PathBuf,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub chunk: usize,
    pub seed: u64,
    pub gallery: usize,
}

impl JobConfig {
    pub fn resolve(file: Option<JobFile>, cli: Overrides) -> Result<Self> {
        let file = file.unwrap_or_default();
        let mut loss = file.loss.unwrap_or_default();
        let mut optimizer = file.optimizer.unwrap_or_default();
        if let Some(map) = cli.map {
            loss.map = map;
        }
        if let Some(a) = cli.alpha_l {
            loss.alpha_l = a;
        }
        if let Some(n) = cli.iters {
            optimizer.max_iters = n;
        }
        if let Some(n) = cli.init_samples {
            optimizer.n_init_samples = n;
        }
        let seed = cli.seed.or(file.seed).unwrap_or(optimizer.seed);
        optimizer.seed = seed;
        let gallery = file.gallery.unwrap_or(optimizer.n_init_samples);

        let weights = cli.weights.or(file.weights).context("no weights file given (--weights)")?;
        let content = cli.content.or(file.content).context("no content image given (--content)")?;
        let out = cli.out.or(file.out).context("no output path given (--out)")?;
        for (what, path) in [("weights file", &weights), ("content image", &content)] {
            if !path.is_file() {
                bail!("{what} {} does not exist", path.display());
            }
        }
        let chunk = cli.chunk.or(file.chunk).unwrap_or(DEFAULT_CHUNK);
        if chunk == 0 {
            bail!("--chunk must be positive");
        }
        loss.validate()?;
        optimizer.validate()?;
        if optimizer.n_init_samples == 0 {
            bail!("--init-samples must be at least 1");
        }
        Ok(JobConfig {
            weights,
            content,
            out,
            loss,
            optimizer,
            chunk,
            seed,
            gallery,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(dir: &Path) -> (PathBuf, PathBuf) {
        let w = dir.join("w.gnsc");
        let c = dir.join("c.png");
        fs::write(&w, b"x").unwrap();
        fs::write(&c, b"x").unwrap();
        (w, c)
    }

    #[test]
    fn cli_overrides_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = paths(dir.path());
        let file: JobFile = serde_json::from_value(serde_json::json!({
            "weights": w,
            "content": c,
            "out": "from-file.png",
            "loss": {"alpha_l": 2.0, "map": "down4"},
            "optimizer": {"max_iters": 12},
            "seed": 7
        }))
        .unwrap();
        let job = JobConfig::resolve(
            Some(file.clone()),
            Overrides {
                alpha_l: Some(0.5),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(job.loss.alpha_l, 0.5);
        assert_eq!(job.loss.map, CorrespondenceMap::Downscale(4));
        assert_eq!(job.optimizer.max_iters, 12);
        assert_eq!(job.optimizer.n_init_samples, 20);
        assert_eq!((job.seed, job.optimizer.seed), (7, 7));
        assert_eq!(job.chunk, DEFAULT_CHUNK);
        assert_eq!(job.out, PathBuf::from("from-file.png"));

        let job = JobConfig::resolve(
            Some(file),
            Overrides {
                iters: Some(3),
                seed: Some(1),
                out: Some("cli.png".into()),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!((job.optimizer.max_iters, job.seed), (3, 1));
        assert_eq!(job.out, PathBuf::from("cli.png"));
    }

    #[test]
    fn missing_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (w, _) = paths(dir.path());
        let err = JobConfig::resolve(
            None,
            Overrides {
                weights: Some(w),
                content: Some(dir.path().join("nope.png")),
                out: Some("o.png".into()),
                ..Overrides::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not exist"));
        assert!(JobConfig::resolve(None, Overrides::default()).is_err());
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(serde_json::from_str::<JobFile>(r#"{"iterations": 3}"#).is_err());
    }
}
