use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::format::{self, WeightFileError};
use crate::kernels::{self, Activation, ConvGeom};
use crate::tape::{channel_vector, Tape, Var};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const FEATURE_EXTRACTOR_KIND: &str = "feature_extractor";

/// The image transform `φ` under which content and output are compared.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CorrespondenceMap {
    #[default]
    Identity,
    /// Average pooling by a power-of-two factor.
    Downscale(usize),
    /// Channel mean after downscaling.
    LumaDownscale(usize),
    /// Activations of layer `layer` (1-based) of a conv stack loaded from a
    /// weight file.
    Features { path: PathBuf, layer: usize },
}

fn parse_factor(s: &str, text: &str) -> Result<usize> {
    let k: usize = s
        .parse()
        .map_err(|_| Error::Validation(format!("bad downscale factor in map {text:?}")))?;
    if k == 0 || !k.is_power_of_two() {
        return Err(Error::Validation(format!(
            "downscale factor must be a power of two, got {k}"
        )));
    }
    Ok(k)
}

impl FromStr for CorrespondenceMap {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        if text == "identity" {
            return Ok(CorrespondenceMap::Identity);
        }
        if text == "luma" {
            return Ok(CorrespondenceMap::LumaDownscale(1));
        }
        if let Some(k) = text.strip_prefix("luma-down") {
            return Ok(CorrespondenceMap::LumaDownscale(parse_factor(k, text)?));
        }
        if let Some(k) = text.strip_prefix("down") {
            return Ok(CorrespondenceMap::Downscale(parse_factor(k, text)?));
        }
        if let Some(rest) = text.strip_prefix("features:") {
            let (path, layer) = rest.rsplit_once(':').ok_or_else(|| {
                Error::Validation(format!("feature map {text:?} must look like features:PATH:LAYER"))
            })?;
            let layer = layer
                .parse()
                .map_err(|_| Error::Validation(format!("bad layer index in map {text:?}")))?;
            return Ok(CorrespondenceMap::Features {
                path: PathBuf::from(path),
                layer,
            });
        }
        Err(Error::Validation(format!(
            "unknown correspondence map {text:?}; expected identity, downK, luma-downK or features:PATH:LAYER"
        )))
    }
}

impl fmt::Display for CorrespondenceMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrespondenceMap::Identity => write!(f, "identity"),
            CorrespondenceMap::Downscale(k) => write!(f, "down{k}"),
            CorrespondenceMap::LumaDownscale(k) => write!(f, "luma-down{k}"),
            CorrespondenceMap::Features { path, layer } => {
                write!(f, "features:{}:{layer}", path.display())
            }
        }
    }
}

impl TryFrom<String> for CorrespondenceMap {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CorrespondenceMap> for String {
    fn from(m: CorrespondenceMap) -> String {
        m.to_string()
    }
}

impl CorrespondenceMap {
    /// Loads any weights the map needs.
    pub fn prepare(&self) -> Result<Correspondence> {
        let stage = match self {
            CorrespondenceMap::Identity => Stage::Pool(1, false),
            CorrespondenceMap::Downscale(k) => Stage::Pool(*k, false),
            CorrespondenceMap::LumaDownscale(k) => Stage::Pool(*k, true),
            CorrespondenceMap::Features { path, layer } => {
                return Correspondence::features(FeatureExtractor::load(path)?, *layer);
            }
        };
        Ok(Correspondence { stage })
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Pool(usize, bool),
    Features(Arc<FeatureExtractor>, usize),
}

/// A ready-to-apply correspondence map.
#[derive(Clone, Debug)]
pub struct Correspondence {
    stage: Stage,
}

impl Correspondence {
    pub fn identity() -> Self {
        Correspondence {
            stage: Stage::Pool(1, false),
        }
    }

    /// Activations after `layer` (1-based) of a feature extractor.
    pub fn features(fx: FeatureExtractor, layer: usize) -> Result<Self> {
        if layer == 0 || layer > fx.depth() {
            return Err(Error::Validation(format!(
                "feature layer {layer} out of range 1..={}",
                fx.depth()
            )));
        }
        Ok(Correspondence {
            stage: Stage::Features(Arc::new(fx), layer),
        })
    }

    fn check_divisible(&self, s: Shape4) -> Result<()> {
        if let Stage::Pool(k, _) = self.stage {
            if !s.height.is_multiple_of(k) || !s.width.is_multiple_of(k) {
                return Err(Error::Dimension(format!(
                    "image {}x{} is not divisible by the downscale factor {k}",
                    s.height, s.width
                )));
            }
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_divisible(image.shape())?;
        match &self.stage {
            Stage::Pool(k, luma) => {
                let x = if *k > 1 {
                    kernels::avg_pool2d(image, *k)?
                } else {
                    image.clone()
                };
                Ok(if *luma { kernels::channel_mean(&x) } else { x })
            }
            Stage::Features(fx, layer) => fx.forward(image, *layer),
        }
    }

    pub fn apply_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        self.check_divisible(tape.value(image).shape())?;
        match &self.stage {
            Stage::Pool(k, luma) => {
                let x = if *k > 1 { tape.avg_pool2d(image, *k)? } else { image };
                if *luma {
                    tape.channel_mean(x)
                } else {
                    Ok(x)
                }
            }
            Stage::Features(fx, layer) => fx.forward_on_tape(tape, image, *layer),
        }
    }
}

/// Architecture of a user-supplied feature extractor: stride-2
/// convolutions with "same" padding, each followed by relu.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    #[serde(default = "rgb")]
    pub in_channels: usize,
    /// Output channels per layer.
    pub channels: Vec<usize>,
    pub kernel: usize,
}

fn rgb() -> usize {
    3
}

impl FeatureExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Validation(
                "feature extractor needs at least one layer and positive channel counts".into(),
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "feature extractor kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![cout, cin, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        out
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom::new(2, self.kernel / 2, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub spec: FeatureExtractorSpec,
    /// (weight (out, in, k, k), bias) per layer.
    pub layers: Vec<(Tensor4<f32>, Vec<f32>)>,
}

impl FeatureExtractor {
    pub fn random(spec: FeatureExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = spec.in_channels;
        for &cout in &spec.channels {
            let fan_in = (cin * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = Shape4::new(cout, cin, spec.kernel, spec.kernel);
            let w = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
            layers.push((Tensor4::from_vec(shape, w)?, vec![0.0; cout]));
            cin = cout;
        }
        Ok(FeatureExtractor { spec, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<T: Scalar>(&self, image: &Tensor4<T>, layer: usize) -> Result<Tensor4<T>> {
        let mut x = image.clone();
        for (w, b) in &self.layers[..layer] {
            let b: Vec<T> = b.iter().map(|&v| T::from_f64(v as f64)).collect();
            x = kernels::conv2d(&x, &w.cast(), Some(&b), self.spec.geom())?;
            x = kernels::activate(&x, Activation::Relu);
        }
        Ok(x)
    }

    pub fn forward_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, image: Var, layer: usize) -> Result<Var> {
        let mut x = image;
        for (w, b) in &self.layers[..layer] {
            let b: Vec<T> = b.iter().map(|&v| T::from_f64(v as f64)).collect();
            let w = tape.constant(w.cast());
            let b = tape.constant(channel_vector(&b));
            x = tape.conv2d(x, w, Some(b), self.spec.geom())?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors: Vec<&[f32]> = self
            .layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect();
        format::encode(FEATURE_EXTRACTOR_KIND, &self.spec, &self.spec.manifest(), &tensors, true)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = format::read_header(bytes)?;
        let spec: FeatureExtractorSpec = format::parse_spec(&header, FEATURE_EXTRACTOR_KIND)?;
        spec.validate()
            .map_err(|e| WeightFileError::Header(e.to_string()))?;
        let entries = spec.manifest();
        let mut tensors = format::read_payload(bytes, &header, offset, &entries)?.into_iter();
        let mut layers = Vec::new();
        for pair in entries.chunks(2) {
            let d = &pair[0].1;
            let w = Tensor4::from_vec(Shape4::new(d[0], d[1], d[2], d[3]), tensors.next().unwrap())?;
            layers.push((w, tensors.next().unwrap()));
        }
        Ok(FeatureExtractor { spec, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn string_forms_round_trip() {
        for s in ["identity", "down4", "down16", "down64", "luma-down4", "features:/a/b.gnsc:2"] {
            let m: CorrespondenceMap = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("luma".parse::<CorrespondenceMap>().unwrap(), CorrespondenceMap::LumaDownscale(1));
        for bad in ["down3", "down0", "blur", "features:x"] {
            assert!(bad.parse::<CorrespondenceMap>().is_err(), "{bad}");
        }
    }

    #[test]
    fn serde_uses_string_form() {
        let m = CorrespondenceMap::LumaDownscale(4);
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"luma-down4\"");
        let back: CorrespondenceMap = serde_json::from_str("\"down16\"").unwrap();
        assert_eq!(back, CorrespondenceMap::Downscale(16));
    }

    #[test]
    fn luma_of_reversed_pixel() {
        let a = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.3f64, 0.6, 0.9]).unwrap();
        let b = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.9f64, 0.6, 0.3]).unwrap();
        let c = CorrespondenceMap::LumaDownscale(1).prepare().unwrap();
        let d = kernels::mean_sq(&kernels::zip_with(&c.apply(&a).unwrap(), &c.apply(&b).unwrap(), "sub", |x, y| x - y).unwrap()).unwrap();
        assert!(d.abs() < 1e-30);
    }

    #[test]
    fn indivisible_downscale() {
        let c = CorrespondenceMap::Downscale(4).prepare().unwrap();
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 3, 6, 8));
        assert!(matches!(c.apply(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn feature_extractor_file_round_trip() {
        let spec = FeatureExtractorSpec {
            in_channels: 3,
            channels: vec![4, 6],
            kernel: 3,
        };
        let fx = FeatureExtractor::random(spec, 1).unwrap();
        let back = FeatureExtractor::decode(&fx.encode()).unwrap();
        assert_eq!(back, fx);
        let x = Tensor4::<f32>::full(Shape4::new(1, 3, 8, 8), 0.5);
        assert_eq!(fx.forward(&x, 2).unwrap().shape(), Shape4::new(1, 6, 2, 2));
    }

    #[test]
    fn generator_file_is_not_a_feature_extractor() {
        let spec = crate::generator::GeneratorSpec::toy(1);
        let w = crate::generator::GeneratorWeights::random(&spec, 1).unwrap();
        let bytes = format::encode_generator(&spec, &w);
        assert!(matches!(
            FeatureExtractor::decode(&bytes),
            Err(Error::WeightFile(WeightFileError::Header(_)))
        ));
    }
}
