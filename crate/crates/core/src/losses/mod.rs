//! The mosaic objective: a content term under a correspondence map plus a
//! KDE-based texture regularizer on the local latent field.

pub mod correspondence;
pub mod kde;
pub mod texture;
pub mod total;

pub use correspondence::{Correspondence, CorrespondenceMap, FeatureExtractor, FeatureExtractorSpec};
pub use kde::{
    kde_estimate, kde_estimate_grad, AxisMoments, AxisTable, KdeConfig, PairDistance,
    ReferenceDensity,
};
pub use texture::{texture_loss, TextureLoss};
pub use total::{content_loss, LossConfig, LossEvaluator, LossGrad, LossTerms};
