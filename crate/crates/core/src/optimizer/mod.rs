//! Box-constrained latent optimization: random-projection initialization,
//! multi-start exploration and projected L-BFGS.

mod init;
pub mod lbfgs;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use init::{
    area_resample, derive_seed, explore_inits, random_projection_init, Candidate, CandidateKind,
    Exploration,
};
pub use trace::{RunTrace, TraceRecord};

use crate::error::{Error, Result};
use crate::generator::LatentState;
use crate::losses::{LossEvaluator, LossTerms};
use crate::tensor::Tensor4;
use lbfgs::{LbfgsSettings, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub n_init_samples: usize,
    /// L-BFGS history length.
    pub memory: usize,
    pub tol_grad: f64,
    pub tol_loss_rel: f64,
    /// Include the local field in the variables; otherwise only `Z^g` moves.
    pub optimize_local: bool,
    pub seed: u64,
    /// Standard deviation of the random projection matrix.
    pub projection_gain: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 80,
            n_init_samples: 20,
            memory: 10,
            tol_grad: 1e-6,
            tol_loss_rel: 1e-8,
            optimize_local: true,
            seed: 0,
            projection_gain: 3.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || self.memory < 1 {
            return Err(Error::Validation(
                "max_iters and memory must be at least 1".into(),
            ));
        }
        if !(self.tol_grad >= 0.0) || !(self.tol_loss_rel >= 0.0) {
            return Err(Error::Validation("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIters,
    Stalled,
    NumericError,
}

impl Status {
    /// Whether a run with this status produced a usable result.
    pub fn is_success(self) -> bool {
        matches!(self, Status::Converged | Status::MaxIters)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIters => "max-iters",
            Status::Stalled => "stalled",
            Status::NumericError => "numeric-error",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub latent: LatentState,
    pub terms: LossTerms,
    pub trace: RunTrace,
    pub status: Status,
}

fn flatten(latent: &LatentState, local: bool) -> Vec<f64> {
    let mut x: Vec<f64> = latent.zg.data().iter().map(|&v| v as f64).collect();
    if local {
        x.extend(latent.zl.data().iter().map(|&v| v as f64));
    }
    x
}

fn unflatten(x: &[f64], template: &LatentState, local: bool) -> LatentState {
    let ng = template.zg.numel();
    let to_tensor = |src: &[f64], like: &Tensor4<f32>| {
        Tensor4::from_vec(like.shape(), src.iter().map(|&v| v as f32).collect())
            .expect("sized from template")
    };
    LatentState {
        zg: to_tensor(&x[..ng], &template.zg),
        zl: if local {
            to_tensor(&x[ng..], &template.zl)
        } else {
            template.zl.clone()
        },
        phases: template.phases.clone(),
    }
}

/// Runs projected L-BFGS from `init`; see [`optimize_observed`].
pub fn optimize(
    evaluator: &LossEvaluator<'_>,
    init: &LatentState,
    cfg: &OptimizerConfig,
) -> Result<Outcome> {
    optimize_observed(evaluator, init, cfg, |_, _| {})
}

/// Minimizes the total loss over `[Z^g, Z^l]` (or `Z^g` alone) within
/// `[-1, 1]`. `observe` sees every iterate with its trace row, including
/// the starting point and rejected final steps.
///
/// A non-finite loss or gradient at `init` is a numeric error.
pub fn optimize_observed(
    evaluator: &LossEvaluator<'_>,
    init: &LatentState,
    cfg: &OptimizerConfig,
    mut observe: impl FnMut(&LatentState, &TraceRecord),
) -> Result<Outcome> {
    cfg.validate()?;
    init.validate(evaluator.generator().spec())?;
    let local = cfg.optimize_local;
    let settings = LbfgsSettings {
        max_iters: cfg.max_iters,
        memory: cfg.memory,
        tol_grad: cfg.tol_grad,
        tol_loss_rel: cfg.tol_loss_rel,
        lower: -1.0,
        upper: 1.0,
    };
    let ng = init.zg.numel();
    let mut trace = RunTrace::default();
    let mut report_error = None;
    let result = lbfgs::minimize(
        flatten(init, local),
        &settings,
        |v| v as f32 as f64,
        |x| {
            let latent = unflatten(x, init, local);
            let r = evaluator.evaluate_objective(&latent)?;
            let mut g: Vec<f64> = r.zg.data().iter().map(|&v| v as f64).collect();
            if local {
                g.extend(r.zl.data().iter().map(|&v| v as f64));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let term = if i < ng { "global" } else { "local" };
                return Err(Error::Numeric(format!(
                    "gradient with respect to the {term} field is not finite"
                )));
            }
            Ok((r.terms.total, g, (latent, r.terms)))
        },
        |it, step| {
            let (latent, terms) = &it.aux;
            let texture = if terms.texture.is_nan() {
                match evaluator.texture_of(&latent.zl) {
                    Ok(v) => v,
                    Err(e) => {
                        report_error.get_or_insert(e);
                        f64::NAN
                    }
                }
            } else {
                terms.texture
            };
            let rec = TraceRecord {
                iter: step.iter,
                content: terms.content,
                texture,
                total: terms.total,
                gradnorm: step.projected_grad_norm,
                accepted: step.accepted,
                ms: step.ms,
            };
            trace.records.push(rec);
            observe(latent, &rec);
        },
    )?;
    let status = match result.termination {
        Termination::Converged => Status::Converged,
        Termination::MaxIters => Status::MaxIters,
        Termination::Stalled => Status::Stalled,
    };
    if let Some(e) = report_error {
        return Err(e);
    }
    let (latent, mut terms) = result.best.aux;
    if terms.texture.is_nan() {
        terms.texture = evaluator.texture_of(&latent.zl)?;
    }
    Ok(Outcome {
        latent,
        terms,
        trace,
        status,
    })
}
