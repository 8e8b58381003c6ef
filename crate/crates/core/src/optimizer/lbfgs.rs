//! Projected limited-memory BFGS on a box.

use std::collections::VecDeque;
use std::time::Instant;

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsSettings {
    pub max_iters: usize,
    pub memory: usize,
    pub tol_grad: f64,
    pub tol_loss_rel: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Projected gradient or relative decrease fell below tolerance.
    Converged,
    MaxIters,
    /// The line search found no acceptable point.
    Stalled,
}

/// A point with its objective value, gradient and caller data.
#[derive(Clone, Debug)]
pub struct Iterate<A> {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub aux: A,
}

/// Report for one iteration, passed to the observer.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub iter: usize,
    pub accepted: bool,
    pub projected_grad_norm: f64,
    pub ms: f64,
}

pub struct LbfgsResult<A> {
    pub best: Iterate<A>,
    pub termination: Termination,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LbfgsSettings {
    fn project(&self, x: &mut [f64], round: impl Fn(f64) -> f64) {
        for v in x {
            *v = round(v.clamp(self.lower, self.upper));
        }
    }

    /// Variables pinned at a bound by a gradient that points outward.
    fn is_pinned(&self, x: f64, g: f64) -> bool {
        (x <= self.lower && g > 0.0) || (x >= self.upper && g < 0.0)
    }

    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .map(|(&xi, &gi)| if self.is_pinned(xi, gi) { 0.0 } else { gi })
            .collect()
    }
}

/// Minimizes `eval` over the box `[lower, upper]^n` starting from `x0`.
///
/// Every iterate passes through `round` after projection, so the stored
/// point is exactly the one that was evaluated (callers storing `f32` pass
/// a rounding function). `observe` is called for the initial point with
/// `iter = 0` and after every iteration.
pub fn minimize<A, F, O>(
    x0: Vec<f64>,
    settings: &LbfgsSettings,
    round: impl Fn(f64) -> f64 + Copy,
    mut eval: F,
    mut observe: O,
) -> Result<LbfgsResult<A>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, A)>,
    O: FnMut(&Iterate<A>, &Step),
{
    if settings.max_iters == 0 || settings.memory == 0 {
        return Err(Error::Validation(
            "max_iters and memory must be at least 1".into(),
        ));
    }
    let start = Instant::now();
    let mut x = x0;
    settings.project(&mut x, round);
    let (f, g, aux) = eval(&x)?;
    if !f.is_finite() {
        return Err(Error::Numeric(format!("initial loss is {f}")));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("initial gradient is not finite".into()));
    }
    let mut cur = Iterate { x, f, g, aux };
    let pg = settings.projected_gradient(&cur.x, &cur.g);
    let mut pg_norm = norm(&pg);
    observe(
        &cur,
        &Step {
            iter: 0,
            accepted: true,
            projected_grad_norm: pg_norm,
            ms: start.elapsed().as_secs_f64() * 1e3,
        },
    );
    if pg_norm < settings.tol_grad {
        return Ok(LbfgsResult {
            best: cur,
            termination: Termination::Converged,
            iterations: 0,
        });
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    for iter in 1..=settings.max_iters {
        let t0 = Instant::now();
        let free: Vec<bool> = cur
            .x
            .iter()
            .zip(&cur.g)
            .map(|(&x, &g)| !settings.is_pinned(x, g))
            .collect();
        let mut d = direction(&cur.g, &free, &history);
        if history.is_empty() || !(dot(&cur.g, &d) < 0.0) {
            let pg = settings.projected_gradient(&cur.x, &cur.g);
            let scale = if history.is_empty() { (1.0 / norm(&pg)).min(1.0) } else { 1.0 };
            d = pg.iter().map(|v| -v * scale).collect();
        }

        let mut step = 1.0;
        let mut next = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut trial: Vec<f64> = cur.x.iter().zip(&d).map(|(x, di)| x + step * di).collect();
            settings.project(&mut trial, round);
            let moved: Vec<f64> = trial.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
            let predicted = dot(&cur.g, &moved);
            if moved.iter().all(|&v| v == 0.0) {
                break;
            }
            match eval(&trial) {
                Ok((f, g, aux)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                    if f < cur.f && f <= cur.f + ARMIJO_C1 * predicted.min(0.0) {
                        next = Some((Iterate { x: trial, f, g, aux }, moved));
                        break;
                    }
                }
                Ok(_) | Err(Error::Numeric(_)) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }

        let Some((new, s)) = next else {
            observe(
                &cur,
                &Step {
                    iter,
                    accepted: false,
                    projected_grad_norm: pg_norm,
                    ms: t0.elapsed().as_secs_f64() * 1e3,
                },
            );
            return Ok(LbfgsResult {
                best: cur,
                termination: Termination::Stalled,
                iterations: iter,
            });
        };

        let y: Vec<f64> = new.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = (cur.f - new.f) / cur.f.abs().max(f64::MIN_POSITIVE);
        cur = new;
        pg_norm = norm(&settings.projected_gradient(&cur.x, &cur.g));
        observe(
            &cur,
            &Step {
                iter,
                accepted: true,
                projected_grad_norm: pg_norm,
                ms: t0.elapsed().as_secs_f64() * 1e3,
            },
        );
        if pg_norm < settings.tol_grad || decrease < settings.tol_loss_rel {
            return Ok(LbfgsResult {
                best: cur,
                termination: Termination::Converged,
                iterations: iter,
            });
        }
    }
    Ok(LbfgsResult {
        best: cur,
        termination: Termination::MaxIters,
        iterations: settings.max_iters,
    })
}

/// Two-loop recursion on the free variables.
fn direction(g: &[f64], free: &[bool], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(&v, &f)| if f { v } else { 0.0 })
        .collect();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += si * (a - b);
        }
    }
    q.iter()
        .zip(free)
        .map(|(&v, &f)| if f { -v } else { 0.0 })
        .collect()
}
