use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel density estimation settings for the texture regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    /// Squared bandwidth: the kernel argument is `‖x − τ‖² / sigma`.
    pub sigma: f64,
    /// Evaluation points per axis, spread evenly over [-1, 1] inclusive.
    pub grid: usize,
    /// Lattice offsets `(dλ, dμ)` pairing neighboring positions.
    pub offsets: Vec<(usize, usize)>,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            sigma: 0.1,
            grid: 40,
            offsets: vec![(0, 1), (1, 1), (1, 0)],
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "kde sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.grid < 2 {
            return Err(Error::Validation(format!(
                "kde grid needs at least 2 points per axis, got {}",
                self.grid
            )));
        }
        if self.offsets.is_empty() {
            return Err(Error::Validation("kde offset set is empty".into()));
        }
        for &(dl, dm) in &self.offsets {
            if dl > 1 || dm > 1 || (dl, dm) == (0, 0) {
                return Err(Error::Validation(format!(
                    "kde offset ({dl}, {dm}) must be one of (0,1), (1,0), (1,1)"
                )));
            }
        }
        Ok(())
    }

    /// Grid coordinates along one axis.
    pub fn axis(&self) -> Vec<f64> {
        let step = 2.0 / (self.grid - 1) as f64;
        (0..self.grid).map(|i| -1.0 + step * i as f64).collect()
    }
}

/// `k(u) = exp(-u/2) / (2π)`.
#[inline]
pub fn kernel(u: f64) -> f64 {
    (-0.5 * u).exp() / (2.0 * PI)
}

/// `p̂(τ) = 1/(n σ) Σ_i k(‖x_i − τ‖² / σ)`.
pub fn kde_estimate(points: &[[f64; 2]], tau: [f64; 2], sigma: f64) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - tau[0], p[1] - tau[1]);
            kernel((dx * dx + dy * dy) / sigma)
        })
        .sum();
    sum / (points.len() as f64 * sigma)
}

/// Gradient of [`kde_estimate`] with respect to each point.
pub fn kde_estimate_grad(points: &[[f64; 2]], tau: [f64; 2], sigma: f64) -> Vec<[f64; 2]> {
    let norm = 1.0 / (points.len() as f64 * sigma);
    points
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - tau[0], p[1] - tau[1]);
            let k = kernel((dx * dx + dy * dy) / sigma) * norm;
            [-k * dx / sigma, -k * dy / sigma]
        })
        .collect()
}

/// Density of the uniform prior on [-1, 1]² smoothed by the kernel, on the
/// evaluation grid.
///
/// The kernel is an isotropic Gaussian with per-axis variance `sigma`, so the
/// smoothed density is the product of two 1-D box-Gaussian convolutions,
/// each computed by Simpson quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDensity {
    pub axis: Vec<f64>,
    /// Row-major `grid × grid`, first index along the first coordinate.
    pub values: Vec<f64>,
    /// The 1-D factor: `values[a][b] = marginal[a] · marginal[b]`.
    pub marginal: Vec<f64>,
    sq_norm: f64,
}

const SIMPSON_INTERVALS: usize = 4096;

/// `∫_{-1}^{1} ½ · N(t − x; 0, sigma) dx`.
pub fn smoothed_box_1d(t: f64, sigma: f64) -> f64 {
    let h = 2.0 / SIMPSON_INTERVALS as f64;
    let norm = 0.5 / (2.0 * PI * sigma).sqrt();
    let f = |x: f64| norm * (-(t - x) * (t - x) / (2.0 * sigma)).exp();
    let mut acc = f(-1.0) + f(1.0);
    for i in 1..SIMPSON_INTERVALS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(-1.0 + h * i as f64);
    }
    acc * h / 3.0
}

impl ReferenceDensity {
    pub fn new(cfg: &KdeConfig) -> Result<Self> {
        cfg.validate()?;
        let axis = cfg.axis();
        let marginal: Vec<f64> = axis.iter().map(|&t| smoothed_box_1d(t, cfg.sigma)).collect();
        let values = marginal
            .iter()
            .flat_map(|&a| marginal.iter().map(move |&b| a * b))
            .collect();
        let sq_norm = marginal.iter().map(|v| v * v).sum::<f64>().powi(2);
        Ok(ReferenceDensity {
            axis,
            values,
            marginal,
            sq_norm,
        })
    }

    pub fn grid(&self) -> usize {
        self.axis.len()
    }

    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.grid() + b]
    }
}

/// Squared distance between the pair-sample KDE and the reference,
/// `Σ_τ (p̂(τ) − p_ref(τ))²`, with gradients for both coordinates of every
/// point.
///
/// With kernel tables `P[i][a] = exp(-(x_i − τ_a)² / 2σ)` (and `Q` for the
/// second coordinate), the estimate on the grid is `C PᵀQ` and the reference
/// is `r rᵀ`, so the distance expands to
/// `C² Σ_ij (PPᵀ)_ij (QQᵀ)_ij − 2C Σ_i (P r)_i (Q r)_i + ‖r‖⁴`.
/// Everything but the last sums depends on one coordinate sample only; see
/// [`AxisMoments`].
pub struct PairDistance<'a> {
    reference: &'a ReferenceDensity,
    sigma: f64,
}

/// Gaussian factors of one coordinate sample against the grid axis, and
/// their derivatives with respect to the coordinate.
pub struct AxisTable {
    pub e: Vec<f64>,
    pub de: Vec<f64>,
}

impl AxisTable {
    pub fn new(values: &[f64], axis: &[f64], sigma: f64) -> Self {
        let g = axis.len();
        let mut e = Vec::with_capacity(values.len() * g);
        let mut de = Vec::with_capacity(values.len() * g);
        for &v in values {
            for &t in axis {
                let d = v - t;
                let x = (-d * d / (2.0 * sigma)).exp();
                e.push(x);
                de.push(-x * d / sigma);
            }
        }
        AxisTable { e, de }
    }
}

/// Per-sample quantities the pair distance is built from, for `n` points:
/// `gram = P Pᵀ`, `dgram[i][j] = P'_i · P_j`, `proj = P r`, `dproj = P' r`.
pub struct AxisMoments {
    pub n: usize,
    pub gram: Vec<f64>,
    pub dgram: Vec<f64>,
    pub proj: Vec<f64>,
    pub dproj: Vec<f64>,
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn row(t: &[f64], g: usize, i: usize) -> &[f64] {
    &t[i * g..(i + 1) * g]
}

impl AxisMoments {
    pub fn new(table: &AxisTable, marginal: &[f64], with_grad: bool) -> Self {
        let g = marginal.len();
        let n = table.e.len() / g;
        let gram = mul_transposed(&table.e, &table.e, n, g);
        let proj = (0..n).map(|i| dot(row(&table.e, g, i), marginal)).collect();
        let (dgram, dproj) = if with_grad {
            let dgram = mul_transposed(&table.de, &table.e, n, g);
            let dproj = (0..n).map(|i| dot(row(&table.de, g, i), marginal)).collect();
            (dgram, dproj)
        } else {
            (Vec::new(), Vec::new())
        };
        AxisMoments {
            n,
            gram,
            dgram,
            proj,
            dproj,
        }
    }
}

/// `A Bᵀ` for row-major `n × g` matrices.
fn mul_transposed(a: &[f64], b: &[f64], n: usize, g: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    if n == 0 || g == 0 {
        return out;
    }
    // SAFETY: `a` and `b` hold n·g elements and `out` n·n, laid out with the
    // strides given; B is read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            g,
            n,
            1.0,
            a.as_ptr(),
            g as isize,
            1,
            b.as_ptr(),
            1,
            g as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

impl<'a> PairDistance<'a> {
    pub fn new(reference: &'a ReferenceDensity, sigma: f64) -> Self {
        PairDistance { reference, sigma }
    }

    pub fn table(&self, values: &[f64]) -> AxisTable {
        AxisTable::new(values, &self.reference.axis, self.sigma)
    }

    /// Moments of one coordinate sample; `with_grad` also fills the
    /// derivative parts.
    pub fn moments(&self, values: &[f64], with_grad: bool) -> AxisMoments {
        AxisMoments::new(&self.table(values), &self.reference.marginal, with_grad)
    }

    /// Distance only.
    pub fn value(&self, xs: &[f64], ys: &[f64]) -> f64 {
        self.eval_moments(&self.moments(xs, false), &self.moments(ys, false), false).0
    }

    /// Distance and gradients with respect to `xs` and `ys`.
    pub fn value_and_grad(&self, xs: &[f64], ys: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        self.eval_moments(&self.moments(xs, true), &self.moments(ys, true), true)
    }

    /// Evaluates from the moments of the first (`p`) and second (`q`)
    /// coordinates. Gradients need moments built with `with_grad`.
    pub fn eval_moments(&self, p: &AxisMoments, q: &AxisMoments, with_grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let n = p.n;
        let c = 1.0 / (n as f64 * 2.0 * PI * self.sigma);
        let cross = dot(&p.gram, &q.gram);
        let mixed = dot(&p.proj, &q.proj);
        let value = c * c * cross - 2.0 * c * mixed + self.reference.sq_norm;
        if !with_grad {
            return (value, Vec::new(), Vec::new());
        }
        let grad = |own: &AxisMoments, other: &AxisMoments| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let rows = i * n..(i + 1) * n;
                    2.0 * c * c * dot(&own.dgram[rows.clone()], &other.gram[rows])
                        - 2.0 * c * other.proj[i] * own.dproj[i]
                })
                .collect()
        };
        (value, grad(p, q), grad(q, p))
    }
}
