//! Conformal factors from Q-curvature data.
//!
//! A metric `g = e^{2u}|dx|^2` on `R^n` is built from a prescribed measure
//! `ρ = Q e^{nu} dx` through the log potential
//!
//! ```text
//! u(x) = (1/c_n) ∫ log(|y| / |x - y|) ρ(y) dy + C,   c_n = 2^{n-2} ((n-2)/2)! π^{n/2}
//! ```
//!
//! and checked against the flat-background equation `(-Δ)^{n/2} u = 2 Q e^{nu}`.
//!
//! Two-dimensional normalisation: with this equation `Q = K/2` where `K` is the
//! Gauss curvature, so `β⁺ < c_2 = π` is the same condition as `∫K⁺ < 2π`.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{laplacian_power, unit_ball_volume, Grid, ScalarField, MAX_DIM};
use crate::paths::{PathGraph, Stencil};

/// `c_n = 2^{n-2} ((n-2)/2)! π^{n/2}` for even `n ≥ 2`.
pub fn sharp_constant(n: usize) -> Result<f64> {
    if n < 2 || n % 2 == 1 {
        return Err(Error::InvalidParameter(format!("sharp constant needs even n >= 2, got {n}")));
    }
    let k = (n - 2) / 2;
    let factorial: f64 = (1..=k).map(|i| i as f64).product();
    Ok(2f64.powi(n as i32 - 2) * factorial * std::f64::consts::PI.powi((n / 2) as i32))
}

/// Mean of `log|z|` over the ball of volume `h^n` centred at the origin.
///
/// This replaces the kernel on the self-cell, where `log|z|` is integrable but
/// not sampleable.
pub fn self_cell_log_mean(dim: usize, spacing: f64) -> f64 {
    let radius = (spacing.powi(dim as i32) / unit_ball_volume(dim)).powf(1.0 / dim as f64);
    radius.ln() - 1.0 / dim as f64
}

/// A mollified point mass: Gaussian of scale `sigma` carrying `mass`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub mass: f64,
    pub sigma: f64,
}

impl Bump {
    pub fn density(&self, x: &[f64]) -> f64 {
        let n = self.center.len() as i32;
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm = (2.0 * std::f64::consts::PI * self.sigma * self.sigma).powi(n).sqrt();
        self.mass / norm * (-0.5 * r2 / (self.sigma * self.sigma)).exp()
    }
}

/// Radial measure density `r ↦ ρ(r)`.
#[derive(Clone)]
pub struct RadialProfile(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for RadialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RadialProfile(..)")
    }
}

#[derive(Debug, Clone)]
pub enum QKind {
    Zero,
    Radial(RadialProfile),
    Bumps(Vec<Bump>),
    /// Density of the measure `Q e^{nu} dx`, sampled on the working grid.
    Gridded(ScalarField),
}

/// Prescribed Q-curvature measure bound to its working grid.
#[derive(Debug, Clone)]
pub struct QSpec {
    grid: Grid,
    kind: QKind,
    totals: OnceLock<(f64, f64)>,
}

impl QSpec {
    pub fn zero(grid: Grid) -> Self {
        Self { grid, kind: QKind::Zero, totals: OnceLock::new() }
    }

    pub fn bumps(grid: Grid, bumps: Vec<Bump>) -> Result<Self> {
        let h = grid.spacing();
        for b in &bumps {
            if b.center.len() != grid.dim() {
                return Err(Error::InvalidParameter("bump centre has the wrong dimension".into()));
            }
            if !(b.mass.is_finite() && b.sigma.is_finite()) {
                return Err(Error::NonIntegrable("bump mass and scale must be finite".into()));
            }
            if b.sigma < 3.0 * h * (1.0 - 1e-12) {
                return Err(Error::Unresolvable(format!("mollifier scale {} is below 3h = {}", b.sigma, 3.0 * h)));
            }
            // 4σ per axis keeps the Gaussian tail below 1e-4 and leaves room for σ ≥ 3h on 33^4 grids
            if b.center.iter().any(|c| c.abs() + 4.0 * b.sigma > grid.halfwidth()) {
                return Err(Error::OutOfBox("bump support must stay inside the box".into()));
            }
        }
        Ok(Self { grid, kind: QKind::Bumps(bumps), totals: OnceLock::new() })
    }

    pub fn radial(grid: Grid, profile: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let at_origin = profile(0.0);
        if !at_origin.is_finite() {
            return Err(Error::NonIntegrable("radial profile is singular at the origin".into()));
        }
        Ok(Self { grid, kind: QKind::Radial(RadialProfile(Arc::new(profile))), totals: OnceLock::new() })
    }

    pub fn gridded(density: ScalarField) -> Self {
        Self { grid: *density.grid(), kind: QKind::Gridded(density), totals: OnceLock::new() }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn kind(&self) -> &QKind {
        &self.kind
    }

    /// Measure density `Q e^{nu}` at node `idx` of the working grid.
    fn density_at_node(&self, idx: usize, x: &[f64]) -> f64 {
        match &self.kind {
            QKind::Zero => 0.0,
            QKind::Radial(p) => (p.0)(x.iter().map(|v| v * v).sum::<f64>().sqrt()),
            QKind::Bumps(bs) => bs.iter().map(|b| b.density(x)).sum(),
            QKind::Gridded(f) => f.get(idx),
        }
    }

    pub fn density_field(&self) -> Result<ScalarField> {
        let mut x = [0.0; MAX_DIM];
        let values: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                self.grid.node_into(i, &mut x);
                self.density_at_node(i, &x[..self.grid.dim()])
            })
            .collect();
        ScalarField::new(self.grid, values)
            .map_err(|_| Error::NonIntegrable("curvature density is not finite on the grid".into()))
    }

    /// `(β⁺, β⁻)`: masses of the positive and negative parts, computed once.
    pub fn total_curvatures(&self) -> Result<(f64, f64)> {
        if let Some(t) = self.totals.get() {
            return Ok(*t);
        }
        let rho = self.density_field()?;
        let (mut pos, mut neg) = (0.0, 0.0);
        for (i, v) in rho.values().iter().enumerate() {
            let w = self.grid.quadrature_weight(i);
            if *v > 0.0 {
                pos += v * w;
            } else {
                neg -= v * w;
            }
        }
        if !(pos.is_finite() && neg.is_finite()) {
            return Err(Error::NonIntegrable("total curvature diverges".into()));
        }
        Ok(*self.totals.get_or_init(|| (pos, neg)))
    }

    /// Quadrature sources `ρ_j w_j` (only nonzero entries).
    fn sources(&self) -> Result<Vec<(usize, f64)>> {
        let rho = self.density_field()?;
        Ok(rho
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, v * self.grid.quadrature_weight(i)))
            .collect())
    }

    /// `∫ log|y| ρ(y) dy`, with the origin cell replaced by its mean.
    fn log_moment(&self, sources: &[(usize, f64)]) -> f64 {
        let self_mean = self_cell_log_mean(self.grid.dim(), self.grid.spacing());
        let origin = self.grid.origin();
        sources
            .iter()
            .map(|&(j, s)| {
                let lj = if j == origin { self_mean } else { crate::grid::norm(&self.grid.node(j)).ln() };
                lj * s
            })
            .sum()
    }

    /// `u(x) - C` at an arbitrary point by direct summation over the sources.
    pub fn potential_at(&self, x: &[f64]) -> Result<f64> {
        let sources = self.sources()?;
        let c = sharp_constant(self.dim())?;
        let moment = self.log_moment(&sources);
        let self_mean = self_cell_log_mean(self.grid.dim(), self.grid.spacing());
        let mut y = [0.0; MAX_DIM];
        let mut conv = 0.0;
        for &(j, s) in &sources {
            self.grid.node_into(j, &mut y);
            let r = crate::grid::distance(x, &y[..self.dim()]);
            let k = if r < 1e-14 { self_mean } else { r.ln() };
            conv += k * s;
        }
        Ok((moment - conv) / c)
    }
}

/// Conformal metric `g = e^{2u}|dx|^2` sampled on a grid.
#[derive(Debug, Clone)]
pub struct ConformalMetric {
    grid: Grid,
    u: ScalarField,
    omega: ScalarField,
    constant: f64,
    curvature: Option<(f64, f64)>,
    paths: OnceLock<PathGraph>,
}

impl ConformalMetric {
    /// Metric with conformal factor `u`; `ω = e^{nu}` is filled in.
    pub fn from_u(u: ScalarField) -> Result<Self> {
        let n = u.grid().dim() as f64;
        let omega = u.map(|v| (n * v).exp())?;
        if omega.values().iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("conformal weight must be positive and finite".into()));
        }
        Ok(Self { grid: *u.grid(), u, omega, constant: 0.0, curvature: None, paths: OnceLock::new() })
    }

    pub fn from_fn(grid: Grid, u: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::from_u(ScalarField::from_fn(grid, u)?)
    }

    pub fn flat(grid: Grid) -> Self {
        Self::from_u(ScalarField::constant(grid, 0.0)).expect("flat metric is valid")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn u(&self) -> &ScalarField {
        &self.u
    }

    pub fn omega(&self) -> &ScalarField {
        &self.omega
    }

    /// The additive constant `C` of the log potential.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// `(β⁺, β⁻)` of the generating measure, when built from one.
    pub fn curvature(&self) -> Option<(f64, f64)> {
        self.curvature
    }

    /// Records `(β⁺, β⁻)` for a metric given directly by its factor.
    pub fn with_curvature(mut self, totals: (f64, f64)) -> Self {
        self.curvature = Some(totals);
        self
    }

    /// Whether `β⁺ < c_n` (true when no generating measure is known).
    pub fn is_subcritical(&self) -> bool {
        match (self.curvature, sharp_constant(self.dim())) {
            (Some((pos, _)), Ok(c)) => pos < c,
            _ => true,
        }
    }

    /// The metric `e^{2(u + shift)}|dx|^2`.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let mut m = Self::from_u(self.u.map(|v| v + shift)?)?;
        m.constant = self.constant + shift;
        m.curvature = self.curvature;
        Ok(m)
    }

    /// Length density `e^u = ω^{1/n}` per node.
    pub fn length_density(&self) -> Vec<f64> {
        self.u.values().iter().map(|v| v.exp()).collect()
    }

    /// Shortest-path graph of `d_g` with the default stencil, built on first use.
    pub fn paths(&self) -> &PathGraph {
        self.paths.get_or_init(|| {
            PathGraph::new(self.grid, self.length_density(), Stencil::default_for(self.dim()))
                .expect("positive finite density")
        })
    }
}

/// Smallest `2m - 1` convolution length; rustfft handles arbitrary sizes.
fn padded_len(m: usize) -> usize {
    2 * m - 1
}

fn fft_axes(data: &mut [Complex<f64>], len: usize, dim: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
    let total = data.len();
    for axis in 0..dim {
        let stride = len.pow((dim - 1 - axis) as u32);
        let block = stride * len;
        // each line is (outer block, inner offset); lines are disjoint, gather/scatter in parallel chunks
        data.par_chunks_mut(block).for_each(|chunk| {
            let mut line = vec![Complex::new(0.0, 0.0); len];
            let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for inner in 0..stride {
                for k in 0..len {
                    line[k] = chunk[inner + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for k in 0..len {
                    chunk[inner + k * stride] = line[k];
                }
            }
        });
        debug_assert_eq!(total % block, 0);
    }
}

/// `Σ_j K(x_i - y_j) s_j` for every node `i`, with `K(z) = log|z|` and the self-cell mean at `z = 0`.
fn log_convolution(grid: &Grid, sources: &[(usize, f64)]) -> Vec<f64> {
    let dim = grid.dim();
    let m = grid.resolution();
    let p = padded_len(m);
    let total = p.pow(dim as u32);
    let h = grid.spacing();
    let self_mean = self_cell_log_mean(dim, h);

    let mut kernel = vec![Complex::new(0.0, 0.0); total];
    kernel.par_iter_mut().enumerate().for_each(|(idx, k)| {
        let mut rem = idx;
        let mut r2 = 0.0;
        for _ in 0..dim {
            let c = rem % p;
            rem /= p;
            let off = if c < m { c as f64 } else { c as f64 - p as f64 };
            r2 += off * off;
        }
        *k = Complex::new(if r2 == 0.0 { self_mean } else { 0.5 * r2.ln() + h.ln() }, 0.0);
    });

    let mut signal = vec![Complex::new(0.0, 0.0); total];
    for &(j, s) in sources {
        let mi = grid.multi_index(j);
        let pos = mi[..dim].iter().fold(0usize, |acc, &i| acc * p + i);
        signal[pos] = Complex::new(s, 0.0);
    }

    fft_axes(&mut kernel, p, dim, false);
    fft_axes(&mut signal, p, dim, false);
    signal.par_iter_mut().zip(kernel.par_iter()).for_each(|(a, b)| *a *= b);
    fft_axes(&mut signal, p, dim, true);

    let scale = 1.0 / total as f64;
    (0..grid.len())
        .map(|i| {
            let mi = grid.multi_index(i);
            let pos = mi[..dim].iter().fold(0usize, |acc, &k| acc * p + k);
            signal[pos].re * scale
        })
        .collect()
}

/// Direct `O(N · sources)` evaluation of the same convolution, used to cross-check the FFT path.
pub fn log_convolution_direct(grid: &Grid, density: &ScalarField) -> Vec<f64> {
    let self_mean = self_cell_log_mean(grid.dim(), grid.spacing());
    let sources: Vec<(Vec<f64>, f64)> = (0..grid.len())
        .filter(|&j| density.get(j) != 0.0)
        .map(|j| (grid.node(j), density.get(j) * grid.quadrature_weight(j)))
        .collect();
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            sources
                .iter()
                .map(|(y, s)| {
                    let r = crate::grid::distance(&x, y);
                    s * if r == 0.0 { self_mean } else { r.ln() }
                })
                .sum()
        })
        .collect()
}

fn potential_field(q: &QSpec, constant: f64) -> Result<Vec<f64>> {
    let c = sharp_constant(q.dim())?;
    let sources = q.sources()?;
    if sources.is_empty() {
        return Ok(vec![constant; q.grid.len()]);
    }
    let moment = q.log_moment(&sources);
    let conv = log_convolution(&q.grid, &sources);
    Ok(conv.into_iter().map(|k| (moment - k) / c + constant).collect())
}

/// Normal-metric conformal factor from curvature data, with additive constant `constant`.
///
/// Supercritical data (`β⁺ ≥ c_n`) is accepted; check [`ConformalMetric::is_subcritical`].
pub fn log_potential_u(q: &QSpec, constant: f64) -> Result<ConformalMetric> {
    let totals = q.total_curvatures()?;
    let values = potential_field(q, constant)?;
    let u = ScalarField::new(q.grid, values)?;
    let mut metric = ConformalMetric::from_u(u)?;
    metric.constant = constant;
    metric.curvature = Some(totals);
    Ok(metric)
}

/// `(-Δ)^{n/2} u / 2`, the measure density `Q e^{nu}`, on the interior band (zero on the rim).
pub fn measure_from_u(metric: &ConformalMetric) -> Result<ScalarField> {
    let k = metric.dim() / 2;
    laplacian_power(metric.u(), k)?.map(|v| 0.5 * v)
}

/// Q-curvature `(-Δ)^{n/2} u / (2 e^{nu})` on the interior band (zero on the rim).
pub fn q_from_u(metric: &ConformalMetric) -> Result<ScalarField> {
    measure_from_u(metric)?.zip_with(metric.omega(), |a, w| a / w)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NormalityResidual {
    /// `max - min` of `u - ũ` over the interior band.
    pub oscillation: f64,
    /// Constant attaining the min-max deviation, `(max + min) / 2`.
    pub best_constant: f64,
    /// `min_C max |u - ũ - C| = oscillation / 2`.
    pub sup_deviation: f64,
}

/// Rebuilds `ũ` from the curvature of `u` and measures how far `u - ũ` is from a constant.
pub fn normality_residual(metric: &ConformalMetric) -> Result<NormalityResidual> {
    let grid = *metric.grid();
    let band = metric.dim() / 2;
    let rho = measure_from_u(metric)?;
    let rebuilt = potential_field(&QSpec::gridded(rho), 0.0)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in (0..grid.len()).filter(|&i| grid.in_band(i, band)) {
        let d = metric.u().get(i) - rebuilt[i];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let oscillation = hi - lo;
    Ok(NormalityResidual { oscillation, best_constant: 0.5 * (hi + lo), sup_deviation: 0.5 * oscillation })
}
