//! Riemannian geometry of `g = e^{2u}|dx|^2` on the grid: geodesic distance and
//! balls, volume growth, isoperimetric ratios, plus exact 1-D quadrature for
//! radially symmetric metrics.
//!
//! `d_g` is the graph distance of [`PathGraph`] with length density `e^u`, which
//! is the same object as `d_ω` for `ω = e^{nu}`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{sharp_constant, ConformalMetric};
use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, unit_sphere_area, Grid, MAX_DIM};
use crate::paths::{PathGraph, SweepLimit};
use crate::quad;

fn snap(grid: &Grid, x: &[f64]) -> Result<usize> {
    grid.snap(x)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::OutOfBox(format!("point {x:?} is outside the box")))
}

/// `d_g(x, y)` between the nodes nearest to `x` and `y`.
pub fn geodesic_distance(metric: &ConformalMetric, x: &[f64], y: &[f64]) -> Result<f64> {
    let g = metric.grid();
    Ok(metric.paths().distance(snap(g, x)?, snap(g, y)?))
}

/// Distances from one node, swept far enough for every ball up to `radius`
/// including the ramp of its coverage weights.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    pub center: usize,
    pub dist: Vec<f64>,
    reach: f64,
}

impl DistanceMap {
    pub fn new(metric: &ConformalMetric, center: usize, radius: f64) -> Self {
        let reach = radius + ramp_extent(metric);
        let dist = metric.paths().sweep(&[center], &SweepLimit { radius: Some(reach), targets: None });
        Self { center, dist, reach }
    }

    /// Covers every node of the box.
    pub fn full(metric: &ConformalMetric, center: usize) -> Self {
        Self { center, dist: metric.paths().distances_from(center), reach: f64::INFINITY }
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }
}

/// Largest `d_g` step across one cell, times the stencil diameter.
fn ramp_extent(metric: &ConformalMetric) -> f64 {
    let h = metric.grid().spacing();
    let max_rho = metric.u().max().exp();
    h * max_rho * (metric.dim() as f64).sqrt()
}

/// A geodesic ball `B^g(x, r)` on the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeodesicBall {
    pub center: usize,
    pub radius: f64,
    /// Nodes with `d_g(center, ·) ≤ radius`, ascending.
    pub nodes: Vec<usize>,
    /// `Vol_g`, each node weighted by the fraction of its cell inside the ball.
    pub volume: f64,
    /// `Σ_{nodes} e^{nu} h^n`.
    pub node_volume: f64,
    /// Face-counted `|∂B|_g` of the node set.
    pub boundary_area: f64,
}

impl GeodesicBall {
    pub fn contains(&self, idx: usize) -> bool {
        self.nodes.binary_search(&idx).is_ok()
    }
}

/// Fraction of the cell of node `i` inside `{d_g ≤ r}`: linear ramp of width `h e^{u_i}`.
fn cell_fraction(dist: f64, r: f64, h: f64, rho: f64) -> f64 {
    ((r - dist) / (h * rho) + 0.5).clamp(0.0, 1.0)
}

/// Builds `B^g(center, r)` from a distance map, failing if the ball meets the rim.
pub fn ball_from_map(metric: &ConformalMetric, map: &DistanceMap, r: f64) -> Result<GeodesicBall> {
    let grid = metric.grid();
    if r + ramp_extent(metric) > map.reach * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("distance map reaches {} < {r}", map.reach)));
    }
    let h = grid.spacing();
    let n = metric.dim() as i32;
    let cell = h.powi(n);
    let mut nodes = Vec::new();
    let mut volume = 0.0;
    let mut node_volume = 0.0;
    for (i, &d) in map.dist.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        let rho = metric.u().get(i).exp();
        let frac = cell_fraction(d, r, h, rho);
        if frac > 0.0 && grid.rim_distance(i) == 0 {
            return Err(Error::OutOfBox(format!("geodesic ball of radius {r} reaches the box boundary")));
        }
        volume += frac * metric.omega().get(i) * cell;
        if d <= r {
            nodes.push(i);
            node_volume += metric.omega().get(i) * cell;
        }
    }
    let boundary_area = boundary_area_of(metric, &nodes)?;
    Ok(GeodesicBall { center: map.center, radius: r, nodes, volume, node_volume, boundary_area })
}

/// `B^g(x, r)` around the node nearest to `x`.
pub fn geodesic_ball(metric: &ConformalMetric, center: &[f64], r: f64) -> Result<GeodesicBall> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {r}")));
    }
    let c = snap(metric.grid(), center)?;
    ball_from_map(metric, &DistanceMap::new(metric, c, r), r)
}

/// Face-counted `|∂Ω|_g`: each face between a region node and an outside node
/// contributes `e^{(n-1)u}` at the face centre times `h^{n-1}`.
fn boundary_area_of(metric: &ConformalMetric, region: &[usize]) -> Result<f64> {
    let grid = metric.grid();
    let dim = grid.dim();
    let m = grid.resolution();
    let mut inside = vec![false; grid.len()];
    for &i in region {
        inside[i] = true;
    }
    let h = grid.spacing();
    let face = h.powi(dim as i32 - 1);
    let e = (dim - 1) as f64;
    let u = metric.u();
    let mut area = 0.0;
    for &i in region {
        let mi = grid.multi_index(i);
        let mut stride = 1usize;
        for a in (0..dim).rev() {
            for (ok, j) in [(mi[a] > 0, i.wrapping_sub(stride)), (mi[a] + 1 < m, i + stride)] {
                if !ok {
                    return Err(Error::OutOfBox("region touches the box boundary".into()));
                }
                if !inside[j] {
                    area += (e * 0.5 * (u.get(i) + u.get(j))).exp() * face;
                }
            }
            stride *= m;
        }
    }
    Ok(area)
}

/// `|Ω|_g^{(n-1)/n} / |∂Ω|_g` for a node set strictly inside the box.
pub fn isoperimetric_ratio(metric: &ConformalMetric, region: &[usize]) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::EmptyRegion("isoperimetric ratio of an empty region".into()));
    }
    let grid = metric.grid();
    if region.iter().any(|&i| grid.rim_distance(i) == 0) {
        return Err(Error::OutOfBox("region touches the box boundary".into()));
    }
    let n = metric.dim() as f64;
    let cell = grid.cell_volume();
    let vol: f64 = region.iter().map(|&i| metric.omega().get(i) * cell).sum();
    Ok(vol.powf((n - 1.0) / n) / boundary_area_of(metric, region)?)
}

/// Nodes of the axis-aligned cube `center + [-s/2, s/2]^n`.
pub fn cube_region(grid: &Grid, center: &[f64], side: f64) -> Vec<usize> {
    let mut x = [0.0; MAX_DIM];
    let half = 0.5 * side + 1e-9 * grid.spacing();
    (0..grid.len())
        .filter(|&i| {
            grid.node_into(i, &mut x);
            x[..grid.dim()].iter().zip(center).all(|(a, c)| (a - c).abs() <= half)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub r: f64,
    pub volume: f64,
    /// `Vol_g / r^n`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthTable {
    pub rows: Vec<GrowthRow>,
    /// Largest ratio (upper growth constant).
    pub c1: f64,
    /// Smallest ratio (lower growth constant).
    pub c2: f64,
}

impl GrowthTable {
    fn from_rows(rows: Vec<GrowthRow>) -> Self {
        let c1 = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        let c2 = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        Self { rows, c1, c2 }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "r,Vol,ratio")?;
        for row in &self.rows {
            writeln!(w, "{},{},{}", row.r, row.volume, row.ratio)?;
        }
        Ok(())
    }

    /// Largest `Vol(2r)/Vol(r)` over rows whose doubled radius is also tabulated.
    pub fn doubling(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for a in &self.rows {
            if let Some(b) = self.rows.iter().find(|b| (b.r - 2.0 * a.r).abs() <= 1e-9 * b.r) {
                let q = b.volume / a.volume;
                best = Some(best.map_or(q, |v| v.max(q)));
            }
        }
        best
    }
}

/// `(r, Vol_g(B^g(x, r)), Vol_g / r^n)` for each radius, from one sweep.
pub fn volume_growth_table(metric: &ConformalMetric, center: &[f64], radii: &[f64]) -> Result<GrowthTable> {
    let c = snap(metric.grid(), center)?;
    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidParameter("radii must be positive".into()));
    }
    let map = DistanceMap::new(metric, c, r_max);
    let n = metric.dim() as i32;
    let rows = radii
        .iter()
        .map(|&r| {
            let b = ball_from_map(metric, &map, r)?;
            Ok(GrowthRow { r, volume: b.volume, ratio: b.volume / r.powi(n) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GrowthTable::from_rows(rows))
}

/// Stratified Monte Carlo `Vol_g` of `B^g(center, r)`: cells crossed by the
/// sphere get `k^n` jittered samples with multilinear interpolation of `d_g`.
pub fn monte_carlo_ball_volume(metric: &ConformalMetric, map: &DistanceMap, r: f64, per_axis: usize, seed: u64) -> Result<f64> {
    let grid = metric.grid();
    let dim = grid.dim();
    let m = grid.resolution();
    let cell = grid.cell_volume();
    let slack = ramp_extent(metric);
    if r + slack > map.reach * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("distance map reaches {} < {r}", map.reach)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = per_axis.max(1);
    let strata = k.pow(dim as u32);
    let mut volume = 0.0;
    let mut corner = [0usize; MAX_DIM];
    let mut p = [0.0f64; MAX_DIM];
    for (i, &d) in map.dist.iter().enumerate() {
        if d > r + slack || !d.is_finite() {
            continue;
        }
        let w = metric.omega().get(i) * cell;
        if d < r - slack {
            volume += w;
            continue;
        }
        let mi = grid.multi_index(i);
        if (0..dim).any(|a| mi[a] == 0 || mi[a] + 1 == m) {
            return Err(Error::OutOfBox(format!("geodesic ball of radius {r} reaches the box boundary")));
        }
        let mut inside = 0usize;
        for s in 0..strata {
            let mut code = s;
            for pa in p.iter_mut().take(dim) {
                let cell_k = code % k;
                code /= k;
                // offset in units of h within the dual cell [-1/2, 1/2]
                *pa = (cell_k as f64 + rng.gen::<f64>()) / k as f64 - 0.5;
            }
            // interpolate over the lattice cell containing the sample
            let mut base = [0usize; MAX_DIM];
            let mut frac = [0.0; MAX_DIM];
            for a in 0..dim {
                if p[a] < 0.0 {
                    base[a] = mi[a] - 1;
                    frac[a] = 1.0 + p[a];
                } else {
                    base[a] = mi[a];
                    frac[a] = p[a];
                }
            }
            let mut val = 0.0;
            let mut finite = true;
            for c in 0..(1usize << dim) {
                let mut wgt = 1.0;
                for a in 0..dim {
                    let bit = (c >> a) & 1;
                    corner[a] = base[a] + bit;
                    wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                if wgt == 0.0 {
                    continue;
                }
                let dv = map.dist[grid.index_of(&corner[..dim])];
                if !dv.is_finite() {
                    finite = false;
                    break;
                }
                val += wgt * dv;
            }
            if finite && val <= r {
                inside += 1;
            }
        }
        volume += w * inside as f64 / strata as f64;
    }
    Ok(volume)
}

/// A radially symmetric conformal factor `u(|x|)`, handled by 1-D quadrature.
#[derive(Clone)]
pub struct RadialMetric {
    dim: usize,
    u: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Length scale below which `u` is treated as smooth and integrated linearly in `r`.
    core: f64,
}

impl fmt::Debug for RadialMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialMetric").field("dim", &self.dim).field("core", &self.core).finish()
    }
}

/// Gauss-Legendre panels used on `[0, core]` and per decade beyond it.
const PANELS: usize = 48;

impl RadialMetric {
    pub fn new(dim: usize, core: f64, u: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if dim != 2 && dim != 4 {
            return Err(Error::InvalidParameter(format!("radial metrics need n in {{2, 4}}, got {dim}")));
        }
        Ok(Self { dim, u: Arc::new(u), core })
    }

    pub fn flat(dim: usize) -> Result<Self> {
        Self::new(dim, 1.0, |_| 0.0)
    }

    /// `u = -log sqrt(r0^2 + r^2)` in the plane: a cylinder end with `β⁺ = c_2`.
    pub fn cylinder(r0: f64) -> Result<Self> {
        Self::new(2, r0, move |r| -0.5 * (r0 * r0 + r * r).ln())
    }

    /// Log potential of a radial measure density `ρ(s)` supported in `[0, support]`.
    pub fn from_density(dim: usize, support: f64, constant: f64, rho: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let c = sharp_constant(dim)?;
        let sigma = unit_sphere_area(dim);
        let nd = dim as i32;
        let rho = Arc::new(rho);
        let shell = {
            let rho = rho.clone();
            move |s: f64| sigma * rho(s) * s.powi(nd - 1)
        };
        let mass = quad::composite(0.0, support, PANELS, &shell);
        let log_moment = quad::composite(0.0, support, PANELS, |s| if s > 0.0 { shell(s) * s.ln() } else { 0.0 });
        let second = quad::composite(0.0, support, PANELS, |s| shell(s) * s * s);
        let four = dim == 4;
        let u = move |r: f64| {
            if r >= support {
                let mut v = log_moment - mass * r.ln();
                if four {
                    v -= second / (4.0 * r * r);
                }
                return constant + v / c;
            }
            // mean of log(|y|/|x-y|) over the sphere |y| = s
            let kernel = |s: f64| {
                let (lo, hi) = if s < r { (s, r) } else { (r, s) };
                let mut k = s.ln() - hi.ln();
                if four {
                    k -= 0.25 * (lo / hi) * (lo / hi);
                }
                k
            };
            let inner = quad::composite(0.0, r, PANELS / 2, |s| if s > 0.0 { shell(s) * kernel(s) } else { 0.0 });
            let outer = quad::composite(r, support, PANELS / 2, |s| shell(s) * kernel(s));
            constant + (inner + outer) / c
        };
        Self::new(dim, support, u)
    }

    /// Gaussian bump of mass `beta` and scale `sigma` centred at the origin.
    pub fn gaussian_bump(dim: usize, beta: f64, sigma: f64) -> Result<Self> {
        let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(dim as f64 / 2.0);
        Self::from_density(dim, 12.0 * sigma, 0.0, move |s| beta / norm * (-0.5 * s * s / (sigma * sigma)).exp())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn u(&self, r: f64) -> f64 {
        (self.u)(r)
    }

    /// `∫_a^b f` split at `core`: linear panels inside, logarithmic outside.
    fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mid = self.core.clamp(a, b);
        let mut acc = 0.0;
        if mid > a {
            acc += quad::composite(a, mid, PANELS, &f);
        }
        if b > mid {
            acc += quad::log_composite(mid.max(a).max(1e-300), b, PANELS / 4, &f);
        }
        acc
    }

    /// Length of the radial segment between `|x| = a` and `|x| = b`.
    pub fn radial_distance(&self, a: f64, b: f64) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.integrate(a, b, |s| self.u(s).exp())
    }

    /// `|∂B(0, r)|_g = σ_{n-1} (r e^{u(r)})^{n-1}`.
    pub fn sphere_area(&self, r: f64) -> f64 {
        unit_sphere_area(self.dim) * (r * self.u(r).exp()).powi(self.dim as i32 - 1)
    }

    /// `|B(0, r)|_g = σ_{n-1} ∫_0^r e^{nu(s)} s^{n-1} ds`.
    pub fn volume(&self, r: f64) -> f64 {
        self.volume_between(0.0, r)
    }

    fn volume_between(&self, a: f64, b: f64) -> f64 {
        let n = self.dim as i32;
        let nf = self.dim as f64;
        unit_sphere_area(self.dim) * self.integrate(a, b, |s| (nf * self.u(s)).exp() * s.powi(n - 1))
    }

    /// Euclidean radius of the geodesic sphere of radius `rho` about the origin.
    pub fn euclidean_radius(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            return 0.0;
        }
        // bracket in log r, then bisect
        let mut hi = self.core.max(1e-12);
        while self.radial_distance(0.0, hi) < rho {
            hi *= 4.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0f64;
        for _ in 0..200 {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
            if self.radial_distance(0.0, mid) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// `Vol_g(B^g(0, rho))`, the geodesic ball about the origin.
    pub fn geodesic_ball_volume(&self, rho: f64) -> f64 {
        self.volume(self.euclidean_radius(rho))
    }

    /// Growth table of geodesic balls about the origin.
    pub fn growth_table(&self, radii: &[f64]) -> GrowthTable {
        let n = self.dim as i32;
        let rows = radii
            .iter()
            .map(|&r| {
                let volume = self.geodesic_ball_volume(r);
                GrowthRow { r, volume, ratio: volume / r.powi(n) }
            })
            .collect();
        GrowthTable::from_rows(rows)
    }

    /// End isoperimetric ratio at `|x| = r` given `|B(0,r)|_g`.
    fn end_ratio_from(&self, r: f64, vol: f64) -> f64 {
        let area = self.sphere_area(r);
        match self.dim {
            2 => area * area / (4.0 * std::f64::consts::PI * vol),
            _ => {
                let s3 = unit_sphere_area(4);
                area.powf(4.0 / 3.0) / (4.0 * s3.powf(1.0 / 3.0) * vol)
            }
        }
    }

    /// Flat value 1: `L²/(4πA)` in the plane, `|∂B|^{4/3} / (4 (2π²)^{1/3} |B|)` in `n = 4`.
    pub fn end_ratio(&self, r: f64) -> f64 {
        self.end_ratio_from(r, self.volume(r))
    }

    /// End ratios along increasing radii, with volumes accumulated panel by panel.
    pub fn end_ratio_sweep(&self, radii: &[f64]) -> Result<EndRatioSweep> {
        if radii.windows(2).any(|w| w[1] <= w[0]) || radii.first().is_none_or(|r| *r <= 0.0) {
            return Err(Error::InvalidParameter("end-ratio radii must be positive and increasing".into()));
        }
        let mut vol = 0.0;
        let mut prev = 0.0;
        let mut rows = Vec::with_capacity(radii.len());
        for &r in radii {
            vol += self.volume_between(prev, r);
            prev = r;
            rows.push((r, self.end_ratio_from(r, vol)));
        }
        let tail = rows.last().map(|r| r.1).unwrap_or(f64::NAN);
        Ok(EndRatioSweep { rows, tail })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndRatioSweep {
    /// `(r, ratio)`.
    pub rows: Vec<(f64, f64)>,
    pub tail: f64,
}

/// Log-spaced radii `r0 · q^k`, `k = 0..count`.
pub fn log_radii(r0: f64, q: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| r0 * q.powi(k as i32)).collect()
}

/// `Vol_g(B^g(x, r)) / (ω_n r^n)` for the flat metric is 1; kept for reports.
pub fn flat_ball_volume(dim: usize, r: f64) -> f64 {
    unit_ball_volume(dim) * r.powi(dim as i32)
}

/// Convenience accessor shared with the covering code.
pub fn graph(metric: &ConformalMetric) -> &PathGraph {
    metric.paths()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{log_potential_u, Bump, QSpec};
    use crate::grid::distance;
    use std::f64::consts::PI;

    fn cylinder_metric(grid: Grid, r0: f64) -> ConformalMetric {
        ConformalMetric::from_fn(grid, |x| -0.5 * (r0 * r0 + x[0] * x[0] + x[1] * x[1]).ln())
            .unwrap()
            .with_curvature((PI, 0.0))
    }

    #[test]
    fn flat_and_scaled_distances() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let flat = ConformalMetric::flat(g);
        let (x, y) = ([-1.3, 0.4], [1.1, -0.9]);
        let e = distance(&x, &y);
        let d = geodesic_distance(&flat, &x, &y).unwrap();
        assert!(d >= e * (1.0 - 1e-12) && d <= e * 1.014);
        let c = 0.3f64;
        let scaled = flat.shifted(c).unwrap();
        let ds = geodesic_distance(&scaled, &x, &y).unwrap();
        assert!((ds - c.exp() * d).abs() < 1e-12);
        assert!((geodesic_distance(&flat, &y, &x).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn cylinder_height_along_a_ray() {
        let g = Grid::new(2, 4.0, 161).unwrap();
        let metric = cylinder_metric(g, 1.0);
        let radial = RadialMetric::cylinder(1.0).unwrap();
        for (a, b) in [(0.5, 3.0), (1.0, 2.0), (0.0, 3.5)] {
            let exact = f64::asinh(b) - f64::asinh(a);
            assert!((radial.radial_distance(a, b) - exact).abs() < 1e-10);
            let d = geodesic_distance(&metric, &[a, 0.0], &[b, 0.0]).unwrap();
            assert!((d - exact).abs() / exact < 2e-3, "{a} {b}: {d} vs {exact}");
        }
    }

    #[test]
    fn flat_unit_ball_volume() {
        let g = Grid::new(2, 1.5, 193).unwrap();
        let ball = geodesic_ball(&ConformalMetric::flat(g), &[0.0, 0.0], 1.0).unwrap();
        assert!((ball.volume / PI - 1.0).abs() < 0.02, "{}", ball.volume);
        assert!((ball.node_volume / PI - 1.0).abs() < 0.02);
        assert!(ball.contains(ball.center));
        let too_big = geodesic_ball(&ConformalMetric::flat(g), &[0.0, 0.0], 1.5);
        assert!(matches!(too_big, Err(Error::OutOfBox(_))));
    }

    #[test]
    fn balls_are_nested_and_match_distances() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.2, 0.0], mass: 1.0, sigma: 0.3 }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        let small = geodesic_ball(&metric, &[0.0, 0.0], 0.3).unwrap();
        let big = geodesic_ball(&metric, &[0.0, 0.0], 0.6).unwrap();
        assert!(small.nodes.iter().all(|i| big.contains(*i)));
        assert!(small.volume < big.volume);
        let dist = metric.paths().distances_from(small.center);
        for i in (0..g.len()).step_by(7) {
            assert_eq!(small.contains(i), dist[i] <= 0.3);
        }
    }

    #[test]
    fn scale_invariance_of_growth() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.0, 0.0], mass: 1.2, sigma: 0.3 }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        let c = 0.7f64;
        let shifted = metric.shifted(c).unwrap();
        let radii = [0.2, 0.4, 0.8];
        let a = volume_growth_table(&metric, &[0.0, 0.0], &radii).unwrap();
        let scaled: Vec<f64> = radii.iter().map(|r| r * c.exp()).collect();
        let b = volume_growth_table(&shifted, &[0.0, 0.0], &scaled).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert!((x.ratio - y.ratio).abs() < 1e-12 * x.ratio);
        }
        let region = cube_region(&g, &[0.0, 0.0], 1.0);
        let i1 = isoperimetric_ratio(&metric, &region).unwrap();
        let i2 = isoperimetric_ratio(&shifted, &region).unwrap();
        assert!((i1 - i2).abs() < 1e-12);
    }

    #[test]
    fn flat_growth_and_doubling() {
        let g = Grid::new(2, 2.0, 161).unwrap();
        let t = volume_growth_table(&ConformalMetric::flat(g), &[0.0, 0.0], &[0.4, 0.8, 1.6]).unwrap();
        for row in &t.rows {
            assert!((row.ratio / PI - 1.0).abs() < 0.03, "{row:?}");
        }
        let dbl = t.doubling().unwrap();
        assert!((dbl - 4.0).abs() < 0.12, "{dbl}");
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("r,Vol,ratio\n0.4,"));
    }

    #[test]
    fn squares_have_ratio_one_quarter() {
        let g = Grid::new(2, 2.0, 41).unwrap();
        let flat = ConformalMetric::flat(g);
        for side in [0.5, 1.0, 2.0] {
            let sq = cube_region(&g, &[0.1, -0.2], side);
            assert!((isoperimetric_ratio(&flat, &sq).unwrap() - 0.25).abs() < 1e-15);
        }
        assert!(matches!(isoperimetric_ratio(&flat, &[]), Err(Error::EmptyRegion(_))));
        assert!(isoperimetric_ratio(&flat, &[0]).is_err());
        let g4 = Grid::new(4, 1.0, 9).unwrap();
        let cube = cube_region(&g4, &[0.0; 4], 1.0);
        // |Q|^{3/4} / |∂Q| = s^3 / (8 s^3)
        assert!((isoperimetric_ratio(&ConformalMetric::flat(g4), &cube).unwrap() - 0.125).abs() < 1e-14);
    }

    #[test]
    fn digital_disk_ratio() {
        // the staircase perimeter of a digital disk of radius R tends to 8R
        let g = Grid::new(2, 1.5, 193).unwrap();
        let flat = ConformalMetric::flat(g);
        let disk = g.nodes_in_ball(&crate::grid::Ball::new(vec![0.0, 0.0], 1.0));
        let ratio = isoperimetric_ratio(&flat, &disk).unwrap();
        let oracle = PI.sqrt() / 8.0;
        assert!((ratio / oracle - 1.0).abs() < 0.01, "{ratio} {oracle}");
    }

    #[test]
    fn radial_oracles() {
        let flat = RadialMetric::flat(2).unwrap();
        assert!((flat.volume(2.0) - 4.0 * PI).abs() < 1e-10);
        assert!((flat.end_ratio(3.0) - 1.0).abs() < 1e-12);
        let flat4 = RadialMetric::flat(4).unwrap();
        assert!((flat4.end_ratio(5.0) - 1.0).abs() < 1e-12);

        let cyl = RadialMetric::cylinder(1.0).unwrap();
        for rho in [0.5, 1.0, 5.0, 20.0] {
            let exact = 2.0 * PI * f64::cosh(rho).ln();
            let v = cyl.geodesic_ball_volume(rho);
            assert!((v - exact).abs() < 1e-8 * exact.max(1.0), "{rho}: {v} {exact}");
        }
        // length-like growth: geodesic doubling tends to 2
        let dbl = cyl.geodesic_ball_volume(80.0) / cyl.geodesic_ball_volume(40.0);
        assert!((dbl - 2.0).abs() < 0.05);
    }

    #[test]
    fn radial_bump_matches_grid_potential_and_cone_angle() {
        let beta = 1.2;
        let sigma = 0.3;
        let radial = RadialMetric::gaussian_bump(2, beta, sigma).unwrap();
        let g = Grid::new(2, 3.0, 121).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.0, 0.0], mass: beta, sigma }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        for r in [0.25, 0.5, 1.0, 2.0] {
            let i = g.snap(&[r, 0.0]).unwrap().0;
            assert!((metric.u().get(i) - radial.u(r)).abs() < 2e-3, "{r}");
        }
        let sweep = radial.end_ratio_sweep(&log_radii(1.0, 10.0, 13)).unwrap();
        assert!((sweep.tail - (1.0 - beta / PI)).abs() < 1e-3, "{}", sweep.tail);

        let c4 = sharp_constant(4).unwrap();
        let r4 = RadialMetric::gaussian_bump(4, 0.5 * c4, 0.3).unwrap();
        let sweep = r4.end_ratio_sweep(&log_radii(1.0, 10.0, 13)).unwrap();
        assert!((sweep.tail - 0.5).abs() < 1e-3, "{}", sweep.tail);
    }

    #[test]
    fn four_dimensional_radial_potential_matches_grid() {
        let c4 = sharp_constant(4).unwrap();
        let beta = 0.3 * c4;
        let sigma = 0.45;
        let g = Grid::new(4, 2.4, 33).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.0; 4], mass: beta, sigma }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        let radial = RadialMetric::gaussian_bump(4, beta, sigma).unwrap();
        for r in [0.3, 0.6, 1.2] {
            let i = g.snap(&[r, 0.0, 0.0, 0.0]).unwrap().0;
            let x = g.node(i);
            let rr = crate::grid::norm(&x);
            assert!((metric.u().get(i) - radial.u(rr)).abs() < 0.02, "{r}: {} {}", metric.u().get(i), radial.u(rr));
        }
    }

    #[test]
    fn cylinder_growth_on_grid_and_radially() {
        let g = Grid::new(2, 12.0, 257).unwrap();
        let metric = cylinder_metric(g, 1.0);
        let radial = RadialMetric::cylinder(1.0).unwrap();
        let table = volume_growth_table(&metric, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        for row in &table.rows {
            let exact = radial.geodesic_ball_volume(row.r);
            assert!((row.volume / exact - 1.0).abs() < 0.03, "{row:?} {exact}");
        }
        let long = radial.growth_table(&[1.0, 20.0]);
        assert!(long.rows[0].ratio / long.rows[1].ratio >= 5.0);
        let sweep = radial.end_ratio_sweep(&log_radii(1.0, 100.0, 7)).unwrap();
        assert!(sweep.rows.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(sweep.tail < 0.05);
    }

    #[test]
    fn monte_carlo_volume_in_four_dimensions() {
        let g = Grid::new(4, 1.0, 21).unwrap();
        let flat = ConformalMetric::flat(g);
        let c = g.origin();
        let map = DistanceMap::new(&flat, c, 0.7);
        let exact = flat_ball_volume(4, 0.7);
        let mc = monte_carlo_ball_volume(&flat, &map, 0.7, 2, 9).unwrap();
        let cov = ball_from_map(&flat, &map, 0.7).unwrap().volume;
        // the cube stencil over-estimates off-lattice lengths, so balls come out small
        assert!(mc < exact && cov < exact);
        assert!((mc / cov - 1.0).abs() < 0.05, "{mc} {cov}");
        assert_eq!(mc, monte_carlo_ball_volume(&flat, &map, 0.7, 2, 9).unwrap());
    }
}
