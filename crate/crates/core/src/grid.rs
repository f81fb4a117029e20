//! Cartesian grids on the box `[-L, L]^n`, sampled scalar fields, trapezoidal
//! quadrature and the second-order discrete Laplacian.
//!
//! Nodes are stored row-major (last axis fastest). The node count per axis is
//! odd so the origin is always a node, and coordinates are computed as an
//! integer offset from the centre times the spacing, which makes them
//! bit-reproducible from `(i, L, m)` alone.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 4;

/// Resolution cap for four-dimensional grids.
pub const MAX_RESOLUTION_4D: usize = 33;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    halfwidth: f64,
    resolution: usize,
    spacing: f64,
}

impl Grid {
    pub fn new(dim: usize, halfwidth: f64, resolution: usize) -> Result<Self> {
        if dim != 2 && dim != 4 {
            return Err(Error::InvalidGrid(format!("dimension {dim} is not in {{2, 4}}")));
        }
        if !(halfwidth > 0.0) || !halfwidth.is_finite() {
            return Err(Error::InvalidGrid(format!("halfwidth {halfwidth} must be positive")));
        }
        if resolution.is_multiple_of(2) || resolution < 3 {
            return Err(Error::InvalidGrid(format!(
                "resolution {resolution} must be odd and at least 3"
            )));
        }
        if dim == 4 && resolution > MAX_RESOLUTION_4D {
            return Err(Error::InvalidGrid(format!(
                "four-dimensional grids are capped at {MAX_RESOLUTION_4D} nodes per axis"
            )));
        }
        let spacing = 2.0 * halfwidth / (resolution - 1) as f64;
        Ok(Self { dim, halfwidth, resolution, spacing })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn halfwidth(&self) -> f64 {
        self.halfwidth
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Total number of nodes, `m^n`.
    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one grid cell, `h^n`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    #[inline]
    fn centre(&self) -> i64 {
        ((self.resolution - 1) / 2) as i64
    }

    /// Coordinate of axis position `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        (i as i64 - self.centre()) as f64 * self.spacing
    }

    #[inline]
    pub fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut mi = [0usize; MAX_DIM];
        for axis in (0..self.dim).rev() {
            mi[axis] = idx % self.resolution;
            idx /= self.resolution;
        }
        mi
    }

    #[inline]
    pub fn index_of(&self, mi: &[usize]) -> usize {
        mi[..self.dim].iter().fold(0, |acc, &i| acc * self.resolution + i)
    }

    /// Writes the coordinates of node `idx` into `out[..dim]`.
    #[inline]
    pub fn node_into(&self, idx: usize, out: &mut [f64]) {
        let mi = self.multi_index(idx);
        for axis in 0..self.dim {
            out[axis] = self.coord(mi[axis]);
        }
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.node_into(idx, &mut x);
        x
    }

    /// Index of the origin node.
    pub fn origin(&self) -> usize {
        let c = self.centre() as usize;
        self.index_of(&[c; MAX_DIM])
    }

    /// Nearest node to `x` and the snapping displacement. `None` outside the box.
    pub fn snap(&self, x: &[f64]) -> Option<(usize, f64)> {
        let mut mi = [0usize; MAX_DIM];
        let mut disp2 = 0.0;
        for axis in 0..self.dim {
            let k = (x[axis] / self.spacing).round() as i64 + self.centre();
            if k < 0 || k >= self.resolution as i64 {
                return None;
            }
            mi[axis] = k as usize;
            let d = self.coord(k as usize) - x[axis];
            disp2 += d * d;
        }
        Some((self.index_of(&mi), disp2.sqrt()))
    }

    /// Number of cells between node `idx` and the nearest face of the box.
    #[inline]
    pub fn rim_distance(&self, idx: usize) -> usize {
        let mi = self.multi_index(idx);
        (0..self.dim)
            .map(|a| mi[a].min(self.resolution - 1 - mi[a]))
            .min()
            .unwrap_or(0)
    }

    /// True for nodes at least `k` cells from the boundary.
    #[inline]
    pub fn in_band(&self, idx: usize, k: usize) -> bool {
        self.rim_distance(idx) >= k
    }

    /// Trapezoidal quadrature weight of node `idx`.
    pub fn quadrature_weight(&self, idx: usize) -> f64 {
        let mi = self.multi_index(idx);
        let mut w = 1.0;
        for axis in 0..self.dim {
            let edge = mi[axis] == 0 || mi[axis] == self.resolution - 1;
            w *= if edge { 0.5 * self.spacing } else { self.spacing };
        }
        w
    }

    pub fn quadrature_weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.quadrature_weight(i)).collect()
    }

    /// Whether the closed ball lies strictly inside the box (never touching the rim nodes).
    pub fn contains_ball(&self, ball: &Ball) -> bool {
        let lim = self.halfwidth - self.spacing;
        ball.center.len() == self.dim
            && ball.center.iter().all(|&c| c - ball.radius > -lim && c + ball.radius < lim)
    }

    /// Nodes of the closed Euclidean ball, in increasing index order.
    pub fn nodes_in_ball(&self, ball: &Ball) -> Vec<usize> {
        let h = self.spacing;
        let c = self.centre();
        let m = self.resolution as i64;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for a in 0..self.dim {
            lo[a] = (((ball.center[a] - ball.radius) / h).floor() as i64 + c).clamp(0, m - 1);
            hi[a] = (((ball.center[a] + ball.radius) / h).ceil() as i64 + c).clamp(0, m - 1);
        }
        let r2 = ball.radius * ball.radius * (1.0 + 1e-12);
        let mut out = Vec::new();
        let mut mi = lo;
        loop {
            let mut d2 = 0.0;
            for a in 0..self.dim {
                let d = (mi[a] - c) as f64 * h - ball.center[a];
                d2 += d * d;
            }
            if d2 <= r2 {
                let idx = mi[..self.dim].iter().fold(0usize, |acc, &i| acc * self.resolution + i as usize);
                out.push(idx);
            }
            // odometer over the bounding box, last axis fastest
            let mut a = self.dim;
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                if mi[a] < hi[a] {
                    mi[a] += 1;
                    break;
                }
                mi[a] = lo[a];
            }
        }
    }
}

/// How a Euclidean ball is turned into quadrature weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallRule {
    /// Nodes within the radius, each with its full trapezoidal weight.
    Nodes,
    /// Every node weighted by the fraction of its cell inside the ball, using a
    /// linear ramp of width `h` across the sphere. Second-order in the volume.
    Coverage,
}

impl Grid {
    /// `(node, weight)` pairs realising `∫_ball · dx`.
    pub fn ball_weights(&self, ball: &Ball, rule: BallRule) -> Vec<(usize, f64)> {
        match rule {
            BallRule::Nodes => self
                .nodes_in_ball(ball)
                .into_iter()
                .map(|i| (i, self.quadrature_weight(i)))
                .collect(),
            BallRule::Coverage => {
                let h = self.spacing;
                let outer = Ball::new(ball.center.clone(), ball.radius + 0.5 * h);
                let mut x = [0.0; MAX_DIM];
                self.nodes_in_ball(&outer)
                    .into_iter()
                    .filter_map(|i| {
                        self.node_into(i, &mut x);
                        let rho = distance(&x[..self.dim], &ball.center);
                        let frac = ((ball.radius - rho) / h + 0.5).clamp(0.0, 1.0);
                        (frac > 0.0).then(|| (i, frac * self.quadrature_weight(i)))
                    })
                    .collect()
            }
        }
    }
}

/// A closed Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    /// The concentric ball with radius scaled by `factor`.
    pub fn dilate(&self, factor: f64) -> Self {
        Self { center: self.center.clone(), radius: self.radius * factor }
    }

    /// The ball whose diameter is the segment `xy`.
    pub fn with_diameter(x: &[f64], y: &[f64]) -> Self {
        let center = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
        Self { center, radius: 0.5 * distance(x, y) }
    }
}

pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Volume of the unit ball in dimension `n` (even `n` only needs `pi^(n/2)/(n/2)!`).
pub fn unit_ball_volume(n: usize) -> f64 {
    let k = n / 2;
    if n.is_multiple_of(2) {
        std::f64::consts::PI.powi(k as i32) / (1..=k).map(|i| i as f64).product::<f64>()
    } else {
        // odd n via the Gamma function
        std::f64::consts::PI.powf(n as f64 / 2.0) / statrs::function::gamma::gamma(n as f64 / 2.0 + 1.0)
    }
}

/// Surface area of the unit sphere `S^{n-1}`.
pub fn unit_sphere_area(n: usize) -> f64 {
    n as f64 * unit_ball_volume(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = [0.0; MAX_DIM];
        let values = (0..grid.len())
            .map(|i| {
                grid.node_into(i, &mut x);
                f(&x[..grid.dim()])
            })
            .collect();
        Self::new(grid, values)
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Self::new(self.grid, self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flat little-endian layout: `n: u64`, `L: f64`, `m: u64`, then the values as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.grid.dim as u64).to_le_bytes())?;
        w.write_all(&self.grid.halfwidth.to_le_bytes())?;
        w.write_all(&(self.grid.resolution as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let dim = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let halfwidth = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        let resolution = u64::from_le_bytes(b) as usize;
        let grid = Grid::new(dim, halfwidth, resolution)?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
            values.push(f64::from_le_bytes(b));
        }
        Self::new(grid, values)
    }

    /// CSV with columns `x0,..,x{n-1},value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.grid.dim).map(|a| format!("x{a}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut x = [0.0; MAX_DIM];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.node_into(i, &mut x);
            for c in &x[..self.grid.dim] {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}

/// Trapezoidal value of `∫ field · weight dx` over the box.
pub fn integrate(field: &ScalarField, weight: Option<&ScalarField>) -> Result<f64> {
    let grid = field.grid();
    if let Some(w) = weight {
        if w.grid() != grid {
            return Err(Error::GridMismatch);
        }
    }
    let mut sum = 0.0;
    for i in 0..grid.len() {
        let w = weight.map_or(1.0, |w| w.get(i));
        sum += field.get(i) * w * grid.quadrature_weight(i);
    }
    Ok(sum)
}

/// `(-Δ_h)^k field` with the standard `(2n+1)`-point stencil.
///
/// Only nodes at least `k` cells from the boundary carry meaningful values;
/// the rim is returned as zero.
pub fn laplacian_power(field: &ScalarField, k: usize) -> Result<ScalarField> {
    if !(1..=2).contains(&k) {
        return Err(Error::InvalidParameter(format!("laplacian power {k} not in {{1, 2}}")));
    }
    let grid = *field.grid();
    let mut cur = field.values().to_vec();
    for pass in 1..=k {
        cur = neg_laplacian_band(&grid, &cur, pass);
    }
    Ok(ScalarField { grid, values: cur })
}

fn neg_laplacian_band(grid: &Grid, f: &[f64], band: usize) -> Vec<f64> {
    let m = grid.resolution();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    let mut strides = [0usize; MAX_DIM];
    let mut s = 1;
    for a in (0..grid.dim()).rev() {
        strides[a] = s;
        s *= m;
    }
    (0..grid.len())
        .map(|i| {
            if !grid.in_band(i, band) {
                return 0.0;
            }
            let mut acc = 0.0;
            for &st in &strides[..grid.dim()] {
                acc += 2.0 * f[i] - f[i + st] - f[i - st];
            }
            acc * inv_h2
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tiny_grid_nodes() {
        let g = Grid::new(2, 1.0, 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.spacing(), 1.0);
        let coords: Vec<Vec<f64>> = (0..9).map(|i| g.node(i)).collect();
        assert_eq!(coords[0], vec![-1.0, -1.0]);
        assert_eq!(coords[4], vec![0.0, 0.0]);
        assert_eq!(coords[5], vec![0.0, 1.0]);
        assert_eq!(g.origin(), 4);
    }

    #[test]
    fn spacing_and_counts() {
        assert_eq!(Grid::new(2, 2.0, 129).unwrap().spacing(), 0.03125);
        assert_eq!(Grid::new(4, 1.0, 9).unwrap().len(), 6561);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(2, 1.0, 10).is_err());
        assert!(Grid::new(3, 1.0, 9).is_err());
        assert!(Grid::new(2, 0.0, 9).is_err());
        assert!(Grid::new(2, -1.0, 9).is_err());
        assert!(Grid::new(4, 1.0, 35).is_err());
    }

    #[test]
    fn origin_is_exact_node() {
        for m in [9, 17, 129, 257] {
            let g = Grid::new(2, 3.7, m).unwrap();
            assert_eq!(g.node(g.origin()), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn integrate_box_volume_and_odd_symmetry() {
        let g = Grid::new(2, 1.0, 33).unwrap();
        let one = ScalarField::constant(g, 1.0);
        assert_relative_eq!(integrate(&one, None).unwrap(), 4.0, epsilon = 1e-13);
        let x1 = ScalarField::from_fn(g, |x| x[0]).unwrap();
        assert!(integrate(&x1, None).unwrap().abs() < 1e-14);
    }

    #[test]
    fn integrate_gaussian() {
        // oracle: product of 1-D Gauss-Legendre integrals of exp(-t^2) on [-6, 6]
        let one_d = gauss_legendre_oracle(|t| (-t * t).exp(), -6.0, 6.0, 200);
        let g = Grid::new(2, 6.0, 257).unwrap();
        let f = ScalarField::from_fn(g, |x| (-(x[0] * x[0] + x[1] * x[1])).exp()).unwrap();
        let v = integrate(&f, None).unwrap();
        assert!((v - one_d * one_d).abs() < 1e-6);
        assert!((v - std::f64::consts::PI).abs() < 1e-6);
    }

    fn gauss_legendre_oracle(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        // 5-point rule on equal panels
        let nodes = [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
        let weights = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
        let w = (b - a) / panels as f64;
        (0..panels)
            .map(|p| {
                let mid = a + (p as f64 + 0.5) * w;
                nodes.iter().zip(&weights).map(|(t, wt)| wt * f(mid + 0.5 * w * t)).sum::<f64>() * 0.5 * w
            })
            .sum()
    }

    #[test]
    fn integrate_weighted_and_mismatch() {
        let g = Grid::new(2, 1.0, 17).unwrap();
        let g2 = Grid::new(2, 1.0, 19).unwrap();
        let f = ScalarField::constant(g, 2.0);
        let w = ScalarField::constant(g, 3.0);
        assert_relative_eq!(integrate(&f, Some(&w)).unwrap(), 24.0, epsilon = 1e-12);
        assert!(matches!(integrate(&f, Some(&ScalarField::constant(g2, 1.0))), Err(Error::GridMismatch)));
    }

    #[test]
    fn integrate_converges_at_second_order() {
        // smooth non-periodic integrand: exact value (e - e^{-1})^2 ... use exp(x0 + 0.5 x1)
        let exact = (1f64.exp() - (-1f64).exp()) * 2.0 * ((0.5f64).exp() - (-0.5f64).exp());
        let errs: Vec<f64> = [9, 17, 33, 65]
            .iter()
            .map(|&m| {
                let g = Grid::new(2, 1.0, m).unwrap();
                let f = ScalarField::from_fn(g, |x| (x[0] + 0.5 * x[1]).exp()).unwrap();
                (integrate(&f, None).unwrap() - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.05, "order {order}");
        }
    }

    #[test]
    fn laplacian_of_quadratics() {
        let g = Grid::new(2, 1.5, 21).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0] * x[0]).unwrap();
        let lf = laplacian_power(&f, 1).unwrap();
        for i in (0..g.len()).filter(|&i| g.in_band(i, 1)) {
            assert_relative_eq!(lf.get(i), -2.0, epsilon = 1e-10);
        }
        let harmonic = ScalarField::from_fn(g, |x| x[0] * x[0] - x[1] * x[1]).unwrap();
        let bh = laplacian_power(&harmonic, 2).unwrap();
        for i in (0..g.len()).filter(|&i| g.in_band(i, 2)) {
            assert!(bh.get(i).abs() < 1e-8);
        }
        let affine = ScalarField::from_fn(g, |x| 3.0 * x[0] - 2.0 * x[1] + 1.0).unwrap();
        let la = laplacian_power(&affine, 1).unwrap();
        assert!(la.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn laplacian_matches_stencil_symbol() {
        let g = Grid::new(2, 2.0, 41).unwrap();
        let h = g.spacing();
        let f = ScalarField::from_fn(g, |x| x[0].sin()).unwrap();
        let lf = laplacian_power(&f, 1).unwrap();
        let symbol = (2.0 - 2.0 * h.cos()) / (h * h);
        for i in (0..g.len()).filter(|&i| g.in_band(i, 1)) {
            let x = g.node(i);
            assert!((lf.get(i) - symbol * x[0].sin()).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_rejects_bad_power() {
        let g = Grid::new(2, 1.0, 9).unwrap();
        assert!(laplacian_power(&ScalarField::constant(g, 0.0), 3).is_err());
        assert!(laplacian_power(&ScalarField::constant(g, 0.0), 0).is_err());
    }

    #[test]
    fn neg_laplacian_is_positive_semidefinite_on_compact_support() {
        let g = Grid::new(2, 1.0, 25).unwrap();
        let f = ScalarField::from_fn(g, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 < 0.5 { (0.5 - r2).powi(3) * (3.0 * x[0]).cos() } else { 0.0 }
        })
        .unwrap();
        let lf = laplacian_power(&f, 1).unwrap();
        let q: f64 = f.values().iter().zip(lf.values()).map(|(a, b)| a * b).sum();
        assert!(q >= 0.0);
    }

    #[test]
    fn binary_and_csv_layout() {
        let g = Grid::new(2, 1.0, 3).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0] + 10.0 * x[1]).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 9 * 8);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&buf[16..24], &3u64.to_le_bytes());
        assert_eq!(&buf[24..32], &(-11.0f64).to_le_bytes());
        let back = ScalarField::read_binary(&buf[..]).unwrap();
        assert_eq!(back, f);
        assert!(ScalarField::read_binary(&buf[..40]).is_err());

        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("x0,x1,value"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn ball_nodes() {
        let g = Grid::new(2, 2.0, 41).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        let nodes = g.nodes_in_ball(&b);
        let brute: Vec<usize> = (0..g.len()).filter(|&i| norm(&g.node(i)) <= 1.0 + 1e-12).collect();
        assert_eq!(nodes, brute);
        assert!(g.contains_ball(&b));
        assert!(!g.contains_ball(&Ball::new(vec![1.5, 0.0], 1.0)));
    }

    #[test]
    fn coverage_rule_volume() {
        let g = Grid::new(2, 2.0, 41).unwrap();
        for r in [0.31, 0.5, 0.77, 1.2] {
            let b = Ball::new(vec![0.013, -0.021], r);
            let v: f64 = g.ball_weights(&b, BallRule::Coverage).iter().map(|(_, w)| w).sum();
            assert!((v / (std::f64::consts::PI * r * r) - 1.0).abs() < 0.01, "{r} {v}");
        }
    }

    #[test]
    fn snapping() {
        let g = Grid::new(2, 1.0, 21).unwrap();
        let (i, d) = g.snap(&[0.12, -0.31]).unwrap();
        let x = g.node(i);
        assert!((x[0] - 0.1).abs() < 1e-12 && (x[1] + 0.3).abs() < 1e-12);
        assert!((d - (0.02f64.powi(2) + 0.01f64.powi(2)).sqrt()).abs() < 1e-12);
        assert!(g.snap(&[1.2, 0.0]).is_none());
    }

    #[test]
    fn unit_ball_volumes() {
        assert_relative_eq!(unit_ball_volume(2), std::f64::consts::PI);
        assert_relative_eq!(unit_ball_volume(4), std::f64::consts::PI.powi(2) / 2.0);
        assert_relative_eq!(unit_sphere_area(4), 2.0 * std::f64::consts::PI.powi(2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn integrate_is_linear_and_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0, shift in 0.0f64..2.0) {
                let g = Grid::new(2, 1.0, 17).unwrap();
                let f1 = ScalarField::from_fn(g, |x| (x[0] * 2.0).sin() + x[1]).unwrap();
                let f2 = ScalarField::from_fn(g, |x| x[0] * x[1] - 0.3).unwrap();
                let comb = f1.zip_with(&f2, |p, q| a * p + b * q).unwrap();
                let lhs = integrate(&comb, None).unwrap();
                let rhs = a * integrate(&f1, None).unwrap() + b * integrate(&f2, None).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12);
                let above = f1.map(|v| v + shift).unwrap();
                prop_assert!(integrate(&above, None).unwrap() >= integrate(&f1, None).unwrap() - 1e-14);
            }
        }
    }
}
