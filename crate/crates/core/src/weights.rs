//! Muckenhoupt constants, reverse Hölder, doubling, and the two weighted
//! distances `δ_ω` and `d_ω` behind the strong `A∞` condition.
//!
//! Suprema over all balls are not computable; every constant here is a maximum
//! over a seeded sample of balls (or point pairs) and is therefore a lower bound
//! for the true constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{distance, unit_ball_volume, Ball, BallRule, Grid, ScalarField, MAX_DIM};
use crate::paths::{PathGraph, SweepLimit, Stencil};

/// Default number of sampled balls for supremum proxies.
pub const DEFAULT_BALLS: usize = 200;

/// `|x|^α`, with the origin cell replaced by the mean of `r^α` over the ball of volume `h^n`.
pub fn power_weight(grid: Grid, alpha: f64) -> Result<ScalarField> {
    let n = grid.dim() as f64;
    let a = (grid.cell_volume() / unit_ball_volume(grid.dim())).powf(1.0 / n);
    let origin_mean = n * a.powf(alpha) / (n + alpha);
    ScalarField::from_fn(grid, |x| {
        let r = crate::grid::norm(x);
        if r == 0.0 { origin_mean } else { r.powf(alpha) }
    })
}

/// `|x_1|^α` (vanishes on the hyperplane `x_1 = 0` for `α > 0`).
pub fn axis_power_weight(grid: Grid, alpha: f64) -> Result<ScalarField> {
    ScalarField::from_fn(grid, |x| x[0].abs().powf(alpha))
}

/// Seeded balls with log-uniform radii in `[r_min, r_max]` whose `fit`-fold dilates lie in the box.
pub fn sample_balls(grid: &Grid, count: usize, seed: u64, r_min: f64, r_max: f64, fit: f64) -> Result<Vec<Ball>> {
    let room = grid.halfwidth() - grid.spacing();
    if !(r_min > 0.0 && r_max >= r_min && fit * r_max < room) {
        return Err(Error::InvalidParameter(format!(
            "radius range [{r_min}, {r_max}] with dilation {fit} does not fit the box"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (r_min.ln(), r_max.ln());
    Ok((0..count)
        .map(|_| {
            let r = if hi > lo { rng.gen_range(lo..hi).exp() } else { r_min };
            let span = room - fit * r;
            let center = (0..grid.dim()).map(|_| rng.gen_range(-span..span)).collect();
            Ball::new(center, r)
        })
        .collect())
}

fn check_ball(grid: &Grid, ball: &Ball) -> Result<()> {
    if grid.contains_ball(ball) {
        Ok(())
    } else {
        Err(Error::OutOfBox(format!("ball at {:?} radius {}", ball.center, ball.radius)))
    }
}

/// `∫_B g(ω) dx` with coverage weights.
fn ball_integral(omega: &ScalarField, ball: &Ball, g: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut mass = 0.0;
    let mut vol = 0.0;
    for (i, w) in omega.grid().ball_weights(ball, BallRule::Coverage) {
        mass += g(omega.get(i)) * w;
        vol += w;
    }
    (mass, vol)
}

/// `ω(B) = ∫_B ω dx`.
pub fn ball_mass(omega: &ScalarField, ball: &Ball) -> f64 {
    ball_integral(omega, ball, |w| w).0
}

fn max_over_balls(balls: &[Ball], f: impl Fn(&Ball) -> Result<f64> + Sync) -> Result<f64> {
    let vals: Vec<f64> = balls.par_iter().map(&f).collect::<Result<_>>()?;
    Ok(vals.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Largest sampled value of `avg_B ω · (avg_B ω^{-1/(p-1)})^{p-1}`.
pub fn ap_constant(omega: &ScalarField, p: f64, balls: &[Ball]) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::InvalidParameter(format!("A_p needs p > 1, got {p}")));
    }
    let dual = -1.0 / (p - 1.0);
    max_over_balls(balls, |b| {
        check_ball(omega.grid(), b)?;
        let (m, v) = ball_integral(omega, b, |w| w);
        let (md, _) = ball_integral(omega, b, |w| w.powf(dual));
        Ok((m / v) * (md / v).powf(p - 1.0))
    })
}

/// Largest sampled value of `(avg_B ω^r)^{1/r} / avg_B ω`.
pub fn reverse_holder_check(omega: &ScalarField, r: f64, balls: &[Ball]) -> Result<f64> {
    if !(r > 1.0) {
        return Err(Error::InvalidParameter(format!("reverse Hölder needs r > 1, got {r}")));
    }
    max_over_balls(balls, |b| {
        check_ball(omega.grid(), b)?;
        let (m, v) = ball_integral(omega, b, |w| w);
        let (mr, _) = ball_integral(omega, b, |w| w.powf(r));
        Ok((mr / v).powf(1.0 / r) / (m / v))
    })
}

/// `(max ω(2B)/ω(B), κ = log2 of it)`.
pub fn doubling_constant(omega: &ScalarField, balls: &[Ball]) -> Result<(f64, f64)> {
    let c = max_over_balls(balls, |b| {
        let big = b.dilate(2.0);
        check_ball(omega.grid(), &big)?;
        Ok(ball_mass(omega, &big) / ball_mass(omega, b))
    })?;
    Ok((c, c.log2().max(0.0)))
}

/// `δ_ω(x, y) = ω(B_xy)^{1/n}` with `B_xy` the ball with diameter `xy`.
pub fn delta_distance(omega: &ScalarField, x: &[f64], y: &[f64]) -> Result<f64> {
    let ball = Ball::with_diameter(x, y);
    check_ball(omega.grid(), &ball)?;
    Ok(ball_mass(omega, &ball).powf(1.0 / omega.grid().dim() as f64))
}

/// Both weighted distances over one grid, sharing a path graph.
#[derive(Debug, Clone)]
pub struct WeightedDistances {
    omega: ScalarField,
    graph: PathGraph,
}

impl WeightedDistances {
    pub fn new(omega: ScalarField, stencil: Stencil) -> Result<Self> {
        let inv_n = 1.0 / omega.grid().dim() as f64;
        if omega.values().iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidParameter("weights must be non-negative".into()));
        }
        let density = omega.values().iter().map(|w| w.powf(inv_n)).collect();
        let graph = PathGraph::new(*omega.grid(), density, stencil)?;
        Ok(Self { omega, graph })
    }

    pub fn omega(&self) -> &ScalarField {
        &self.omega
    }

    pub fn graph(&self) -> &PathGraph {
        &self.graph
    }

    fn snap(&self, x: &[f64]) -> Result<(usize, f64)> {
        self.omega
            .grid()
            .snap(x)
            .ok_or_else(|| Error::OutOfBox(format!("point {x:?} is outside the box")))
    }

    /// `δ_ω` between the nodes nearest to `x` and `y`.
    pub fn delta(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let g = self.omega.grid();
        let (a, _) = self.snap(x)?;
        let (b, _) = self.snap(y)?;
        delta_distance(&self.omega, &g.node(a), &g.node(b))
    }

    /// `d_ω` between the nodes nearest to `x` and `y`, and the larger snapping displacement.
    pub fn d(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        let (a, da) = self.snap(x)?;
        let (b, db) = self.snap(y)?;
        Ok((self.graph.distance(a, b), da.max(db)))
    }

    /// `d_ω` from node `a` to every node in `targets`, in one sweep.
    pub fn d_many(&self, a: usize, targets: &[usize]) -> Vec<f64> {
        let dist = self.graph.sweep(&[a], &SweepLimit { radius: None, targets: Some(targets) });
        targets.iter().map(|&t| dist[t]).collect()
    }
}

/// `d_ω(x, y)`: graph distance with length density `ω^{1/n}`.
pub fn d_distance(omega: &ScalarField, x: &[f64], y: &[f64]) -> Result<f64> {
    let wd = WeightedDistances::new(omega.clone(), Stencil::default_for(omega.grid().dim()))?;
    Ok(wd.d(x, y)?.0)
}

/// Point pairs `(x, y)` with log-uniform separation whose balls `B_xy` fit the box.
pub fn sample_pairs(grid: &Grid, count: usize, seed: u64, sep_min: f64, sep_max: f64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let room = grid.halfwidth() - 2.0 * grid.spacing();
    if !(sep_min > 0.0 && sep_max >= sep_min && sep_max < room) {
        return Err(Error::InvalidParameter("pair separations do not fit the box".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim();
    let (lo, hi) = (sep_min.ln(), sep_max.ln());
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = if hi > lo { rng.gen_range(lo..hi).exp() } else { sep_min };
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = crate::grid::norm(&dir);
        if !(len > 1e-3 && len <= 1.0) {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= len);
        let span = room - 0.5 * s;
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-span..span)).collect();
        let x: Vec<f64> = c.iter().zip(&dir).map(|(c, d)| c - 0.5 * s * d).collect();
        let y: Vec<f64> = c.iter().zip(&dir).map(|(c, d)| c + 0.5 * s * d).collect();
        out.push((x, y));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongAinfRatio {
    pub max_delta_over_d: f64,
    pub max_d_over_delta: f64,
    pub samples: usize,
    pub seed: u64,
    /// Largest distance between a requested point and its grid node.
    pub max_snap: f64,
}

impl StrongAinfRatio {
    pub fn worst(&self) -> f64 {
        self.max_delta_over_d.max(self.max_d_over_delta)
    }
}

/// Extremal `δ_ω/d_ω` and `d_ω/δ_ω` over the pairs.
pub fn strong_ainfty_ratio(wd: &WeightedDistances, pairs: &[(Vec<f64>, Vec<f64>)], seed: u64) -> Result<StrongAinfRatio> {
    let rows: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|(x, y)| {
            let (a, da) = wd.snap(x)?;
            let (b, db) = wd.snap(y)?;
            if a == b {
                return Ok((f64::NAN, f64::NAN, 0.0));
            }
            let g = wd.omega.grid();
            let delta = delta_distance(&wd.omega, &g.node(a), &g.node(b))?;
            let d = wd.graph.distance(a, b);
            Ok((delta, d, da.max(db)))
        })
        .collect::<Result<_>>()?;
    let mut out = StrongAinfRatio {
        max_delta_over_d: 0.0,
        max_d_over_delta: 0.0,
        samples: 0,
        seed,
        max_snap: 0.0,
    };
    for (delta, d, snap) in rows {
        if delta.is_nan() {
            continue;
        }
        out.samples += 1;
        out.max_snap = out.max_snap.max(snap);
        let r = if d == 0.0 { f64::INFINITY } else { delta / d };
        let s = if delta == 0.0 { f64::INFINITY } else { d / delta };
        out.max_delta_over_d = out.max_delta_over_d.max(r);
        out.max_d_over_delta = out.max_d_over_delta.max(s);
    }
    Ok(out)
}

/// Largest sampled `δ(x,y) / (δ(x,z) + δ(z,y))` over triples.
pub fn quasi_triangle_constant(omega: &ScalarField, triples: &[[Vec<f64>; 3]]) -> Result<f64> {
    let vals: Vec<f64> = triples
        .par_iter()
        .map(|[x, y, z]| {
            let dxy = delta_distance(omega, x, y)?;
            let dxz = delta_distance(omega, x, z)?;
            let dzy = delta_distance(omega, z, y)?;
            Ok(dxy / (dxz + dzy))
        })
        .collect::<Result<_>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightConfig {
    pub p_values: Vec<f64>,
    pub holder_exponent: f64,
    pub balls: usize,
    pub pairs: usize,
    pub seed: u64,
    /// Ball radii range as fractions of the halfwidth.
    pub radius_range: (f64, f64),
    /// Pair separation range as fractions of the halfwidth.
    pub separation_range: (f64, f64),
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            p_values: vec![1.5, 2.0, 4.0],
            holder_exponent: 1.5,
            balls: DEFAULT_BALLS,
            pairs: 1000,
            seed: 7,
            radius_range: (0.05, 0.22),
            separation_range: (0.1, 0.8),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightReport {
    /// `(p, sampled A_p constant)`.
    pub ap_bounds: Vec<(f64, f64)>,
    pub doubling_constant: f64,
    pub doubling_exponent: f64,
    /// `(r, sampled constant)`.
    pub reverse_holder: (f64, f64),
    pub strong_ainf: StrongAinfRatio,
    pub seed: u64,
    pub balls: usize,
}

/// Runs every weight measurement in `cfg` on `ω`.
pub fn weight_report(omega: &ScalarField, cfg: &WeightConfig) -> Result<WeightReport> {
    let grid = *omega.grid();
    let l = grid.halfwidth();
    let (r0, r1) = (cfg.radius_range.0 * l, cfg.radius_range.1 * l);
    let balls = sample_balls(&grid, cfg.balls, cfg.seed, r0, r1, 2.0)?;
    let ap_bounds = cfg
        .p_values
        .iter()
        .map(|&p| Ok((p, ap_constant(omega, p, &balls)?)))
        .collect::<Result<Vec<_>>>()?;
    let (doubling_constant, doubling_exponent) = doubling_constant(omega, &balls)?;
    let rh = reverse_holder_check(omega, cfg.holder_exponent, &balls)?;
    let pairs = sample_pairs(&grid, cfg.pairs, cfg.seed ^ 0x5eed, cfg.separation_range.0 * l, cfg.separation_range.1 * l)?;
    let wd = WeightedDistances::new(omega.clone(), Stencil::default_for(grid.dim()))?;
    let strong_ainf = strong_ainfty_ratio(&wd, &pairs, cfg.seed ^ 0x5eed)?;
    Ok(WeightReport {
        ap_bounds,
        doubling_constant,
        doubling_exponent,
        reverse_holder: (cfg.holder_exponent, rh),
        strong_ainf,
        seed: cfg.seed,
        balls: balls.len(),
    })
}

/// Pairs one node to each side of the hyperplane `x_1 = 0`, separated along `x_2`.
///
/// These are the pairs for which `|x_1|^α` fails to be strong `A∞`: the path can
/// run along the zero set of the weight.
pub fn axis_straddling_pairs(grid: &Grid, count: usize, seed: u64, sep: (f64, f64)) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = grid.spacing();
    let room = grid.halfwidth() - 2.0 * h;
    (0..count)
        .map(|_| {
            let s = rng.gen_range(sep.0..sep.1);
            let c = rng.gen_range(-(room - s)..(room - s));
            let mut x = vec![0.0; grid.dim()];
            let mut y = vec![0.0; grid.dim()];
            x[0] = -h;
            y[0] = h;
            x[1] = c - 0.5 * s;
            y[1] = c + 0.5 * s;
            (x, y)
        })
        .collect()
}

/// Euclidean coordinates of a node, as a convenience for tests and reports.
pub fn node_point(grid: &Grid, idx: usize) -> [f64; MAX_DIM] {
    let mut x = [0.0; MAX_DIM];
    grid.node_into(idx, &mut x);
    x
}

/// `|x - y|` between two nodes.
pub fn node_distance(grid: &Grid, a: usize, b: usize) -> f64 {
    distance(&grid.node(a), &grid.node(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{log_potential_u, sharp_constant, Bump, QSpec};
    use std::f64::consts::PI;

    fn centered_balls(radii: &[f64], dim: usize) -> Vec<Ball> {
        radii.iter().map(|&r| Ball::new(vec![0.0; dim], r)).collect()
    }

    #[test]
    fn constant_weight_constants() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let one = ScalarField::constant(g, 1.0);
        let balls = sample_balls(&g, 50, 3, 0.2, 0.8, 2.0).unwrap();
        for p in [1.5, 2.0, 3.0] {
            assert!((ap_constant(&one, p, &balls).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((reverse_holder_check(&one, 2.0, &balls).unwrap() - 1.0).abs() < 1e-12);
        let (c, k) = doubling_constant(&one, &balls).unwrap();
        assert!((c - 4.0).abs() < 0.04, "{c}");
        assert!((k - 2.0).abs() < 0.02);
        assert!(ap_constant(&one, 1.0, &balls).is_err());
        assert!(reverse_holder_check(&one, 0.5, &balls).is_err());
    }

    #[test]
    fn doubling_in_four_dimensions() {
        let g = Grid::new(4, 1.0, 21).unwrap();
        let one = ScalarField::constant(g, 1.0);
        let balls = sample_balls(&g, 5, 1, 0.3, 0.4, 2.0).unwrap();
        let (c, k) = doubling_constant(&one, &balls).unwrap();
        assert!((c - 16.0).abs() < 0.8, "{c}");
        assert!((k - 4.0).abs() < 0.08);
    }

    #[test]
    fn ap_of_inverse_radius() {
        // centred balls: avg |x|^{-1} = 2/R, avg |x| = 2R/3, product 4/3
        let mut vals = Vec::new();
        for m in [81, 161] {
            let g = Grid::new(2, 2.0, m).unwrap();
            let w = power_weight(g, -1.0).unwrap();
            vals.push(ap_constant(&w, 2.0, &centered_balls(&[0.5, 1.0, 1.5], 2)).unwrap());
        }
        assert!((vals[1] - 4.0 / 3.0).abs() < 0.02, "{vals:?}");
        assert!((vals[0] - vals[1]).abs() / vals[1] < 0.05);
    }

    #[test]
    fn reverse_holder_of_radius_weight() {
        // centred: (2/(r+2))^{1/r} * 3/2
        let g = Grid::new(2, 2.0, 161).unwrap();
        let w = power_weight(g, 1.0).unwrap();
        let r = 1.5f64;
        let exact = (2.0 / (r + 2.0)).powf(1.0 / r) * 1.5;
        let v = reverse_holder_check(&w, r, &centered_balls(&[1.0], 2)).unwrap();
        assert!((v - exact).abs() < 2e-3, "{v} {exact}");
    }

    #[test]
    fn reverse_holder_grows_with_exponent_for_spikes() {
        let g = Grid::new(2, 3.0, 121).unwrap();
        let h = g.spacing();
        let spike = Bump { center: vec![0.0, 0.0], mass: 5.0, sigma: 3.0 * h };
        let w = ScalarField::from_fn(g, |x| 1.0 + spike.density(x)).unwrap();
        let balls = centered_balls(&[0.5, 1.0], 2);
        let vals: Vec<f64> = [1.25, 1.5, 2.0].iter().map(|&r| reverse_holder_check(&w, r, &balls).unwrap()).collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
    }

    #[test]
    fn delta_values() {
        let g = Grid::new(2, 4.0, 321).unwrap();
        let one = ScalarField::constant(g, 1.0);
        let d = delta_distance(&one, &[-1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((d - PI.sqrt()).abs() < 1e-3);
        let c = 0.4f64;
        let scaled = ScalarField::constant(g, (2.0 * c).exp());
        let d = delta_distance(&scaled, &[-0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((d - c.exp() * PI.sqrt() * 0.5).abs() < 1e-3);

        // oracle: polar quadrature of |z|^2 over the disk centred (2,0) radius 1
        let mut acc = 0.0;
        let (nr, nt) = (400, 400);
        for i in 0..nr {
            let r = (i as f64 + 0.5) / nr as f64;
            for j in 0..nt {
                let t = (j as f64 + 0.5) / nt as f64 * 2.0 * PI;
                let (zx, zy) = (2.0 + r * t.cos(), r * t.sin());
                acc += (zx * zx + zy * zy) * r * (1.0 / nr as f64) * (2.0 * PI / nt as f64);
            }
        }
        let oracle = acc.sqrt();
        assert!((oracle - (4.5 * PI).sqrt()).abs() < 1e-4);
        let sq = power_weight(g, 2.0).unwrap();
        let d = delta_distance(&sq, &[1.0, 0.0], &[3.0, 0.0]).unwrap();
        assert!((d - oracle).abs() / oracle < 2e-3, "{d} {oracle}");
        assert!(delta_distance(&sq, &[1.0, 0.0], &[4.5, 0.0]).is_err());
    }

    #[test]
    fn d_distance_flat_and_lower_bound() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let one = ScalarField::constant(g, 1.0);
        assert!((d_distance(&one, &[-1.0, 0.5], &[1.0, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        let gen = d_distance(&one, &[-1.0, -0.3], &[0.9, 0.85]).unwrap();
        let e = distance(&[-1.0, -0.3], &[0.9, 0.85]);
        assert!(gen >= e - 1e-12 && gen <= e * 1.028);

        let q = QSpec::bumps(g, vec![Bump { center: vec![0.0, 0.0], mass: 1.5, sigma: 0.3 }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        let min_eu = metric.length_density().into_iter().fold(f64::INFINITY, f64::min);
        let d = d_distance(metric.omega(), &[-1.5, 0.0], &[1.5, 0.0]).unwrap();
        assert!(d >= 3.0 * min_eu);
    }

    #[test]
    fn flat_strong_ainf_ratio_is_constant() {
        let g = Grid::new(2, 2.0, 81).unwrap();
        let wd = WeightedDistances::new(ScalarField::constant(g, 1.0), Stencil::ThirtyTwo).unwrap();
        let pairs = sample_pairs(&g, 60, 11, 0.5, 1.5).unwrap();
        let r = strong_ainfty_ratio(&wd, &pairs, 11).unwrap();
        let exact = PI.sqrt() / 2.0;
        assert!(r.max_delta_over_d <= exact * 1.01 && r.max_delta_over_d >= exact * 0.97, "{r:?}");
        assert!(1.0 / r.max_d_over_delta >= exact * 0.97);
        assert_eq!(r.samples, 60);
    }

    #[test]
    fn axis_weight_degenerates_under_refinement() {
        let mut ratios = Vec::new();
        for m in [41, 81, 161] {
            let g = Grid::new(2, 2.0, m).unwrap();
            let wd = WeightedDistances::new(axis_power_weight(g, 1.0).unwrap(), Stencil::ThirtyTwo).unwrap();
            let pairs = axis_straddling_pairs(&g, 20, 5, (0.8, 1.2));
            ratios.push(strong_ainfty_ratio(&wd, &pairs, 5).unwrap().max_delta_over_d);
        }
        assert!(ratios[1] >= 2.0 * ratios[0] && ratios[2] >= 2.0 * ratios[1], "{ratios:?}");
    }

    #[test]
    fn report_for_subcritical_bump() {
        let g = Grid::new(2, 4.0, 81).unwrap();
        let c2 = sharp_constant(2).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.0, 0.0], mass: 0.5 * c2, sigma: 0.4 }]).unwrap();
        let metric = log_potential_u(&q, 0.0).unwrap();
        let cfg = WeightConfig { pairs: 50, ..WeightConfig::default() };
        let rep = weight_report(metric.omega(), &cfg).unwrap();
        assert_eq!(rep.balls, 200);
        for (_, c) in &rep.ap_bounds {
            assert!(c.is_finite() && *c >= 1.0 - 1e-12);
        }
        assert!(rep.doubling_constant.is_finite() && rep.doubling_exponent >= 0.0);
        assert!(rep.strong_ainf.worst().is_finite());
        // A_p nesting: larger p never increases the constant
        for w in rep.ap_bounds.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12);
        }
        let json = serde_json::to_string(&rep).unwrap();
        let back: WeightReport = serde_json::from_str(&json).unwrap();
        for (a, b) in back.ap_bounds.iter().zip(&rep.ap_bounds) {
            assert!((a.1 - b.1).abs() < 1e-14);
        }
    }

    #[test]
    fn quasi_triangle_is_measured() {
        let g = Grid::new(2, 3.0, 61).unwrap();
        let w = power_weight(g, 1.0).unwrap();
        let triples = vec![[vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.2]], [vec![0.2, 0.3], vec![1.0, -0.4], vec![0.6, 0.0]]];
        let c = quasi_triangle_constant(&w, &triples).unwrap();
        assert!(c.is_finite() && c > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]
            #[test]
            fn distances_scale_and_are_symmetric(lambda in 0.2f64..5.0, seed in 0u64..1000) {
                let g = Grid::new(2, 2.0, 41).unwrap();
                let w = ScalarField::from_fn(g, |x| 1.0 + 0.5 * (x[0] * 1.7).sin() * (x[1] * 0.9).cos()).unwrap();
                let ws = w.map(|v| lambda * v).unwrap();
                let pairs = sample_pairs(&g, 3, seed, 0.3, 1.2).unwrap();
                let a = WeightedDistances::new(w, Stencil::ThirtyTwo).unwrap();
                let b = WeightedDistances::new(ws, Stencil::ThirtyTwo).unwrap();
                let s = lambda.sqrt();
                for (x, y) in &pairs {
                    let (d1, _) = a.d(x, y).unwrap();
                    let (d2, _) = b.d(x, y).unwrap();
                    let (d3, _) = a.d(y, x).unwrap();
                    prop_assert!((d2 - s * d1).abs() < 1e-10 * d2.max(1.0));
                    prop_assert!((d1 - d3).abs() < 1e-12);
                    let e1 = a.delta(x, y).unwrap();
                    let e2 = b.delta(x, y).unwrap();
                    prop_assert!((e2 - s * e1).abs() < 1e-10 * e2.max(1.0));
                }
                let ra = strong_ainfty_ratio(&a, &pairs, seed).unwrap();
                let rb = strong_ainfty_ratio(&b, &pairs, seed).unwrap();
                prop_assert!((ra.max_delta_over_d - rb.max_delta_over_d).abs() < 1e-10);
            }

            #[test]
            fn distances_are_monotone_in_the_weight(bump in 0.0f64..3.0) {
                let g = Grid::new(2, 2.0, 33).unwrap();
                let w1 = ScalarField::constant(g, 1.0);
                let w2 = ScalarField::from_fn(g, |x| 1.0 + bump * (-(x[0] * x[0] + x[1] * x[1])).exp()).unwrap();
                let (x, y) = (vec![-1.0, -0.25], vec![1.0, 0.5]);
                prop_assert!(d_distance(&w1, &x, &y).unwrap() <= d_distance(&w2, &x, &y).unwrap() + 1e-12);
                prop_assert!(delta_distance(&w1, &x, &y).unwrap() <= delta_distance(&w2, &x, &y).unwrap() + 1e-12);
            }
        }
    }
}
