//! Vitali coverings by geodesic balls, overlap counts, and annuli oscillation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalMetric;
use crate::error::{Error, Result};
use crate::geometry::{ball_from_map, DistanceMap};
use crate::grid::Grid;
use crate::paths::SweepLimit;
use crate::spectral::WeightedOperator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverCertificate {
    /// `d_g(x_i, x_j) > 2√t` for every pair of centers.
    pub disjoint: bool,
    /// Every domain node lies within `2√t` of a center.
    pub covered: bool,
    /// Smallest center spacing, if two centers lie within `4√t`.
    pub min_separation: Option<f64>,
    /// Largest distance from a domain node to its nearest center.
    pub max_gap: f64,
}

impl CoverCertificate {
    pub fn passes(&self) -> bool {
        self.disjoint && self.covered
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitaliCover {
    pub t: f64,
    pub radius: f64,
    pub grid: Grid,
    /// Center nodes in acceptance order.
    pub centers: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    pub domain_size: usize,
    /// `h · max e^u` over the domain: distances are resolved to this.
    pub slack: f64,
    pub certificate: CoverCertificate,
}

impl VitaliCover {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Greedy maximal packing: scan the domain in index (lexicographic) order and accept a node
/// when it is farther than `2√t` from every accepted center. Both certificates are then
/// recomputed from fresh sweeps.
pub fn build_cover(metric: &ConformalMetric, domain: &[usize], t: f64) -> Result<VitaliCover> {
    if domain.is_empty() {
        return Err(Error::EmptyRegion("cover domain is empty".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("cover scale must be positive, got {t}")));
    }
    let grid = *metric.grid();
    let rho_max = domain.iter().map(|&i| metric.u().get(i)).fold(f64::NEG_INFINITY, f64::max).exp();
    let slack = grid.spacing() * rho_max;
    let radius = t.sqrt();
    if radius < 3.0 * slack {
        return Err(Error::Unresolvable(format!("√t = {radius} is below 3h·max e^u = {}", 3.0 * slack)));
    }
    let mut domain = domain.to_vec();
    domain.sort_unstable();
    domain.dedup();
    let reach = 2.0 * radius;
    let paths = metric.paths();
    let mut near = vec![f64::INFINITY; grid.len()];
    let mut centers = Vec::new();
    for &i in &domain {
        if near[i] > reach {
            centers.push(i);
            let d = paths.sweep(&[i], &SweepLimit { radius: Some(reach), targets: None });
            for (a, b) in near.iter_mut().zip(&d) {
                *a = a.min(*b);
            }
        }
    }
    let certificate = certify(metric, &domain, &centers, reach);
    let points = centers.iter().map(|&c| grid.node(c)).collect();
    Ok(VitaliCover { t, radius, grid, centers, points, domain_size: domain.len(), slack, certificate })
}

fn certify(metric: &ConformalMetric, domain: &[usize], centers: &[usize], reach: f64) -> CoverCertificate {
    let paths = metric.paths();
    let min_separation = centers
        .par_iter()
        .map(|&c| {
            let d = paths.sweep(&[c], &SweepLimit { radius: Some(2.0 * reach), targets: None });
            centers.iter().filter(|&&o| o != c).map(|&o| d[o]).fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min);
    let d = paths.sweep(centers, &SweepLimit { radius: Some(reach), targets: None });
    let max_gap = domain.iter().map(|&i| d[i]).fold(0.0, f64::max);
    CoverCertificate {
        disjoint: min_separation > reach,
        covered: max_gap <= reach,
        min_separation: min_separation.is_finite().then_some(min_separation),
        max_gap,
    }
}

/// Domain nodes at least `margin` index steps from the rim.
pub fn interior_domain(grid: &Grid, margin: usize) -> Vec<usize> {
    (0..grid.len()).filter(|&i| grid.in_band(i, margin)).collect()
}

/// Nodes of the axis-aligned cube `[-half, half]^n`.
pub fn box_domain(grid: &Grid, half: f64) -> Vec<usize> {
    let mut x = vec![0.0; grid.dim()];
    (0..grid.len())
        .filter(|&i| {
            grid.node_into(i, &mut x);
            x.iter().all(|v| v.abs() <= half * (1.0 + 1e-12))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSample {
    pub x: usize,
    pub theta: f64,
    /// `#{j : d_g(x, x_j) ≤ θ√t}`.
    pub count: usize,
    /// `Σ_{j counted} Vol_g(B^g(x_j, √t))`, if every counted ball fits in the box.
    pub packed_volume: Option<f64>,
    /// `Vol_g(B^g(x, (1+θ)√t))`.
    pub enclosing_volume: Option<f64>,
    pub min_center_volume: Option<f64>,
}

impl OverlapSample {
    /// `count · min_j Vol(B(x_j, √t)) ≤ Σ Vol(B(x_j, √t)) ≤ Vol(B(x, (1+θ)√t))`, when measurable.
    pub fn chain_holds(&self) -> Option<bool> {
        let (p, e, m) = (self.packed_volume?, self.enclosing_volume?, self.min_center_volume.unwrap_or(0.0));
        let tol = 1e-12 * e;
        Some(self.count as f64 * m <= p + tol && p <= e + tol)
    }
}

/// `Vol_g(B^g(x_j, √t))` for every center, `None` where the ball meets the rim.
pub fn center_volumes(cover: &VitaliCover, metric: &ConformalMetric) -> Vec<Option<f64>> {
    cover
        .centers
        .par_iter()
        .map(|&c| {
            let map = DistanceMap::new(metric, c, cover.radius);
            ball_from_map(metric, &map, cover.radius).ok().map(|b| b.volume)
        })
        .collect()
}

/// Overlap count at `x` together with the volume chain of the packing argument.
pub fn overlap_count(
    cover: &VitaliCover,
    metric: &ConformalMetric,
    volumes: &[Option<f64>],
    x: usize,
    theta: f64,
) -> Result<OverlapSample> {
    if !(theta >= 1.0) {
        return Err(Error::InvalidParameter(format!("overlap needs θ ≥ 1, got {theta}")));
    }
    let big = (1.0 + theta) * cover.radius;
    let map = DistanceMap::new(metric, x, big);
    let reach = theta * cover.radius;
    let hits: Vec<usize> = (0..cover.len()).filter(|&j| map.dist[cover.centers[j]] <= reach).collect();
    let vols: Option<Vec<f64>> = hits.iter().map(|&j| volumes[j]).collect();
    let enclosing_volume = ball_from_map(metric, &map, big).ok().map(|b| b.volume);
    let (packed_volume, min_center_volume) = match vols {
        Some(v) => (Some(v.iter().sum()), v.iter().cloned().reduce(f64::min)),
        None => (None, None),
    };
    Ok(OverlapSample { x, theta, count: hits.len(), packed_volume, enclosing_volume, min_center_volume })
}

/// Smallest `C̃` with `count ≤ C̃ θ^{2κ}` on the given samples.
pub fn fit_overlap_constant(samples: &[OverlapSample], kappa: f64) -> f64 {
    samples.iter().map(|s| s.count as f64 / s.theta.powf(2.0 * kappa)).fold(0.0, f64::max)
}

/// Whether every sample satisfies `count ≤ C̃ θ^{2κ}`.
pub fn overlap_bound_holds(samples: &[OverlapSample], c_tilde: f64, kappa: f64) -> bool {
    samples.iter().all(|s| s.count as f64 <= c_tilde * s.theta.powf(2.0 * kappa) * (1.0 + 1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSample {
    pub j: usize,
    pub k: u32,
    /// `‖g_k^{j,t}‖²_{L²(C_k, μ₂)}`.
    pub lhs: f64,
    /// `Vol(B^g(x_j, r_k))^{-1} ∬_{B^g(x_j, 2^{k+2}√t)²} |f(x) - f(y)|² dμ₂ dμ₂`.
    pub rhs: f64,
    /// `Vol(B^g(x_j, r_k))`, `r_0 = 2√t` and `r_k = 2^k √t` for `k ≥ 1`.
    pub volume: f64,
}

impl AnnulusSample {
    pub fn ratio(&self) -> f64 {
        if self.rhs == 0.0 {
            0.0
        } else {
            self.lhs / self.rhs
        }
    }
}

/// Both sides of the annulus bound around center `j` at level `k`.
///
/// `g = f - m`, with `m` the `μ₂`-mean of `f` over `B^g(x_j, 2√t)`. `C_0 = B^g(x_j, 4√t)`
/// and `C_k = B^g(x_j, 2^{k+2}√t) \ B^g(x_j, 2^{k+1}√t)`. `μ₂` lives on the nodes of `op`.
pub fn annuli_oscillation(
    cover: &VitaliCover,
    metric: &ConformalMetric,
    op: &WeightedOperator,
    f: &[f64],
    j: usize,
    k: u32,
) -> Result<AnnulusSample> {
    let center = *cover
        .centers
        .get(j)
        .ok_or_else(|| Error::InvalidParameter(format!("cover has no center {j}")))?;
    let s = cover.radius;
    let outer = 2f64.powi(k as i32 + 2) * s;
    let inner = if k == 0 { -1.0 } else { 2f64.powi(k as i32 + 1) * s };
    let map = DistanceMap::new(metric, center, outer);
    // fails when the outer ball meets the rim
    ball_from_map(metric, &map, outer)?;
    let vol_r = if k == 0 { 2.0 * s } else { 2f64.powi(k as i32) * s };
    let volume = ball_from_map(metric, &map, vol_r)?.volume;
    let mass = op.mass();
    let (mut w2, mut f2) = (0.0, 0.0);
    for (l, &g) in op.nodes().iter().enumerate() {
        if map.dist[g] <= 2.0 * s {
            w2 += mass[l];
            f2 += mass[l] * f[l];
        }
    }
    if w2 == 0.0 {
        return Err(Error::EmptyRegion(format!("B^g(x_{j}, 2√t) misses the support of μ₂")));
    }
    let mean = f2 / w2;
    let mut lhs = 0.0;
    let mut in_annulus = 0usize;
    let mut members = Vec::new();
    for (l, &g) in op.nodes().iter().enumerate() {
        let d = map.dist[g];
        if d <= outer {
            members.push(l);
            if d > inner {
                lhs += (f[l] - mean).powi(2) * mass[l];
                in_annulus += 1;
            }
        }
    }
    if in_annulus == 0 {
        return Ok(AnnulusSample { j, k, lhs: 0.0, rhs: 0.0, volume });
    }
    // ∬ (f(x) - f(y))² dμ dμ = 2 M ∫ (f - f̄)² dμ
    let m: f64 = members.iter().map(|&l| mass[l]).sum();
    let fbar = members.iter().map(|&l| mass[l] * f[l]).sum::<f64>() / m;
    let spread: f64 = members.iter().map(|&l| mass[l] * (f[l] - fbar).powi(2)).sum();
    Ok(AnnulusSample { j, k, lhs, rhs: 2.0 * m * spread / volume, volume })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{log_potential_u, Bump, QSpec};
    use crate::grid::Ball;
    use crate::testfn::{TestFunction, TestFunctionSet};
    use crate::weights::doubling_constant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn flat_cover_counts_and_certificates() {
        let g = Grid::new(2, 5.5, 111).unwrap();
        let metric = ConformalMetric::flat(g);
        let domain = box_domain(&g, 4.0);
        let cover = build_cover(&metric, &domain, 1.0).unwrap();
        assert!(cover.certificate.passes(), "{:?}", cover.certificate);
        // covering by doubled balls from below; packing into the box grown by √t from above
        let count = cover.len() as f64;
        assert!((64.0 / (4.0 * PI)..=100.0 / PI).contains(&count), "{count}");
        let back = VitaliCover::from_json(&cover.to_json().unwrap()).unwrap();
        assert_eq!(back, cover);
        assert!(matches!(build_cover(&metric, &domain, 0.05), Err(Error::Unresolvable(_))));
        assert!(build_cover(&metric, &[], 1.0).is_err());
    }

    #[test]
    fn cylinder_centers_spread_evenly_in_log_radius() {
        let g = Grid::new(2, 12.0, 257).unwrap();
        let metric = ConformalMetric::from_fn(g, |x| -0.5 * (0.01 + x[0] * x[0] + x[1] * x[1]).ln()).unwrap();
        let domain: Vec<usize> = (0..g.len())
            .filter(|&i| {
                let r = crate::grid::norm(&g.node(i));
                (1.0..=10.0).contains(&r)
            })
            .collect();
        let cover = build_cover(&metric, &domain, 0.09).unwrap();
        assert!(cover.certificate.passes());
        // the cylinder coordinate is log r; equal log-widths carry equal area 2π·width
        let edges = [0.0, 10f64.ln() / 3.0, 2.0 * 10f64.ln() / 3.0, 10f64.ln()];
        let mut counts = [0usize; 3];
        for p in &cover.points {
            let s = crate::grid::norm(p).ln();
            let band = edges.windows(2).position(|w| s >= w[0] && s < w[1]).unwrap_or(2);
            counts[band] += 1;
        }
        let (lo, hi) = (*counts.iter().min().unwrap() as f64, *counts.iter().max().unwrap() as f64);
        assert!(hi / lo < 1.5, "{counts:?}");
    }

    fn bump_metric(m: usize) -> ConformalMetric {
        let g = Grid::new(2, 2.0, m).unwrap();
        let q = QSpec::bumps(g, vec![Bump { center: vec![0.1, 0.0], mass: 0.5 * PI, sigma: 0.3 }]).unwrap();
        log_potential_u(&q, 0.0).unwrap()
    }

    #[test]
    fn overlap_counts_obey_the_doubling_bound() {
        let metric = bump_metric(161);
        let g = *metric.grid();
        let domain = interior_domain(&g, 2);
        let cover = build_cover(&metric, &domain, 0.0064).unwrap();
        assert!(cover.certificate.passes());
        let vols = center_volumes(&cover, &metric);
        let balls = crate::weights::sample_balls(&g, 60, 3, 0.1, 0.4, 2.0).unwrap();
        let (_, kappa) = doubling_constant(metric.omega(), &balls).unwrap();
        let inner = g.nodes_in_ball(&Ball::new(vec![0.0, 0.0], 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pick = |rng: &mut ChaCha8Rng| inner[rng.gen_range(0..inner.len())];
        let fit: Vec<OverlapSample> =
            (0..10).map(|_| overlap_count(&cover, &metric, &vols, pick(&mut rng), 2.0).unwrap()).collect();
        let c_tilde = fit_overlap_constant(&fit, kappa);
        let mut samples = Vec::new();
        for _ in 0..20 {
            let x = pick(&mut rng);
            for theta in [2.0, 4.0, 8.0] {
                let s = overlap_count(&cover, &metric, &vols, x, theta).unwrap();
                assert_eq!(s.chain_holds(), Some(true), "{s:?}");
                samples.push(s);
            }
        }
        assert!(overlap_bound_holds(&samples, c_tilde, kappa));
        // a center always counts itself
        let s = overlap_count(&cover, &metric, &vols, cover.centers[cover.len() / 2], 1.0).unwrap();
        assert!(s.count >= 1);
        assert!(overlap_count(&cover, &metric, &vols, inner[0], 0.5).is_err());
    }

    #[test]
    fn coarser_scale_sees_fewer_centers_at_fixed_reach() {
        let metric = bump_metric(161);
        let g = *metric.grid();
        let domain = interior_domain(&g, 2);
        let reach = 0.6;
        let fine = build_cover(&metric, &domain, 0.01).unwrap();
        let coarse = build_cover(&metric, &domain, 0.04).unwrap();
        let (vf, vc) = (center_volumes(&fine, &metric), center_volumes(&coarse, &metric));
        let inner = g.nodes_in_ball(&Ball::new(vec![0.0, 0.0], 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut a, mut b) = (0usize, 0usize);
        for _ in 0..20 {
            let x = inner[rng.gen_range(0..inner.len())];
            a += overlap_count(&fine, &metric, &vf, x, reach / fine.radius).unwrap().count;
            b += overlap_count(&coarse, &metric, &vc, x, reach / coarse.radius).unwrap().count;
        }
        assert!(b <= a, "{a} {b}");
    }

    #[test]
    fn annuli_against_brute_force() {
        let g = Grid::new(2, 2.0, 129).unwrap();
        let metric = ConformalMetric::flat(g);
        let domain = interior_domain(&g, 2);
        let cover = build_cover(&metric, &domain, 0.01).unwrap();
        let op = WeightedOperator::assemble(&metric, &Ball::new(vec![0.0, 0.0], 0.9)).unwrap();
        let f = op.restrict(&TestFunction::coordinate(2, 0).sample(&g).unwrap().values);
        let j = cover.centers.iter().position(|&c| crate::grid::norm(&g.node(c)) < 0.2).unwrap();
        let s = annuli_oscillation(&cover, &metric, &op, &f, j, 0).unwrap();
        let map = DistanceMap::new(&metric, cover.centers[j], 4.0 * cover.radius);
        let ball: Vec<usize> =
            (0..op.len()).filter(|&l| map.dist[op.nodes()[l]] <= 4.0 * cover.radius).collect();
        let mut brute = 0.0;
        for &a in &ball {
            for &b in &ball {
                brute += (f[a] - f[b]).powi(2) * op.mass()[a] * op.mass()[b];
            }
        }
        assert!((s.rhs * s.volume / brute - 1.0).abs() < 1e-10);
        assert!(s.lhs > 0.0 && s.ratio().is_finite());
        let c = vec![3.0; op.len()];
        let z = annuli_oscillation(&cover, &metric, &op, &c, j, 1).unwrap();
        assert_eq!((z.lhs, z.rhs), (0.0, 0.0));
        // shift and scale invariance of the ratio
        let set = TestFunctionSet::generate(2, 1, 4, 0.5);
        let h = op.restrict(&set.functions[0].sample(&g).unwrap().values);
        let moved: Vec<f64> = h.iter().map(|v| -2.0 * v + 1.5).collect();
        for k in 0..3 {
            let (a, b) = (
                annuli_oscillation(&cover, &metric, &op, &h, j, k).unwrap(),
                annuli_oscillation(&cover, &metric, &op, &moved, j, k).unwrap(),
            );
            assert!((a.ratio() - b.ratio()).abs() <= 1e-10 * a.ratio().max(1e-300));
        }
        assert!(annuli_oscillation(&cover, &metric, &op, &h, j, 6).is_err());
    }
}
