//! Shortest paths on the weighted grid graph.
//!
//! An edge between nodes `a` and `b` costs `|a - b| * (ρ(a) + ρ(b)) / 2`,
//! where `ρ = ω^{1/n}` is the length density. For a conformal metric
//! `e^{2u}|dx|^2` the density is `e^u`, so graph distances approximate both the
//! path distance `d_ω` and the Riemannian distance `d_g`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, MAX_DIM};

/// Neighbourhood used to build graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// Axis, diagonal and knight moves (2-D only). Worst-case length excess 2.75%.
    Sixteen,
    /// `Sixteen` plus the `(3,1)` and `(3,2)` families (2-D only). Worst-case excess 1.3%.
    ThirtyTwo,
    /// Every offset in `{-1,0,1}^n` except zero.
    Cube,
}

impl Stencil {
    pub fn default_for(dim: usize) -> Self {
        if dim == 2 { Stencil::ThirtyTwo } else { Stencil::Cube }
    }

    fn generators(self) -> &'static [(i64, i64)] {
        match self {
            Stencil::Sixteen => &[(1, 0), (1, 1), (2, 1)],
            Stencil::ThirtyTwo => &[(1, 0), (1, 1), (2, 1), (3, 1), (3, 2)],
            Stencil::Cube => &[],
        }
    }

    /// Offsets in units of the grid spacing.
    pub fn offsets(self, dim: usize) -> Result<Vec<[i64; MAX_DIM]>> {
        let mut out = Vec::new();
        match self {
            Stencil::Cube => {
                let total = 3usize.pow(dim as u32);
                for code in 0..total {
                    let mut c = code;
                    let mut off = [0i64; MAX_DIM];
                    for o in off.iter_mut().take(dim) {
                        *o = (c % 3) as i64 - 1;
                        c /= 3;
                    }
                    if off.iter().any(|&o| o != 0) {
                        out.push(off);
                    }
                }
            }
            _ => {
                if dim != 2 {
                    return Err(Error::InvalidParameter(format!("{self:?} stencil is two-dimensional")));
                }
                for &(p, q) in self.generators() {
                    let mut family = vec![(p, q), (q, p)];
                    family.dedup();
                    for (a, b) in family {
                        for (sa, sb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                            let off = [sa * a, sb * b, 0, 0];
                            if !out.contains(&off) {
                                out.push(off);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct Move {
    delta: [i64; MAX_DIM],
    stride: isize,
    length: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Early-termination options for a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepLimit<'a> {
    /// Nodes farther than this are left at `INFINITY`.
    pub radius: Option<f64>,
    /// Stop as soon as every listed node is settled.
    pub targets: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct PathGraph {
    grid: Grid,
    density: Vec<f64>,
    moves: Vec<Move>,
    stencil: Stencil,
}

impl PathGraph {
    /// `density` holds `ω^{1/n}` per node; it must be finite and non-negative.
    pub fn new(grid: Grid, density: Vec<f64>, stencil: Stencil) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidParameter("length density must be finite and non-negative".into()));
        }
        let m = grid.resolution() as isize;
        let dim = grid.dim();
        let moves = stencil
            .offsets(dim)?
            .into_iter()
            .map(|delta| {
                let mut stride = 0isize;
                for &d in &delta[..dim] {
                    stride = stride * m + d as isize;
                }
                let length = delta[..dim].iter().map(|&d| (d * d) as f64).sum::<f64>().sqrt() * grid.spacing();
                Move { delta, stride, length }
            })
            .collect();
        Ok(Self { grid, density, moves, stencil })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn stencil(&self) -> Stencil {
        self.stencil
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Multi-source Dijkstra. Unreached nodes stay at `INFINITY`.
    pub fn sweep(&self, sources: &[usize], limit: &SweepLimit) -> Vec<f64> {
        let n = self.grid.len();
        let dim = self.grid.dim();
        let m = self.grid.resolution() as i64;
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0.0;
            heap.push(Entry { dist: 0.0, node: s });
        }
        let radius = limit.radius.unwrap_or(f64::INFINITY);
        let mut pending_targets = limit.targets.map(|t| {
            let mut want = vec![false; n];
            let mut count = 0usize;
            for &i in t {
                if !want[i] {
                    want[i] = true;
                    count += 1;
                }
            }
            (want, count)
        });

        while let Some(Entry { dist: d, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            if let Some((want, count)) = pending_targets.as_mut() {
                if want[node] {
                    *count -= 1;
                    if *count == 0 {
                        break;
                    }
                }
            }
            let mi = self.grid.multi_index(node);
            let rho = self.density[node];
            'moves: for mv in &self.moves {
                for a in 0..dim {
                    let k = mi[a] as i64 + mv.delta[a];
                    if k < 0 || k >= m {
                        continue 'moves;
                    }
                }
                let next = (node as isize + mv.stride) as usize;
                if done[next] {
                    continue;
                }
                let nd = d + mv.length * 0.5 * (rho + self.density[next]);
                if nd < dist[next] && nd <= radius {
                    dist[next] = nd;
                    heap.push(Entry { dist: nd, node: next });
                }
            }
        }
        // keep only settled values so truncated sweeps never report tentative labels
        for (d, ok) in dist.iter_mut().zip(&done) {
            if !ok {
                *d = f64::INFINITY;
            }
        }
        dist
    }

    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        self.sweep(&[source], &SweepLimit::default())
    }

    /// Graph distance between two nodes.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let d = self.sweep(&[a], &SweepLimit { radius: None, targets: Some(&[b]) });
        d[b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::distance;

    fn flat(dim: usize, l: f64, m: usize, stencil: Stencil) -> PathGraph {
        let g = Grid::new(dim, l, m).unwrap();
        PathGraph::new(g, vec![1.0; g.len()], stencil).unwrap()
    }

    #[test]
    fn stencil_sizes() {
        assert_eq!(Stencil::Sixteen.offsets(2).unwrap().len(), 16);
        assert_eq!(Stencil::ThirtyTwo.offsets(2).unwrap().len(), 32);
        assert_eq!(Stencil::Cube.offsets(2).unwrap().len(), 8);
        assert_eq!(Stencil::Cube.offsets(4).unwrap().len(), 80);
        assert!(Stencil::Sixteen.offsets(4).is_err());
    }

    #[test]
    fn axis_distances_are_exact() {
        let pg = flat(2, 1.0, 21, Stencil::Sixteen);
        let g = *pg.grid();
        let a = g.snap(&[-0.7, 0.2]).unwrap().0;
        let b = g.snap(&[0.5, 0.2]).unwrap().0;
        assert!((pg.distance(a, b) - 1.2).abs() < 1e-12);
    }

    /// Worst-case excess of the stencil metric over Euclidean length, by brute force over directions.
    fn anisotropy_bound(stencil: Stencil) -> f64 {
        let offs: Vec<(f64, f64)> = stencil
            .offsets(2)
            .unwrap()
            .iter()
            .map(|o| (o[0] as f64, o[1] as f64))
            .collect();
        let mut worst = 1.0f64;
        for k in 0..20000 {
            let th = k as f64 / 20000.0 * std::f64::consts::FRAC_PI_2;
            let v = (th.cos(), th.sin());
            // cheapest non-negative combination of two stencil vectors reaching v
            let mut best = f64::INFINITY;
            for a in &offs {
                for b in &offs {
                    let det = a.0 * b.1 - a.1 * b.0;
                    if det.abs() < 1e-12 {
                        continue;
                    }
                    let s = (v.0 * b.1 - v.1 * b.0) / det;
                    let t = (a.0 * v.1 - a.1 * v.0) / det;
                    if s >= -1e-12 && t >= -1e-12 {
                        let len = s * (a.0.hypot(a.1)) + t * (b.0.hypot(b.1));
                        best = best.min(len);
                    }
                }
            }
            worst = worst.max(best);
        }
        worst - 1.0
    }

    #[test]
    fn stencil_anisotropy() {
        let e16 = anisotropy_bound(Stencil::Sixteen);
        assert!(e16 < 0.028 && e16 > 0.027, "{e16}");
        let e32 = anisotropy_bound(Stencil::ThirtyTwo);
        assert!(e32 < 0.014, "{e32}");

        for stencil in [Stencil::Sixteen, Stencil::ThirtyTwo] {
            let bound = anisotropy_bound(stencil);
            let pg = flat(2, 2.0, 41, stencil);
            let g = *pg.grid();
            let src = g.snap(&[-1.5, -1.5]).unwrap().0;
            let d = pg.distances_from(src);
            let x0 = g.node(src);
            for i in 0..g.len() {
                if i == src {
                    continue;
                }
                let e = distance(&x0, &g.node(i));
                assert!(d[i] >= e * (1.0 - 1e-12));
                assert!(d[i] <= e * (1.0 + bound + 1e-9), "{} vs {}", d[i], e);
            }
        }
    }

    #[test]
    fn truncated_sweep_and_targets() {
        let pg = flat(2, 1.0, 21, Stencil::ThirtyTwo);
        let o = pg.grid().origin();
        let full = pg.distances_from(o);
        let cut = pg.sweep(&[o], &SweepLimit { radius: Some(0.5), targets: None });
        for (f, c) in full.iter().zip(&cut) {
            if *f <= 0.5 {
                assert_eq!(f, c);
            } else {
                assert!(c.is_infinite());
            }
        }
    }

    #[test]
    fn four_dimensional_cube_stencil() {
        let pg = flat(4, 1.0, 9, Stencil::Cube);
        let g = *pg.grid();
        let a = g.origin();
        let b = g.snap(&[0.5, 0.5, 0.5, 0.5]).unwrap().0;
        assert!((pg.distance(a, b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_density() {
        let g = Grid::new(2, 1.0, 9).unwrap();
        let mut d = vec![1.0; g.len()];
        d[3] = -1.0;
        assert!(PathGraph::new(g, d, Stencil::Sixteen).is_err());
    }
}
