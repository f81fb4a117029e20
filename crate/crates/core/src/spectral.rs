//! Spectral calculus of the weighted Laplacian `L = -Δ_g` on a ball `2B`.
//!
//! On the node set of `2B` the operator is assembled from the edge form
//!
//! ```text
//! Q(f) = Σ_edges c_e (f_a - f_b)^2 h^{n-2},   c_e = mean of ω^{1-2/n} at a and b
//! ```
//!
//! with mass `M = diag(ω h^n)`, so `L = M^{-1} A` is self-adjoint and nonnegative
//! in the `μ₂ = ω χ_{2B} dx` inner product. Edges leaving `2B` are dropped, which
//! is the natural (zero co-normal flux) boundary condition. Sign convention:
//! `L = -Δ_g`, so `(I + tL)^{-1}` and fractional powers make sense.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::coo::CooMatrix;
use nalgebra_sparse::csc::CscMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::conformal::ConformalMetric;
use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, unit_sphere_area, Ball, Grid, ScalarField, MAX_DIM};
use crate::paths::SweepLimit;
use crate::quad;
use crate::testfn::Sampled;

/// Largest operator handled by a dense eigensolve.
pub const DENSE_LIMIT: usize = 2500;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct WeightedOperator {
    grid: Grid,
    ball: Ball,
    nodes: Vec<usize>,
    local: Vec<u32>,
    weight: Vec<f64>,
    mass: Vec<f64>,
    /// `(a, b, c_e h^{n-2})` with local indices `a < b`.
    edges: Vec<(u32, u32, f64)>,
}

impl WeightedOperator {
    pub fn assemble(metric: &ConformalMetric, ball: &Ball) -> Result<Self> {
        Self::from_weight(metric.omega(), ball)
    }

    /// Operator of a general weight `ω` on the nodes of `ball`.
    pub fn from_weight(omega: &ScalarField, ball: &Ball) -> Result<Self> {
        let grid = *omega.grid();
        if !grid.contains_ball(ball) {
            return Err(Error::OutOfBox(format!("operator ball at {:?} radius {} leaves the box", ball.center, ball.radius)));
        }
        let nodes = grid.nodes_in_ball(ball);
        if nodes.len() < 2 {
            return Err(Error::EmptyRegion("operator ball holds fewer than two nodes".into()));
        }
        let mut local = vec![NONE; grid.len()];
        for (k, &i) in nodes.iter().enumerate() {
            local[i] = k as u32;
        }
        let weight: Vec<f64> = nodes.iter().map(|&i| omega.get(i)).collect();
        if weight.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("degenerate weight: ω must be positive and finite on 2B".into()));
        }
        let dim = grid.dim();
        let h = grid.spacing();
        let expo = 1.0 - 2.0 / dim as f64;
        let scale = h.powi(dim as i32 - 2);
        let mass: Vec<f64> = weight.iter().map(|w| w * grid.cell_volume()).collect();
        let m = grid.resolution();
        let mut edges = Vec::with_capacity(nodes.len() * dim);
        for (a, &i) in nodes.iter().enumerate() {
            let mi = grid.multi_index(i);
            let mut stride = 1usize;
            for axis in (0..dim).rev() {
                if mi[axis] + 1 < m {
                    let b = local[i + stride];
                    if b != NONE {
                        let c = 0.5 * (weight[a].powf(expo) + weight[b as usize].powf(expo));
                        edges.push((a as u32, b, c * scale));
                    }
                }
                stride *= m;
            }
        }
        Ok(Self { grid, ball: ball.clone(), nodes, local, weight, mass, edges })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ball(&self) -> &Ball {
        &self.ball
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Global grid indices of the operator nodes, ascending.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn local_index(&self, global: usize) -> Option<usize> {
        match self.local[global] {
            NONE => None,
            k => Some(k as usize),
        }
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Values of a grid field on the operator nodes.
    pub fn restrict(&self, field: &ScalarField) -> Vec<f64> {
        self.nodes.iter().map(|&i| field.get(i)).collect()
    }

    /// `Q(f) = ⟨Lf, f⟩_{μ₂}`.
    pub fn energy(&self, f: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b, c)| {
                let d = f[a as usize] - f[b as usize];
                c * d * d
            })
            .sum()
    }

    /// `A f` (stiffness, without the mass).
    pub fn stiffness_apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        for &(a, b, c) in &self.edges {
            let (a, b) = (a as usize, b as usize);
            let d = c * (f[a] - f[b]);
            out[a] += d;
            out[b] -= d;
        }
        out
    }

    /// `L f = M^{-1} A f`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness_apply(f);
        out.iter_mut().zip(&self.mass).for_each(|(v, m)| *v /= m);
        out
    }

    /// `⟨f, g⟩_{μ₂}`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.mass).map(|((a, b), m)| a * b * m).sum()
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// `μ₂(2B)`.
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `M + t A` in compressed-column form.
    fn shifted_matrix(&self, mass_coef: f64, t: f64) -> CscMatrix<f64> {
        let n = self.len();
        let mut coo = CooMatrix::new(n, n);
        for (k, m) in self.mass.iter().enumerate() {
            coo.push(k, k, mass_coef * m);
        }
        for &(a, b, c) in &self.edges {
            let (a, b) = (a as usize, b as usize);
            coo.push(a, a, t * c);
            coo.push(b, b, t * c);
            coo.push(a, b, -t * c);
            coo.push(b, a, -t * c);
        }
        CscMatrix::from(&coo)
    }

    /// Dense `M^{-1/2} A M^{-1/2}`.
    fn dense_symmetric(&self) -> DMatrix<f64> {
        let n = self.len();
        let s: Vec<f64> = self.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut b = DMatrix::zeros(n, n);
        for &(a, c_b, c) in &self.edges {
            let (a, bb) = (a as usize, c_b as usize);
            b[(a, a)] += c * s[a] * s[a];
            b[(bb, bb)] += c * s[bb] * s[bb];
            b[(a, bb)] -= c * s[a] * s[bb];
            b[(bb, a)] -= c * s[a] * s[bb];
        }
        b
    }

    /// Local indices of the nodes inside the Euclidean ball `b`.
    pub fn sub_ball(&self, b: &Ball) -> Vec<usize> {
        self.grid.nodes_in_ball(b).into_iter().filter_map(|i| self.local_index(i)).collect()
    }

    /// `(∫_B |f - f_{B,ω}|^p ω, ω(B))` over the sub-ball node set, with the `μ₂` masses.
    pub fn oscillation(&self, subset: &[usize], f: &[f64], p: f64) -> Result<(f64, f64)> {
        if subset.is_empty() {
            return Err(Error::EmptyRegion("inner ball holds no nodes".into()));
        }
        let vol: f64 = subset.iter().map(|&k| self.mass[k]).sum();
        let mean = subset.iter().map(|&k| f[k] * self.mass[k]).sum::<f64>() / vol;
        let num = subset.iter().map(|&k| (f[k] - mean).abs().powf(p) * self.mass[k]).sum();
        Ok((num, vol))
    }
}

/// Lowest eigenpairs of `A v = λ M v`, `M`-orthonormal.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
    mass: Vec<f64>,
    nodes: Vec<usize>,
    complete: bool,
}

/// How many eigenpairs to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigCount {
    All,
    Lowest(usize),
}

pub fn eig(op: &WeightedOperator, count: EigCount) -> Result<SpectralDecomposition> {
    let n = op.len();
    match count {
        EigCount::Lowest(k) if k > n => Err(Error::InvalidParameter(format!("asked for {k} eigenpairs of a {n}-node operator"))),
        EigCount::Lowest(k) if n > DENSE_LIMIT => lanczos_lowest(op, k),
        _ if n > DENSE_LIMIT => Err(Error::InvalidParameter(format!(
            "full decomposition of {n} nodes exceeds the dense limit {DENSE_LIMIT}"
        ))),
        _ => {
            let k = match count {
                EigCount::All => n,
                EigCount::Lowest(k) => k,
            };
            dense_eig(op, k)
        }
    }
}

fn dense_eig(op: &WeightedOperator, k: usize) -> Result<SpectralDecomposition> {
    let n = op.len();
    let se = op.dense_symmetric().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let s: Vec<f64> = op.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut vectors = DMatrix::zeros(n, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (col, &j) in order.iter().take(k).enumerate() {
        eigenvalues.push(se.eigenvalues[j]);
        for r in 0..n {
            vectors[(r, col)] = se.eigenvectors[(r, j)] * s[r];
        }
    }
    Ok(SpectralDecomposition { eigenvalues, vectors, mass: op.mass.clone(), nodes: op.nodes.clone(), complete: k == n })
}

/// Shift-invert Lanczos on `(A + sM)^{-1} M` with full reorthogonalisation.
fn lanczos_lowest(op: &WeightedOperator, k: usize) -> Result<SpectralDecomposition> {
    let n = op.len();
    let r = op.ball.radius;
    let mean_w = op.weight.iter().sum::<f64>() / n as f64;
    let shift = mean_w.powf(-2.0 / op.grid.dim() as f64) / (r * r);
    let factor = CscCholesky::factor(&op.shifted_matrix(shift, 1.0)).map_err(|e| Error::Solver(format!("{e:?}")))?;
    let solve = |v: &[f64]| -> Vec<f64> {
        let rhs = DVector::from_iterator(n, v.iter().zip(&op.mass).map(|(a, m)| a * m));
        factor.solve(&rhs).iter().cloned().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a2c20);
    let mut q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nq = op.norm(&q);
    q.iter_mut().for_each(|v| *v /= nq);
    let max_steps = n.min(400);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let tol = 1e-11;
    loop {
        let j = basis.len() - 1;
        let mut w = solve(&basis[j]);
        let a = op.inner(&basis[j], &w);
        alpha.push(a);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = op.inner(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let bn = op.norm(&w);
        let steps = alpha.len();
        let done = steps >= max_steps || bn < 1e-14 * a.abs().max(1e-300);
        if steps >= k + 2 && (steps.is_multiple_of(10) || done) {
            let (theta, y) = tridiagonal_eig(&alpha, &beta);
            // Ritz residual of the k largest θ (lowest λ)
            let conv = (0..k).all(|i| {
                let col = steps - 1 - i;
                (bn * y[(steps - 1, col)]).abs() <= tol * theta[col].abs()
            });
            if conv || done {
                let mut eigenvalues = Vec::with_capacity(k);
                let mut vectors = DMatrix::zeros(n, k);
                for i in 0..k {
                    let col = steps - 1 - i;
                    eigenvalues.push(1.0 / theta[col] - shift);
                    for (bi, b) in basis.iter().enumerate() {
                        let c = y[(bi, col)];
                        for r in 0..n {
                            vectors[(r, i)] += c * b[r];
                        }
                    }
                }
                if !conv {
                    return Err(Error::Solver(format!("Lanczos did not converge in {steps} steps")));
                }
                return Ok(SpectralDecomposition {
                    eigenvalues,
                    vectors,
                    mass: op.mass.clone(),
                    nodes: op.nodes.clone(),
                    complete: false,
                });
            }
        }
        if done {
            return Err(Error::Solver("Lanczos broke down".into()));
        }
        beta.push(bn);
        w.iter_mut().for_each(|v| *v /= bn);
        basis.push(w);
    }
}

/// Eigenvalues (ascending) and eigenvectors of the symmetric tridiagonal `(α, β)`.
fn tridiagonal_eig(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let se = t.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let theta = order.iter().map(|&j| se.eigenvalues[j]).collect();
    let mut y = DMatrix::zeros(k, k);
    for (c, &j) in order.iter().enumerate() {
        y.set_column(c, &se.eigenvectors.column(j));
    }
    (theta, y)
}

/// `⟨f, g(L) f⟩_{μ₂}` by Lanczos quadrature with `steps` steps started from `f`.
pub fn lanczos_quadratic_form(op: &WeightedOperator, f: &[f64], steps: usize, g: impl Fn(f64) -> f64) -> f64 {
    let nf = op.norm(f);
    if nf == 0.0 {
        return 0.0;
    }
    let mut basis: Vec<Vec<f64>> = vec![f.iter().map(|v| v / nf).collect()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for _ in 0..steps.min(op.len()) {
        let q = basis.last().expect("nonempty basis");
        let mut w = op.apply(q);
        alpha.push(op.inner(q, &w));
        for _ in 0..2 {
            for b in &basis {
                let c = op.inner(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let bn = op.norm(&w);
        if bn < 1e-12 * alpha.last().unwrap().abs().max(1e-300) || basis.len() == steps {
            break;
        }
        beta.push(bn);
        w.iter_mut().for_each(|v| *v /= bn);
        basis.push(w);
    }
    beta.truncate(alpha.len().saturating_sub(1));
    let (theta, y) = tridiagonal_eig(&alpha, &beta);
    nf * nf * theta.iter().enumerate().map(|(j, th)| y[(0, j)] * y[(0, j)] * g(th.max(0.0))).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct FracApply {
    pub values: Vec<f64>,
    /// `‖L^s f‖_{μ₂}`.
    pub norm: f64,
    /// `‖f - Σ f̂_k v_k‖ / ‖f‖`; large values mean the basis is truncated.
    pub projection_residual: f64,
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().cloned().collect()
    }

    /// `λ_k` clamped at zero (the null eigenvalue comes out at round-off level).
    fn lambda(&self, k: usize) -> f64 {
        let top = self.eigenvalues.last().copied().unwrap_or(0.0).abs();
        let l = self.eigenvalues[k];
        if l <= 1e-11 * top { 0.0 } else { l }
    }

    /// `f̂_k = ⟨f, v_k⟩_{μ₂}`.
    pub fn coefficients(&self, f: &[f64]) -> Vec<f64> {
        let mf = DVector::from_iterator(f.len(), f.iter().zip(&self.mass).map(|(a, m)| a * m));
        (self.vectors.transpose() * mf).iter().cloned().collect()
    }

    fn mass_norm(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.mass).map(|(a, m)| a * a * m).sum::<f64>().sqrt()
    }

    pub fn projection_residual(&self, f: &[f64]) -> f64 {
        let c = self.coefficients(f);
        let proj = &self.vectors * DVector::from_vec(c);
        let r: Vec<f64> = f.iter().zip(proj.iter()).map(|(a, b)| a - b).collect();
        let nf = self.mass_norm(f);
        if nf == 0.0 { 0.0 } else { self.mass_norm(&r) / nf }
    }

    /// `L^s f = Σ λ_k^s f̂_k v_k` and its norm.
    pub fn frac_apply(&self, s: f64, f: &[f64]) -> Result<FracApply> {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("fractional power must be positive, got {s}")));
        }
        let c = self.coefficients(f);
        let scaled: Vec<f64> = c.iter().enumerate().map(|(k, v)| self.lambda(k).powf(s) * v).collect();
        let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = (&self.vectors * DVector::from_vec(scaled)).iter().cloned().collect();
        Ok(FracApply { values, norm, projection_residual: self.projection_residual(f) })
    }

    /// `‖L^s f‖²_{μ₂} = Σ λ_k^{2s} f̂_k²`.
    pub fn frac_norm_sq(&self, s: f64, f: &[f64]) -> f64 {
        self.coefficients(f).iter().enumerate().map(|(k, v)| self.lambda(k).powf(2.0 * s) * v * v).sum()
    }

    /// Largest `|⟨v_i, v_j⟩_{μ₂} - δ_ij|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut mv = self.vectors.clone();
        for (r, m) in self.mass.iter().enumerate() {
            mv.row_mut(r).scale_mut(*m);
        }
        let g = self.vectors.transpose() * mv;
        let mut worst = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Largest `‖L v - λ v‖_{μ₂} / ‖v‖_{μ₂}`, scaled by the largest eigenvalue.
    pub fn max_residual(&self, op: &WeightedOperator) -> f64 {
        let top = self.eigenvalues.iter().cloned().fold(1.0, f64::max);
        (0..self.len())
            .map(|k| {
                let v = self.vector(k);
                let lv = op.apply(&v);
                let r: Vec<f64> = lv.iter().zip(&v).map(|(a, b)| a - self.eigenvalues[k] * b).collect();
                op.norm(&r) / op.norm(&v) / top
            })
            .fold(0.0, f64::max)
    }

    /// Cache file name for a decomposition keyed by scenario, ball and resolution.
    pub fn cache_path(dir: &Path, scenario_hash: &str, ball: &Ball, m: usize) -> PathBuf {
        let mut key = String::from(scenario_hash);
        for c in &ball.center {
            key.push_str(&format!("-{:016x}", c.to_bits()));
        }
        key.push_str(&format!("-r{:016x}-m{m}", ball.radius.to_bits()));
        dir.join(format!("dec-{key}.bin"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"QLABDEC1")?;
        let (n, k) = (self.nodes.len(), self.len());
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&(k as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.complete)])?;
        for &i in &self.nodes {
            w.write_all(&(i as u64).to_le_bytes())?;
        }
        for v in self.mass.iter().chain(&self.eigenvalues).chain(self.vectors.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"QLABDEC1" {
            return Err(Error::Format(format!("{} is not a decomposition file", path.display())));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = next_u64(&mut r)? as usize;
        let k = next_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let nodes = (0..n).map(|_| next_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut floats = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let mass = floats(n)?;
        let eigenvalues = floats(k)?;
        let vectors = DMatrix::from_vec(n, k, floats(n * k)?);
        Ok(Self { eigenvalues, vectors, mass, nodes, complete: flag[0] == 1 })
    }

    /// Loads a cached decomposition for `op` or computes and stores one.
    pub fn load_or_compute(op: &WeightedOperator, path: &Path, count: EigCount) -> Result<Self> {
        if let Ok(dec) = Self::load(path) {
            if dec.nodes == op.nodes && dec.mass == op.mass {
                return Ok(dec);
            }
        }
        let dec = eig(op, count)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        dec.save(path)?;
        Ok(dec)
    }
}

/// `(I + tL)^{-1} f` and `tL (I + tL)^{-1} f`.
#[derive(Debug, Clone)]
pub struct Resolvent {
    pub smooth: Vec<f64>,
    pub rough: Vec<f64>,
    /// `‖t L smooth - rough‖ / ‖f‖`; zero up to round-off.
    pub identity_residual: f64,
}

/// A factorised `M + tA`, reusable across right-hand sides.
pub struct ResolventSolver<'a> {
    op: &'a WeightedOperator,
    t: f64,
    factor: CscCholesky<f64>,
}

impl<'a> ResolventSolver<'a> {
    pub fn new(op: &'a WeightedOperator, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(format!("resolvent needs t > 0, got {t}")));
        }
        let factor = CscCholesky::factor(&op.shifted_matrix(1.0, t)).map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(Self { op, t, factor })
    }

    pub fn apply(&self, f: &[f64]) -> Resolvent {
        let n = self.op.len();
        let rhs = DVector::from_iterator(n, f.iter().zip(&self.op.mass).map(|(a, m)| a * m));
        let smooth: Vec<f64> = self.factor.solve(&rhs).iter().cloned().collect();
        let rough: Vec<f64> = f.iter().zip(&smooth).map(|(a, b)| a - b).collect();
        let tl: Vec<f64> = self.op.apply(&smooth).iter().map(|v| self.t * v).collect();
        let diff: Vec<f64> = tl.iter().zip(&rough).map(|(a, b)| a - b).collect();
        let nf = self.op.norm(f);
        let identity_residual = if nf == 0.0 { 0.0 } else { self.op.norm(&diff) / nf };
        Resolvent { smooth, rough, identity_residual }
    }
}

pub fn resolvent(op: &WeightedOperator, t: f64, f: &[f64]) -> Result<Resolvent> {
    Ok(ResolventSolver::new(op, t)?.apply(f))
}

/// The same pair through the eigenbasis (complete decompositions only).
pub fn resolvent_spectral(dec: &SpectralDecomposition, t: f64, f: &[f64]) -> Result<Resolvent> {
    if !dec.complete {
        return Err(Error::InvalidParameter("spectral resolvent needs a complete decomposition".into()));
    }
    let c = dec.coefficients(f);
    let sm: Vec<f64> = c.iter().enumerate().map(|(k, v)| v / (1.0 + t * dec.lambda(k))).collect();
    let smooth: Vec<f64> = (&dec.vectors * DVector::from_vec(sm)).iter().cloned().collect();
    let rough = f.iter().zip(&smooth).map(|(a, b)| a - b).collect();
    Ok(Resolvent { smooth, rough, identity_residual: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySample {
    pub t: f64,
    pub d: f64,
    /// `d / √t`.
    pub s: f64,
    /// `‖(I+tL)^{-1} f‖_{L²(F)} + ‖tL(I+tL)^{-1} f‖_{L²(F)}`.
    pub value: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub samples: Vec<DecaySample>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line `y = a + b x`, returning `(b, a, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (b, a, r2)
}

/// Off-diagonal decay of the resolvent from a small Euclidean ball `E`.
///
/// `f` is the indicator of `E`; for each `t` and each ratio `s`, `F` is the set of
/// operator nodes at `d_g`-distance at least `s √t` from `E`. Returns the fit of
/// `log(value / ‖f‖)` against `s`.
pub fn off_diagonal_decay(
    op: &WeightedOperator,
    metric: &ConformalMetric,
    e_ball: &Ball,
    ts: &[f64],
    ratios: &[f64],
) -> Result<DecayFit> {
    let e_global: Vec<usize> = metric.grid().nodes_in_ball(e_ball);
    let e_local: Vec<usize> = e_global.iter().filter_map(|&i| op.local_index(i)).collect();
    if e_local.is_empty() {
        return Err(Error::EmptyRegion("source set E holds no operator nodes".into()));
    }
    let targets: Vec<usize> = op.nodes().to_vec();
    let dist = metric.paths().sweep(&e_global, &SweepLimit { radius: None, targets: Some(&targets) });
    let mut f = vec![0.0; op.len()];
    for &k in &e_local {
        f[k] = 1.0;
    }
    let nf = op.norm(&f);
    let mut samples = Vec::new();
    for &t in ts {
        let res = ResolventSolver::new(op, t)?.apply(&f);
        for &s in ratios {
            let d = s * t.sqrt();
            let mut a = 0.0;
            let mut b = 0.0;
            let mut count = 0usize;
            for (k, &g) in op.nodes().iter().enumerate() {
                if dist[g] >= d {
                    a += res.smooth[k] * res.smooth[k] * op.mass[k];
                    b += res.rough[k] * res.rough[k] * op.mass[k];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::EmptyRegion(format!("no operator node at distance {d} from E")));
            }
            let value = a.sqrt() + b.sqrt();
            samples.push(DecaySample { t, d, s, value, relative: value / nf });
        }
    }
    let x: Vec<f64> = samples.iter().map(|s| s.s).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.relative.ln()).collect();
    let (slope, intercept, r2) = linear_fit(&x, &y);
    Ok(DecayFit { samples, slope, intercept, r2 })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("α must lie in (0, 2), got {alpha}")))
    }
}

/// `K_α = Γ(2 - α/2) Γ(α/2) = ∫_0^∞ s^{1-α/2} (1+s)^{-2} ds`.
pub fn kernel_constant(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(gamma(2.0 - 0.5 * alpha) * gamma(0.5 * alpha))
}

/// `∫_0^∞ t^{-1-α/2} ‖tL(I+tL)^{-1} f‖² dt`, mode by mode in closed form.
pub fn square_function(dec: &SpectralDecomposition, f: &[f64], alpha: f64) -> Result<f64> {
    let k = kernel_constant(alpha)?;
    Ok(k * dec.frac_norm_sq(0.25 * alpha, f))
}

/// The square function by log-spaced Gauss panels in `t`, with `‖tL(I+tL)^{-1}f‖²`
/// evaluated from the eigenbasis at each node.
pub fn square_function_quadrature(dec: &SpectralDecomposition, f: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let c = dec.coefficients(f);
    let modes: Vec<(f64, f64)> = (0..dec.len())
        .map(|k| (dec.lambda(k), c[k] * c[k]))
        .filter(|(l, w)| *l > 1e-12 * dec.eigenvalues.last().copied().unwrap_or(1.0).abs() && *w > 0.0)
        .collect();
    if modes.is_empty() {
        return Ok(0.0);
    }
    let lmax = modes.iter().map(|m| m.0).fold(0.0, f64::max);
    let lmin = modes.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    // the tail beyond t1 is below t1^{-α/2}
    let (t0, t1) = (1e-10 / lmax, 10f64.powf(28.0 / alpha) / lmin);
    let integrand = |t: f64| {
        let s: f64 = modes
            .iter()
            .map(|&(l, w)| {
                let q = t * l / (1.0 + t * l);
                w * q * q
            })
            .sum();
        t.powf(-1.0 - 0.5 * alpha) * s
    };
    Ok(quad::log_composite(t0, t1, 6, integrand))
}

/// `Γ(2-α/2)Γ(α/2)` near zero behaves like `2/α`.
pub fn kernel_constant_leading(alpha: f64) -> f64 {
    2.0 / alpha
}

/// Pair distances `d_g(i, j)` from a set of source nodes to every operator node.
#[derive(Debug, Clone)]
pub struct PairDistances {
    /// `(local source, stratum weight)`.
    pub sources: Vec<(usize, f64)>,
    /// Row `r` holds `d_g(sources[r], ·)` on the operator nodes.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairSampling {
    /// Every operator node is a source.
    Full,
    /// One random source per `block^n` block of grid cells, weighted by the block's node count.
    Stratified { block: usize, seed: u64 },
}

impl PairDistances {
    pub fn compute(metric: &ConformalMetric, op: &WeightedOperator, sampling: PairSampling) -> Self {
        let sources: Vec<(usize, f64)> = match sampling {
            PairSampling::Full => (0..op.len()).map(|k| (k, 1.0)).collect(),
            PairSampling::Stratified { block, seed } => {
                let block = block.max(1);
                let grid = op.grid();
                let mut strata: std::collections::BTreeMap<Vec<usize>, Vec<usize>> = Default::default();
                for (k, &g) in op.nodes().iter().enumerate() {
                    let mi = grid.multi_index(g);
                    let key = mi[..grid.dim()].iter().map(|v| v / block).collect();
                    strata.entry(key).or_default().push(k);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                strata.values().map(|ks| (ks[rng.gen_range(0..ks.len())], ks.len() as f64)).collect()
            }
        };
        let targets = op.nodes().to_vec();
        let rows = sources
            .par_iter()
            .map(|&(k, _)| {
                let d = metric
                    .paths()
                    .sweep(&[op.nodes()[k]], &SweepLimit { radius: None, targets: Some(&targets) });
                targets.iter().map(|&g| d[g]).collect()
            })
            .collect();
        Self { sources, rows }
    }

    pub fn is_full(&self, op: &WeightedOperator) -> bool {
        self.sources.len() == op.len() && self.sources.iter().all(|s| s.1 == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1 {
    pub alpha: f64,
    /// `∫_B |f - f_{B,ω}|² ω`.
    pub lhs: f64,
    /// `‖L^{α/4} f‖²_{μ₂}`.
    pub mid: f64,
    /// Off-diagonal pair sum plus the self-cell correction.
    pub rhs: f64,
    pub offdiag: f64,
    pub diagonal_correction: f64,
    /// `diagonal_correction / rhs`: the share of `rhs` not seen by the pair sum.
    pub excluded_fraction: f64,
    /// `Vol_g(B) = ω(B)`.
    pub volume: f64,
    /// `lhs / (Vol_g(B)^{α/n} mid)`.
    pub measure_ratio: f64,
    /// `mid / rhs`.
    pub mid_ratio: f64,
    /// `lhs / (Vol_g(B)^{α/n} rhs)`.
    pub lhs_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        a / b
    }
}

/// Both sides of the fractional Poincaré inequality and the middle term.
///
/// `op` lives on `2B`, `ball` is `B`. Scale-free ratios divide by `Vol_g(B)^{α/n}`
/// so they are invariant under `ω → λω`.
pub fn theorem1_check(
    metric: &ConformalMetric,
    op: &WeightedOperator,
    dec: &SpectralDecomposition,
    ball: &Ball,
    f: &Sampled,
    alpha: f64,
    pairs: &PairDistances,
) -> Result<Theorem1> {
    check_alpha(alpha)?;
    let grid = op.grid();
    let n = grid.dim();
    let fl = op.restrict(&f.values);
    let (lhs, volume) = op.oscillation(&op.sub_ball(ball), &fl, 2.0)?;
    let mid = dec.frac_norm_sq(0.25 * alpha, &fl);
    let expo = 0.5 * (n as f64 + alpha);
    let offdiag: f64 = pairs
        .sources
        .par_iter()
        .zip(&pairs.rows)
        .map(|(&(i, w), row)| {
            let mut acc = 0.0;
            for (j, &d) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let df = fl[i] - fl[j];
                acc += df * df / (d * d).powf(expo) * op.mass[j];
            }
            w * acc * op.mass[i]
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    // self-cell: ∫∫_{cell²} |∇f·z|² / (e^u |z|)^{n+α} ω² ≈ h^n e^{(n-α)u} |∇f|²/n · σ a^{2-α}/(2-α)
    let a = (grid.cell_volume() / unit_ball_volume(n)).powf(1.0 / n as f64);
    let cell_integral = unit_sphere_area(n) * a.powf(2.0 - alpha) / (2.0 - alpha) / n as f64;
    let diagonal_correction: f64 = op
        .nodes()
        .iter()
        .map(|&g| {
            let gn = f.grad_norm(g);
            let u = metric.u().get(g);
            grid.cell_volume() * ((n as f64 - alpha) * u).exp() * gn * gn * cell_integral
        })
        .sum();
    let rhs = offdiag + diagonal_correction;
    let vol_a = volume.powf(alpha / n as f64);
    Ok(Theorem1 {
        alpha,
        lhs,
        mid,
        rhs,
        offdiag,
        diagonal_correction,
        excluded_fraction: ratio(diagonal_correction, rhs),
        volume,
        measure_ratio: ratio(lhs, vol_a * mid),
        mid_ratio: ratio(mid, rhs),
        lhs_ratio: ratio(lhs, vol_a * rhs),
    })
}

/// `∫_B f²ω / (Vol_g(B)^{2/n} ‖L^{1/2} f‖²)` for mean-zero `f` via the eigenbasis.
pub fn measure_ratio(op: &WeightedOperator, dec: &SpectralDecomposition, ball: &Ball, f: &[f64]) -> Result<f64> {
    let (num, vol) = op.oscillation(&op.sub_ball(ball), f, 2.0)?;
    let n = op.grid().dim() as f64;
    Ok(ratio(num, vol.powf(2.0 / n) * dec.frac_norm_sq(0.5, f)))
}

/// `J_n(x) = (1/π) ∫_0^π cos(nτ - x sin τ) dτ`.
pub fn bessel_j(order: i32, x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    quad::composite(0.0, pi, 16, |tau| (order as f64 * tau - x * tau.sin()).cos()) / pi
}

/// First positive zero of `J_1'`, by bisection on `J_1' = (J_0 - J_2)/2`.
pub fn bessel_j1_prime_first_zero() -> f64 {
    let d = |x: f64| 0.5 * (bessel_j(0, x) - bessel_j(2, x));
    let (mut lo, mut hi) = (1.0, 3.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `v(h) - C h^p` extrapolated from two spacings.
pub fn richardson(h1: f64, v1: f64, h2: f64, v2: f64, order: f64) -> f64 {
    let r = (h1 / h2).powf(order);
    (r * v2 - v1) / (r - 1.0)
}

/// `λ₁` of the Neumann problem on the flat unit disk at spacing `h = 1/k`.
pub fn flat_disk_lambda1(k: usize) -> Result<f64> {
    let h = 1.0 / k as f64;
    let grid = Grid::new(2, (k + 4) as f64 * h, 2 * (k + 4) + 1)?;
    let op = WeightedOperator::from_weight(&ScalarField::constant(grid, 1.0), &Ball::new(vec![0.0, 0.0], 1.0))?;
    let dec = eig(&op, EigCount::Lowest(2))?;
    Ok(dec.eigenvalues[1])
}

/// Dimension-generic helper: a grid point as a fixed array.
pub fn point(grid: &Grid, idx: usize) -> [f64; MAX_DIM] {
    let mut x = [0.0; MAX_DIM];
    grid.node_into(idx, &mut x);
    x
}
