//! Seeded smooth test functions with analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{Grid, ScalarField, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    /// `a · cos(k·x + φ)`.
    Wave { amp: f64, freq: [f64; MAX_DIM], phase: f64 },
    /// `a · Π x_i^{e_i}` with total degree at most 4.
    Monomial { coef: f64, powers: [u32; MAX_DIM] },
}

/// A C^∞ function on `R^n`: a finite sum of waves and monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub dim: usize,
    pub terms: Vec<Term>,
}

impl TestFunction {
    pub fn coordinate(dim: usize, axis: usize) -> Self {
        let mut powers = [0; MAX_DIM];
        powers[axis] = 1;
        Self { dim, terms: vec![Term::Monomial { coef: 1.0, powers }] }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self { dim, terms: vec![Term::Monomial { coef: c, powers: [0; MAX_DIM] }] }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| match t {
                Term::Wave { amp, freq, phase } => {
                    let arg: f64 = x.iter().zip(freq).map(|(a, k)| a * k).sum::<f64>() + phase;
                    amp * arg.cos()
                }
                Term::Monomial { coef, powers } => {
                    coef * x.iter().zip(powers).map(|(a, e)| a.powi(*e as i32)).product::<f64>()
                }
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[..self.dim].iter_mut().for_each(|g| *g = 0.0);
        for t in &self.terms {
            match t {
                Term::Wave { amp, freq, phase } => {
                    let arg: f64 = x.iter().zip(freq).map(|(a, k)| a * k).sum::<f64>() + phase;
                    let s = -amp * arg.sin();
                    for i in 0..self.dim {
                        out[i] += s * freq[i];
                    }
                }
                Term::Monomial { coef, powers } => {
                    for i in 0..self.dim {
                        if powers[i] == 0 {
                            continue;
                        }
                        let mut v = coef * powers[i] as f64;
                        for j in 0..self.dim {
                            let e = powers[j] as i32 - i32::from(i == j);
                            v *= x[j].powi(e);
                        }
                        out[i] += v;
                    }
                }
            }
        }
    }

    /// Values and gradient components on every node.
    pub fn sample(&self, grid: &Grid) -> Result<Sampled> {
        let dim = grid.dim();
        let mut x = [0.0; MAX_DIM];
        let mut g = [0.0; MAX_DIM];
        let mut values = Vec::with_capacity(grid.len());
        let mut grads = vec![Vec::with_capacity(grid.len()); dim];
        for i in 0..grid.len() {
            grid.node_into(i, &mut x);
            values.push(self.value(&x[..dim]));
            self.gradient(&x[..dim], &mut g);
            for a in 0..dim {
                grads[a].push(g[a]);
            }
        }
        Ok(Sampled {
            values: ScalarField::new(*grid, values)?,
            gradient: grads.into_iter().map(|v| ScalarField::new(*grid, v)).collect::<Result<_>>()?,
        })
    }
}

/// A function sampled on a grid together with its exact gradient.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub values: ScalarField,
    pub gradient: Vec<ScalarField>,
}

impl Sampled {
    pub fn grad_norm(&self, idx: usize) -> f64 {
        self.gradient.iter().map(|g| g.get(idx) * g.get(idx)).sum::<f64>().sqrt()
    }

    /// `f ↦ λ f + c`.
    pub fn affine(&self, lambda: f64, c: f64) -> Result<Self> {
        Ok(Self {
            values: self.values.map(|v| lambda * v + c)?,
            gradient: self.gradient.iter().map(|g| g.map(|v| lambda * v)).collect::<Result<_>>()?,
        })
    }
}

/// A reproducible family of test functions on a length scale `scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestFunctionSet {
    pub seed: u64,
    pub scale: f64,
    pub functions: Vec<TestFunction>,
}

impl TestFunctionSet {
    /// Alternates trigonometric polynomials (frequencies `k/scale`, `|k_i| ≤ 2`)
    /// and polynomials of degree at most 4 in `x/scale`; coefficients uniform in `[-1, 1]`.
    pub fn generate(dim: usize, count: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let functions = (0..count)
            .map(|k| {
                let mut terms = Vec::new();
                if k % 2 == 0 {
                    for _ in 0..3 {
                        let mut freq = [0.0; MAX_DIM];
                        loop {
                            for f in freq.iter_mut().take(dim) {
                                *f = rng.gen_range(-2i32..=2) as f64 / scale;
                            }
                            if freq.iter().any(|f| *f != 0.0) {
                                break;
                            }
                        }
                        terms.push(Term::Wave {
                            amp: rng.gen_range(-1.0..1.0),
                            freq,
                            phase: rng.gen_range(0.0..std::f64::consts::TAU),
                        });
                    }
                } else {
                    for _ in 0..4 {
                        let degree = rng.gen_range(1..=4u32);
                        let mut powers = [0u32; MAX_DIM];
                        for _ in 0..degree {
                            powers[rng.gen_range(0..dim)] += 1;
                        }
                        let coef = rng.gen_range(-1.0..1.0) / scale.powi(degree as i32);
                        terms.push(Term::Monomial { coef, powers });
                    }
                }
                TestFunction { dim, terms }
            })
            .collect();
        Self { seed, scale, functions }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_central_differences() {
        let set = TestFunctionSet::generate(2, 6, 17, 0.8);
        let g = Grid::new(2, 1.0, 41).unwrap();
        for f in &set.functions {
            let mut errs = Vec::new();
            for eps in [1e-2, 5e-3] {
                let mut worst = 0.0f64;
                for i in (0..g.len()).step_by(37) {
                    let x = g.node(i);
                    let mut grad = [0.0; MAX_DIM];
                    f.gradient(&x, &mut grad);
                    for a in 0..2 {
                        let mut p = x.clone();
                        let mut m = x.clone();
                        p[a] += eps;
                        m[a] -= eps;
                        let fd = (f.value(&p) - f.value(&m)) / (2.0 * eps);
                        worst = worst.max((fd - grad[a]).abs());
                    }
                }
                errs.push(worst);
            }
            // second order: halving eps quarters the error
            assert!(errs[1] < errs[0] / 3.0 || errs[1] < 1e-9, "{errs:?}");
        }
    }

    #[test]
    fn generation_is_reproducible_and_four_dimensional() {
        let a = TestFunctionSet::generate(4, 5, 3, 1.0);
        let b = TestFunctionSet::generate(4, 5, 3, 1.0);
        assert_eq!(a.functions, b.functions);
        assert_ne!(a.functions, TestFunctionSet::generate(4, 5, 4, 1.0).functions);
        let x = [0.1, -0.2, 0.3, 0.4];
        let mut grad = [0.0; 4];
        let f = &a.functions[1];
        f.gradient(&x, &mut grad);
        let h = 1e-6;
        for axis in 0..4 {
            let mut p = x;
            p[axis] += h;
            let mut m = x;
            m[axis] -= h;
            assert!(((f.value(&p) - f.value(&m)) / (2.0 * h) - grad[axis]).abs() < 1e-6);
        }
    }

    #[test]
    fn coordinate_and_constant() {
        let g = Grid::new(2, 1.0, 5).unwrap();
        let s = TestFunction::coordinate(2, 0).sample(&g).unwrap();
        for i in 0..g.len() {
            assert_eq!(s.values.get(i), g.node(i)[0]);
            assert_eq!(s.grad_norm(i), 1.0);
        }
        let c = TestFunction::constant(2, 7.0).sample(&g).unwrap();
        assert!(c.values.values().iter().all(|v| *v == 7.0));
        assert!((0..g.len()).all(|i| c.grad_norm(i) == 0.0));
    }
}
