//! Browser bindings for a 2-D bump metric on a square grid.
//!
//! Bumps are passed flat as `[cx, cy, fraction, sigma, ...]`, with the mass of each
//! bump given as a fraction of `c_2`. Fields come back row-major, axis 0 slowest.

use qlab_core::conformal::{log_potential_u, sharp_constant, Bump, ConformalMetric, QSpec};
use qlab_core::geometry::{volume_growth_table, DistanceMap};
use qlab_core::grid::Grid;
use wasm_bindgen::prelude::*;

/// Largest resolution the demo accepts; the log potential is a direct sum.
pub const MAX_RESOLUTION: usize = 129;

pub struct Scene {
    metric: ConformalMetric,
}

impl Scene {
    pub fn new(halfwidth: f64, resolution: usize, bumps: &[f64]) -> Result<Self, String> {
        if resolution > MAX_RESOLUTION {
            return Err(format!("resolution {resolution} exceeds {MAX_RESOLUTION}"));
        }
        if !bumps.len().is_multiple_of(4) {
            return Err("bumps must come in groups of four: cx, cy, fraction, sigma".into());
        }
        let grid = Grid::new(2, halfwidth, resolution).map_err(|e| e.to_string())?;
        let c2 = sharp_constant(2).map_err(|e| e.to_string())?;
        let bumps: Vec<Bump> = bumps
            .chunks(4)
            .map(|b| Bump { center: vec![b[0], b[1]], mass: b[2] * c2, sigma: b[3] })
            .collect();
        let q = if bumps.is_empty() { QSpec::zero(grid) } else { QSpec::bumps(grid, bumps).map_err(|e| e.to_string())? };
        let metric = log_potential_u(&q, 0.0).map_err(|e| e.to_string())?;
        Ok(Self { metric })
    }

    pub fn u(&self) -> Vec<f64> {
        self.metric.u().values().to_vec()
    }

    /// `d_g` from the node nearest `(x, y)` to every node.
    pub fn distances(&self, x: f64, y: f64) -> Result<Vec<f64>, String> {
        let (c, _) = self.metric.grid().snap(&[x, y]).ok_or_else(|| format!("({x}, {y}) is outside the box"))?;
        Ok(DistanceMap::full(&self.metric, c).dist)
    }

    /// `Vol_g(B^g((x, y), r))` for each radius.
    pub fn growth(&self, x: f64, y: f64, radii: &[f64]) -> Result<Vec<f64>, String> {
        let t = volume_growth_table(&self.metric, &[x, y], radii).map_err(|e| e.to_string())?;
        Ok(t.rows.iter().map(|r| r.volume).collect())
    }
}

#[wasm_bindgen]
pub struct Demo(Scene);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(halfwidth: f64, resolution: usize, bumps: &[f64]) -> Result<Demo, JsValue> {
        Scene::new(halfwidth, resolution, bumps).map(Demo).map_err(|e| JsValue::from_str(&e))
    }

    /// Conformal factor `u` on the grid.
    pub fn conformal_factor(&self) -> Vec<f64> {
        self.0.u()
    }

    pub fn distance_field(&self, x: f64, y: f64) -> Result<Vec<f64>, JsValue> {
        self.0.distances(x, y).map_err(|e| JsValue::from_str(&e))
    }

    pub fn volume_growth(&self, x: f64, y: f64, radii: &[f64]) -> Result<Vec<f64>, JsValue> {
        self.0.growth(x, y, radii).map_err(|e| JsValue::from_str(&e))
    }
}
