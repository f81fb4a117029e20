//! Scenario configuration: TOML schema, validation and the built-in library.

use std::collections::BTreeMap;
use std::path::Path;

use qlab_core::conformal::{sharp_constant, Bump};
use qlab_core::grid::{Ball, Grid};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Shipped scenarios, embedded at build time.
pub const BUILTIN: &[(&str, &str)] = &[
    ("flat", include_str!("../scenarios/flat.toml")),
    ("bump25", include_str!("../scenarios/bump25.toml")),
    ("bump50", include_str!("../scenarios/bump50.toml")),
    ("bump80", include_str!("../scenarios/bump80.toml")),
    ("mixed", include_str!("../scenarios/mixed.toml")),
    ("cylinder", include_str!("../scenarios/cylinder.toml")),
    ("quadratic", include_str!("../scenarios/quadratic.toml")),
    ("power", include_str!("../scenarios/power.toml")),
    ("abs_x1", include_str!("../scenarios/abs_x1.toml")),
    ("bump4d", include_str!("../scenarios/bump4d.toml")),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dim: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Balls `B`; operators and energies live on `2B`.
    #[serde(default)]
    pub balls: Vec<BallSpec>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_p_values")]
    pub p_values: Vec<f64>,
    pub grid: GridSpec,
    pub metric: MetricSpec,
    #[serde(default)]
    pub functions: FunctionSpec,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub geometry: GeometryParams,
    #[serde(default)]
    pub weights: WeightParams,
    #[serde(default)]
    pub poincare: PoincareParams,
    #[serde(default)]
    pub spectral: SpectralParams,
    #[serde(default)]
    pub theorem1: Theorem1Params,
    #[serde(default)]
    pub decay: DecayParams,
    #[serde(default)]
    pub covering: CoveringParams,
    #[serde(default)]
    pub expect: Expect,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seed() -> u64 {
    1
}

fn default_alphas() -> Vec<f64> {
    vec![0.5, 1.0, 1.5]
}

fn default_p_values() -> Vec<f64> {
    vec![1.5, 2.0, 4.0]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub halfwidth: f64,
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BallSpec {
    pub fn ball(&self) -> Ball {
        Ball::new(self.center.clone(), self.radius)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    /// Absolute mass; exclusive with `fraction`.
    pub mass: Option<f64>,
    /// Mass as a fraction of `c_n`.
    pub fraction: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    Flat {
        #[serde(default)]
        constant: f64,
    },
    Bumps {
        #[serde(default)]
        constant: f64,
        bumps: Vec<BumpSpec>,
    },
    /// `u = -½ log(core² + |x|²)`, a capped cylinder end.
    Cylinder { core: f64 },
    /// `u = a (x₁² - x₂²)`: harmonic, so not the normal metric of its curvature.
    Quadratic {
        #[serde(default = "one")]
        a: f64,
    },
    /// `ω = |x|^α`, no conformal factor.
    PowerWeight { alpha: f64 },
    /// `ω = |x₁|^α`, no conformal factor.
    AxisWeight { alpha: f64 },
}

fn one() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricSpec::Flat { .. } => "flat",
            MetricSpec::Bumps { .. } => "bumps",
            MetricSpec::Cylinder { .. } => "cylinder",
            MetricSpec::Quadratic { .. } => "quadratic",
            MetricSpec::PowerWeight { .. } => "power_weight",
            MetricSpec::AxisWeight { .. } => "axis_weight",
        }
    }

    /// Whether a conformal factor `u` exists (weights-only kinds have none).
    pub fn is_conformal(&self) -> bool {
        !matches!(self, MetricSpec::PowerWeight { .. } | MetricSpec::AxisWeight { .. })
    }

    pub fn resolved_bumps(&self, dim: usize) -> Result<Vec<Bump>, CliError> {
        let MetricSpec::Bumps { bumps, .. } = self else {
            return Ok(Vec::new());
        };
        let c = sharp_constant(dim)?;
        bumps
            .iter()
            .map(|b| {
                let mass = match (b.mass, b.fraction) {
                    (Some(m), None) => m,
                    (None, Some(f)) => f * c,
                    _ => return Err(CliError::Config("each bump needs exactly one of `mass` or `fraction`".into())),
                };
                Ok(Bump { center: b.center.clone(), mass, sigma: b.sigma })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub count: usize,
    /// Length scale of the test functions.
    pub scale: f64,
}

impl Default for FunctionSpec {
    fn default() -> Self {
        Self { count: 20, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Metric,
    Geometry,
    Weights,
    Poincare,
    Spectral,
    Theorem1,
    Decay,
    Covering,
}

impl Stage {
    /// Topological order of the pipeline.
    pub const ALL: [Stage; 8] = [
        Stage::Metric,
        Stage::Geometry,
        Stage::Weights,
        Stage::Poincare,
        Stage::Spectral,
        Stage::Theorem1,
        Stage::Decay,
        Stage::Covering,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Metric => "metric",
            Stage::Geometry => "geometry",
            Stage::Weights => "weights",
            Stage::Poincare => "poincare",
            Stage::Spectral => "spectral",
            Stage::Theorem1 => "theorem1",
            Stage::Decay => "decay",
            Stage::Covering => "covering",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Metric => &[],
            Stage::Geometry | Stage::Weights => &[Stage::Metric],
            Stage::Poincare | Stage::Spectral => &[Stage::Weights],
            Stage::Theorem1 | Stage::Decay => &[Stage::Spectral],
            Stage::Covering => &[Stage::Geometry, Stage::Weights],
        }
    }

    /// Stages that need a conformal factor rather than a bare weight.
    pub fn needs_metric(self) -> bool {
        matches!(self, Stage::Geometry | Stage::Theorem1 | Stage::Decay | Stage::Covering)
    }
}

/// Stage toggles. Unset toggles enable every stage the metric kind supports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub metric: Option<bool>,
    pub geometry: Option<bool>,
    pub weights: Option<bool>,
    pub poincare: Option<bool>,
    pub spectral: Option<bool>,
    pub theorem1: Option<bool>,
    pub decay: Option<bool>,
    pub covering: Option<bool>,
}

impl Stages {
    fn get(&self, s: Stage) -> Option<bool> {
        match s {
            Stage::Metric => self.metric,
            Stage::Geometry => self.geometry,
            Stage::Weights => self.weights,
            Stage::Poincare => self.poincare,
            Stage::Spectral => self.spectral,
            Stage::Theorem1 => self.theorem1,
            Stage::Decay => self.decay,
            Stage::Covering => self.covering,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub center: Option<Vec<f64>>,
    /// Geodesic radii on the grid; derived from the reach of the box when empty.
    pub radii: Vec<f64>,
    /// Geodesic radii for the radial quadrature path.
    pub radial_radii: Vec<f64>,
    /// Euclidean radii for the end isoperimetric ratio.
    pub end_radii: Vec<f64>,
    /// Side lengths of centred squares (cubes) for the isoperimetric ratio.
    pub cube_sides: Vec<f64>,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            center: None,
            radii: Vec::new(),
            radial_radii: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            end_radii: vec![1.0, 10.0, 1e2, 1e3, 1e4, 1e6],
            cube_sides: vec![0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightParams {
    pub balls: usize,
    pub pairs: usize,
    pub holder_exponent: f64,
    pub radius_range: (f64, f64),
    pub separation_range: (f64, f64),
    /// Pairs straddling `x₁ = 0`; only used for the axis weight.
    pub axis_pairs: usize,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            balls: 200,
            pairs: 1000,
            holder_exponent: 1.5,
            radius_range: (0.05, 0.22),
            separation_range: (0.1, 0.8),
            axis_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Analytic,
    EdgeForm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoincareParams {
    pub energy: EnergyKind,
    pub strong: bool,
}

impl Default for PoincareParams {
    fn default() -> Self {
        Self { energy: EnergyKind::Analytic, strong: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralParams {
    /// Modes kept when the operator is too large for a dense solve.
    pub modes: usize,
    pub cache: bool,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self { modes: 40, cache: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Params {
    /// Operators with more nodes than this use stratified pair sampling.
    pub full_limit: usize,
    pub block: usize,
}

impl Default for Theorem1Params {
    fn default() -> Self {
        Self { full_limit: 2500, block: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayParams {
    pub center: Option<Vec<f64>>,
    /// Radius of the operator domain; defaults to 0.9 L.
    pub radius: Option<f64>,
    /// Radius of the source set `E`.
    pub e_radius: f64,
    /// Resolvent times; derived from the geodesic reach of the domain when empty.
    pub ts: Vec<f64>,
    /// Values of `d / √t`.
    pub ratios: Vec<f64>,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self { center: None, radius: None, e_radius: 0.1, ts: Vec::new(), ratios: vec![2.0, 4.0, 6.0, 8.0, 10.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoveringParams {
    /// Scale `t`; defaults to `(3.5 h max e^u)²`, just above the resolvable limit.
    pub t: Option<f64>,
    /// Half side of the covered box.
    pub domain: f64,
    pub thetas: Vec<f64>,
    pub queries: usize,
    /// Largest annulus index.
    pub annuli_k: u32,
    /// Number of cover centres (closest to the origin) used for annuli.
    pub annuli_centers: usize,
    /// Radius of the operator domain used for annuli; defaults to 0.8 L.
    pub annuli_radius: Option<f64>,
}

impl Default for CoveringParams {
    fn default() -> Self {
        Self { t: None, domain: 0.5, thetas: vec![2.0, 4.0, 8.0], queries: 100, annuli_k: 2, annuli_centers: 4, annuli_radius: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub value: f64,
    pub rtol: f64,
}

impl Expected {
    pub fn matches(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.rtol * self.value.abs()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedVolume {
    pub radius: f64,
    pub value: f64,
    pub rtol: f64,
}

/// Scenario-specific hard assertions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expect {
    /// Bound on `sup |u - u(0)|`.
    pub u_constant: Option<f64>,
    pub ball_volume: Option<ExpectedVolume>,
    pub isoperimetric: Option<Expected>,
    pub normality_residual: Option<Expected>,
    /// Minimum drop of `Vol/r^n` along the radial path.
    pub radial_volume_drop: Option<f64>,
    /// Maximum end ratio at the last radius.
    pub end_ratio_tail: Option<f64>,
}

/// Soft regression targets for fitted constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baseline {
    pub band: f64,
    pub constants: BTreeMap<String, f64>,
}

impl Default for Baseline {
    fn default() -> Self {
        Self { band: 0.2, constants: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub svg: bool,
    pub fields: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { svg: yes(), fields: yes() }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let s: Scenario = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Built-in name or a path to a TOML file. Returns the scenario and its source text.
    pub fn load(arg: &str) -> Result<(Self, String), CliError> {
        let path = Path::new(arg);
        let text = if path.exists() {
            std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?
        } else if let Some((_, t)) = BUILTIN.iter().find(|(n, _)| *n == arg) {
            t.to_string()
        } else {
            return Err(CliError::Config(format!("no config file or built-in scenario named `{arg}`")));
        };
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn builtin(name: &str) -> Result<Self, CliError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown built-in scenario `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::new(self.dim, self.grid.halfwidth, self.grid.resolution)?)
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        self.stages.get(stage).unwrap_or_else(|| self.metric.is_conformal() || !stage.needs_metric())
    }

    /// Enabled stages in dependency order.
    pub fn plan(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| self.enabled(*s)).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.dim != 2 && self.dim != 4 {
            return bad(format!("dim must be 2 or 4, got {}", self.dim));
        }
        self.grid()?;
        for s in self.plan() {
            if s.needs_metric() && !self.metric.is_conformal() {
                return bad(format!("stage `{}` needs a conformal factor; `{}` is a bare weight", s.name(), self.metric.kind()));
            }
            for d in s.deps() {
                if !self.enabled(*d) {
                    return bad(format!("stage `{}` needs stage `{}`", s.name(), d.name()));
                }
            }
        }
        for b in &self.balls {
            if b.center.len() != self.dim || !(b.radius > 0.0) {
                return bad(format!("ball {:?} r={} does not fit dim {}", b.center, b.radius, self.dim));
            }
        }
        if self.balls.is_empty() && (self.enabled(Stage::Poincare) || self.enabled(Stage::Spectral)) {
            return bad("poincare and spectral stages need at least one ball".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 2.0)) {
            return bad(format!("α must lie in (0, 2), got {a}"));
        }
        if let Some(p) = self.p_values.iter().find(|p| !(**p > 1.0)) {
            return bad(format!("p must exceed 1, got {p}"));
        }
        if self.functions.count == 0 || !(self.functions.scale > 0.0) {
            return bad("functions need a positive count and scale".into());
        }
        if self.covering.thetas.iter().any(|t| !(*t >= 1.0)) {
            return bad("covering thetas must be at least 1".into());
        }
        match &self.metric {
            MetricSpec::Bumps { bumps, .. } if bumps.is_empty() => return bad("bump metric without bumps".into()),
            MetricSpec::Cylinder { core } if !(*core > 0.0) => return bad("cylinder core must be positive".into()),
            MetricSpec::PowerWeight { alpha } | MetricSpec::AxisWeight { alpha } if !(*alpha > -(self.dim as f64)) => {
                return bad(format!("weight exponent {alpha} is not locally integrable"))
            }
            MetricSpec::Quadratic { .. } | MetricSpec::AxisWeight { .. } if self.dim < 2 => return bad("needs two axes".into()),
            _ => {}
        }
        self.metric.resolved_bumps(self.dim)?;
        if self.baseline.band < 0.0 {
            return bad("baseline band must be nonnegative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        assert!(BUILTIN.len() >= 8);
        for (name, _) in BUILTIN {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(&s.name, name);
            assert!(s.plan().contains(&Stage::Metric));
        }
    }

    #[test]
    fn weight_kinds_skip_metric_stages() {
        let s = Scenario::builtin("abs_x1").unwrap();
        assert!(!s.enabled(Stage::Geometry) && !s.enabled(Stage::Theorem1));
        let text = include_str!("../scenarios/abs_x1.toml").replace("[stages]", "[stages]\ntheorem1 = true");
        assert!(matches!(Scenario::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn dependency_violations_are_config_errors() {
        let text = "name = 'x'\ndim = 2\nballs = [{ center = [0.0, 0.0], radius = 0.3 }]\n\
                    [grid]\nhalfwidth = 1.0\nresolution = 33\n[metric]\nkind = 'flat'\n\
                    [stages]\nspectral = false\n";
        let err = Scenario::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("needs stage `spectral`"), "{err}");
        let unknown = "name = 'x'\ndim = 2\nwat = 1\n[grid]\nhalfwidth = 1.0\nresolution = 33\n[metric]\nkind = 'flat'\n";
        assert!(Scenario::from_toml(unknown).is_err());
    }

    #[test]
    fn bump_fraction_resolves_against_the_sharp_constant() {
        let m = MetricSpec::Bumps {
            constant: 0.0,
            bumps: vec![BumpSpec { center: vec![0.0; 4], mass: None, fraction: Some(0.5), sigma: 0.5 }],
        };
        let b = m.resolved_bumps(4).unwrap();
        assert!((b[0].mass - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-12);
    }
}
