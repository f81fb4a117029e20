//! Stage execution. Each stage reads the shared context, appends checks,
//! constants and a JSON section to the report, and writes its artifacts.

use std::path::PathBuf;

use qlab_core::conformal::{log_potential_u, measure_from_u, normality_residual, sharp_constant, ConformalMetric, QSpec};
use qlab_core::covering::{
    annuli_oscillation, box_domain, build_cover, center_volumes, fit_overlap_constant, overlap_bound_holds, overlap_count,
};
use qlab_core::geometry::{cube_region, geodesic_ball, isoperimetric_ratio, volume_growth_table, DistanceMap, GrowthTable, RadialMetric};
use qlab_core::grid::{norm, unit_ball_volume, Ball, Grid, ScalarField};
use qlab_core::paths::{Stencil, SweepLimit};
use qlab_core::poincare::{fitted_constant, p_poincare_ratio, strong_p_poincare_ratio, Energy};
use qlab_core::spectral::{
    eig, kernel_constant, linear_fit, off_diagonal_decay, square_function_quadrature, theorem1_check, EigCount,
    PairDistances, PairSampling, SpectralDecomposition, WeightedOperator, DENSE_LIMIT,
};
use qlab_core::testfn::{Sampled, TestFunctionSet};
use qlab_core::weights::{axis_power_weight, axis_straddling_pairs, power_weight, strong_ainfty_ratio, weight_report, WeightConfig, WeightedDistances};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::output::{Axes, Output, Series};
use crate::report::{GridInfo, Metadata, Report, Seeds, Severity, TOOL, VERSION};
use crate::scenario::{EnergyKind, MetricSpec, Scenario, Stage};
use crate::CliError;

/// `u - ũ` oscillation above which a metric is reported as not normal.
pub const NORMALITY_TOLERANCE: f64 = 0.1;

/// Square-function identity tolerance.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub strict: bool,
    /// Overrides the scenario seed (`QLAB_SEED`).
    pub seed_override: Option<u64>,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), strict: false, seed_override: None }
    }

    /// Reads `QLAB_SEED` from the environment.
    pub fn with_env_seed(mut self) -> Result<Self, CliError> {
        if let Ok(v) = std::env::var("QLAB_SEED") {
            let s = v.trim().parse().map_err(|_| CliError::Config(format!("QLAB_SEED is not an unsigned integer: {v:?}")))?;
            self.seed_override = Some(s);
        }
        Ok(self)
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Exit code for a finished report.
pub fn exit_code(report: &Report, strict: bool) -> i32 {
    if !report.outcome.passed {
        crate::exit::HARD_FAILURE
    } else if strict && report.outcome.soft_failures > 0 {
        crate::exit::SOFT_REGRESSION
    } else {
        crate::exit::OK
    }
}

struct BallSpectrum {
    index: usize,
    ball: Ball,
    op: WeightedOperator,
    dec: SpectralDecomposition,
}

struct Ctx<'a> {
    sc: &'a Scenario,
    grid: Grid,
    seeds: Seeds,
    hash: String,
    out: Output,
    report: Report,
    metric: Option<ConformalMetric>,
    omega: Option<ScalarField>,
    functions: Option<Vec<Sampled>>,
    doubling_exponent: Option<f64>,
    spectra: Vec<BallSpectrum>,
    assumption_violated: bool,
}

/// Runs every enabled stage and writes `report.json` into `opts.out`.
pub fn run(sc: &Scenario, config_text: &str, opts: &RunOptions) -> Result<Report, CliError> {
    sc.validate()?;
    let grid = sc.grid()?;
    let (master, source) = match opts.seed_override {
        Some(s) => (s, "QLAB_SEED"),
        None => (sc.seed, "config"),
    };
    let seeds = Seeds::derive(master, source);
    let hash = config_hash(config_text);
    let plan = sc.plan();
    let metadata = Metadata {
        tool: TOOL.into(),
        version: VERSION.into(),
        scenario: sc.name.clone(),
        config_hash: hash.clone(),
        seeds: seeds.clone(),
        grid: GridInfo { dim: grid.dim(), halfwidth: grid.halfwidth(), resolution: grid.resolution(), spacing: grid.spacing() },
        threads: rayon::current_num_threads(),
        summation: "ordered".into(),
        stages: plan.iter().map(|s| s.name().to_string()).collect(),
    };
    let mut ctx = Ctx {
        sc,
        grid,
        seeds,
        hash,
        out: Output::new(&opts.out, sc.output.svg)?,
        report: Report::new(metadata),
        metric: None,
        omega: None,
        functions: None,
        doubling_exponent: None,
        spectra: Vec::new(),
        assumption_violated: false,
    };
    for stage in plan {
        let clock = std::time::Instant::now();
        match stage {
            Stage::Metric => stage_metric(&mut ctx)?,
            Stage::Geometry => stage_geometry(&mut ctx)?,
            Stage::Weights => stage_weights(&mut ctx)?,
            Stage::Poincare => stage_poincare(&mut ctx)?,
            Stage::Spectral => stage_spectral(&mut ctx)?,
            Stage::Theorem1 => stage_theorem1(&mut ctx)?,
            Stage::Decay => stage_decay(&mut ctx)?,
            Stage::Covering => stage_covering(&mut ctx)?,
        }
        eprintln!("qlab: {:<9} {:>8.2}s", stage.name(), clock.elapsed().as_secs_f64());
    }
    baseline_checks(&mut ctx);
    ctx.report.artifacts = ctx.out.written().to_vec();
    ctx.report.artifacts.push("report.json".into());
    ctx.report.finish();
    let json = ctx.report.to_json();
    ctx.out.text("report.json", &json)?;
    Ok(ctx.report)
}

fn origin(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

fn key(x: f64) -> String {
    format!("{x}")
}

impl Ctx<'_> {
    fn metric(&self) -> &ConformalMetric {
        self.metric.as_ref().expect("metric stage ran")
    }

    fn omega(&self) -> &ScalarField {
        self.omega.as_ref().expect("metric stage ran")
    }

    fn functions(&mut self) -> Result<&[Sampled], CliError> {
        if self.functions.is_none() {
            let f = &self.sc.functions;
            let set = TestFunctionSet::generate(self.grid.dim(), f.count, self.seeds.functions, f.scale);
            let sampled = set.functions.par_iter().map(|t| t.sample(&self.grid)).collect::<Result<Vec<_>, _>>()?;
            self.functions = Some(sampled);
        }
        Ok(self.functions.as_deref().unwrap())
    }

    fn section(&mut self, stage: Stage, v: Value) {
        self.report.stages.insert(stage.name().into(), v);
    }

    /// Field as `.bin` plus a 2-D gnuplot slice (`x₃ = x₄ = 0` in four dimensions).
    fn write_field(&mut self, name: &str, field: &ScalarField) -> Result<(), CliError> {
        if !self.sc.output.fields {
            return Ok(());
        }
        self.out.write_with(&format!("{name}.bin"), |w| field.write_binary(w).map_err(std::io::Error::other))?;
        let g = self.grid;
        let mut rows = Vec::new();
        let mut last = None;
        for i in 0..g.len() {
            let x = g.node(i);
            if x[2..].iter().any(|v| v.abs() > 1e-12) {
                continue;
            }
            let row = g.multi_index(i)[0];
            if last.is_some_and(|r| r != row) {
                rows.push(None);
            }
            last = Some(row);
            rows.push(Some(vec![x[0], x[1], field.get(i)]));
        }
        self.out.dat(&format!("{name}.dat"), &["x1", "x2", name], &rows)
    }
}

fn stage_metric(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let g = ctx.grid;
    let n = g.dim();
    let cn = sharp_constant(n)?;
    let st = Stage::Metric.name();
    let mut sec = json!({ "kind": sc.metric.kind(), "c_n": cn });
    let metric = match &sc.metric {
        MetricSpec::Flat { constant } => Some(log_potential_u(&QSpec::zero(g), *constant)?),
        MetricSpec::Bumps { constant, .. } => {
            let q = QSpec::bumps(g, sc.metric.resolved_bumps(n)?)?;
            let metric = log_potential_u(&q, *constant)?;
            far_field(ctx, &q, &mut sec)?;
            let rho = q.density_field()?;
            let back = measure_from_u(&metric)?;
            let band = n / 2;
            let (mut err, mut tot) = (0.0, 0.0);
            for i in (0..g.len()).filter(|&i| g.in_band(i, band)) {
                err += (back.get(i) - rho.get(i)).abs();
                tot += rho.get(i).abs();
            }
            let roundtrip = err / tot;
            sec["measure_roundtrip_l1"] = json!(roundtrip);
            ctx.report.constant("metric.measure_roundtrip", roundtrip);
            Some(metric)
        }
        MetricSpec::Cylinder { core } => {
            let r0 = *core;
            let m = ConformalMetric::from_fn(g, move |x| -0.5 * (r0 * r0 + x.iter().map(|v| v * v).sum::<f64>()).ln())?;
            ctx.report.flag("critical: beta+ = c_n, Euclidean volume growth is not expected");
            sec["beta_plus_analytic"] = json!(cn);
            Some(with_measured_curvature(m)?)
        }
        MetricSpec::Quadratic { a } => {
            let a = *a;
            Some(with_measured_curvature(ConformalMetric::from_fn(g, move |x| a * (x[0] * x[0] - x[1] * x[1]))?)?)
        }
        MetricSpec::PowerWeight { alpha } => {
            ctx.omega = Some(power_weight(g, *alpha)?);
            None
        }
        MetricSpec::AxisWeight { alpha } => {
            ctx.omega = Some(axis_power_weight(g, *alpha)?);
            None
        }
    };
    if let Some(metric) = metric {
        let (bp, bm) = metric.curvature().unwrap_or((0.0, 0.0));
        sec["beta_plus"] = json!(bp);
        sec["beta_minus"] = json!(bm);
        sec["beta_plus_over_c_n"] = json!(bp / cn);
        sec["subcritical"] = json!(metric.is_subcritical());
        if !metric.is_subcritical() {
            ctx.report.flag("supercritical: beta+ >= c_n");
        }
        let u = metric.u();
        sec["u_min"] = json!(u.min());
        sec["u_max"] = json!(u.max());
        if let Some(tol) = sc.expect.u_constant {
            let u0 = u.get(g.origin());
            let dev = u.values().iter().map(|v| (v - u0).abs()).fold(0.0, f64::max);
            ctx.report.hard(st, "u_constant", dev <= tol, Some(dev), format!("sup |u - u(0)| <= {tol:e}"));
        }
        let nr = normality_residual(&metric)?;
        sec["normality_residual"] = serde_json::to_value(nr).unwrap();
        ctx.report.constant("metric.normality_residual", nr.oscillation);
        if nr.oscillation > NORMALITY_TOLERANCE {
            ctx.assumption_violated = true;
            ctx.report.flag("non-normal metric: u differs from the log potential of its curvature by a non-constant");
        }
        if let Some(e) = sc.expect.normality_residual {
            ctx.report.hard(
                st,
                "normality_residual",
                e.matches(nr.oscillation),
                Some(nr.oscillation),
                format!("oscillation of u - u~ within {}% of {}", 100.0 * e.rtol, e.value),
            );
        }
        ctx.write_field("u", u)?;
        ctx.omega = Some(metric.omega().clone());
        ctx.metric = Some(metric);
    } else {
        let w = ctx.omega();
        sec["omega_min"] = json!(w.min());
        sec["omega_max"] = json!(w.max());
        let w = w.clone();
        ctx.write_field("omega", &w)?;
    }
    ctx.section(Stage::Metric, sec);
    Ok(())
}

/// Curvature totals of a metric given directly by `u`, integrated over the interior band.
fn with_measured_curvature(metric: ConformalMetric) -> Result<ConformalMetric, CliError> {
    let rho = measure_from_u(&metric)?;
    let cell = metric.grid().cell_volume();
    let (mut pos, mut neg) = (0.0, 0.0);
    for &v in rho.values() {
        if v > 0.0 {
            pos += v * cell;
        } else {
            neg -= v * cell;
        }
    }
    Ok(metric.with_curvature((pos, neg)))
}

/// Slope of `u` against `log |x|` on `|x| ∈ [50, 100]`, which must be `-(β⁺ - β⁻)/c_n`.
fn far_field(ctx: &mut Ctx, q: &QSpec, sec: &mut Value) -> Result<(), CliError> {
    let n = q.dim();
    let (bp, bm) = q.total_curvatures()?;
    let expected = -(bp - bm) / sharp_constant(n)?;
    let dir: Vec<f64> = (0..n).map(|i| [0.8, 0.6, 0.0, 0.0][i]).collect();
    let radii: Vec<f64> = (0..9).map(|k| 50.0 * 2f64.powf(k as f64 / 8.0)).collect();
    // antipodal mean cancels the dipole term
    let us = radii
        .iter()
        .map(|&r| {
            let a = q.potential_at(&dir.iter().map(|d| d * r).collect::<Vec<_>>())?;
            let b = q.potential_at(&dir.iter().map(|d| -d * r).collect::<Vec<_>>())?;
            Ok(0.5 * (a + b))
        })
        .collect::<Result<Vec<_>, qlab_core::Error>>()?;
    let logs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let (slope, _, _) = linear_fit(&logs, &us);
    let rel = if expected == 0.0 { slope.abs() } else { (slope / expected - 1.0).abs() };
    sec["far_field"] = json!({ "slope": slope, "expected": expected, "relative_error": rel });
    ctx.report.hard("metric", "far_field_log_law", rel <= 0.01, Some(slope), format!("slope of u vs log|x| on [50,100] within 1% of {expected}"));
    Ok(())
}

fn radial_oracle(sc: &Scenario) -> Result<Option<RadialMetric>, CliError> {
    Ok(match &sc.metric {
        MetricSpec::Flat { .. } => Some(RadialMetric::flat(sc.dim)?),
        MetricSpec::Cylinder { core } => Some(RadialMetric::cylinder(*core)?),
        MetricSpec::Bumps { constant, .. } => {
            let b = sc.metric.resolved_bumps(sc.dim)?;
            if b.len() == 1 && *constant == 0.0 && b[0].center.iter().all(|c| *c == 0.0) {
                Some(RadialMetric::gaussian_bump(sc.dim, b[0].mass, b[0].sigma)?)
            } else {
                None
            }
        }
        _ => None,
    })
}

fn growth_rows(t: &GrowthTable) -> Vec<Vec<f64>> {
    t.rows.iter().map(|r| vec![r.r, r.volume, r.ratio]).collect()
}

fn stage_geometry(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Geometry.name();
    let g = ctx.grid;
    let n = g.dim();
    let center = sc.geometry.center.clone().unwrap_or_else(|| origin(n));
    let radii = if sc.geometry.radii.is_empty() {
        let (c, _) = g.snap(&center).ok_or_else(|| CliError::Config("geometry centre is outside the box".into()))?;
        let map = DistanceMap::full(ctx.metric(), c);
        let reach = (0..g.len()).filter(|&i| g.rim_distance(i) == 0).map(|i| map.dist[i]).fold(f64::INFINITY, f64::min);
        (1..=8).map(|k| 0.1 * k as f64 * reach).collect()
    } else {
        sc.geometry.radii.clone()
    };
    let table = volume_growth_table(ctx.metric(), &center, &radii)?;
    ctx.report.constant("geometry.growth_c1", table.c1);
    ctx.report.constant("geometry.growth_c2", table.c2);
    let rows = growth_rows(&table);
    ctx.out.csv("growth.csv", &["r", "Vol", "ratio"], &rows)?;
    ctx.out.dat("growth.dat", &["r", "Vol", "Vol/r^n"], &rows.iter().cloned().map(Some).collect::<Vec<_>>())?;
    let flat: Vec<(f64, f64)> = radii.iter().map(|&r| (r, unit_ball_volume(n) * r.powi(n as i32))).collect();
    ctx.out.plot(
        "growth.svg",
        &format!("{}: geodesic ball volume", sc.name),
        ("r", "Vol_g(B(r))"),
        Axes { log_x: true, log_y: true },
        &[
            Series { label: "grid", points: table.rows.iter().map(|r| (r.r, r.volume)).collect() },
            Series { label: "flat", points: flat },
        ],
    )?;
    let mut sec = json!({ "center": center, "growth": table });

    if let Some(e) = sc.expect.ball_volume {
        let b = geodesic_ball(ctx.metric(), &origin(n), e.radius)?;
        let ok = (b.volume - e.value).abs() <= e.rtol * e.value;
        sec["ball_volume"] = json!({ "radius": e.radius, "volume": b.volume });
        ctx.report.hard(st, "ball_volume", ok, Some(b.volume), format!("Vol_g(B(0,{})) within {}% of {}", e.radius, 100.0 * e.rtol, e.value));
    }

    let mut iso = Vec::new();
    for &side in &sc.geometry.cube_sides {
        let region = cube_region(&g, &center, side);
        let r = isoperimetric_ratio(ctx.metric(), &region)?;
        iso.push(json!({ "side": side, "ratio": r }));
        if let Some(e) = sc.expect.isoperimetric {
            ctx.report.hard(st, &format!("isoperimetric.s{}", key(side)), e.matches(r), Some(r), format!("cube ratio {} (rtol {:e})", e.value, e.rtol));
        }
    }
    sec["isoperimetric"] = json!(iso);

    if let Some(radial) = radial_oracle(sc)? {
        let rt = radial.growth_table(&sc.geometry.radial_radii);
        let drop = rt.rows.first().map(|f| f.ratio).unwrap_or(f64::NAN) / rt.rows.last().map(|l| l.ratio).unwrap_or(f64::NAN);
        let ends = radial.end_ratio_sweep(&sc.geometry.end_radii)?;
        ctx.report.constant("geometry.radial_drop", drop);
        ctx.report.constant("geometry.end_ratio_tail", ends.tail);
        let rrows = growth_rows(&rt);
        ctx.out.csv("radial_growth.csv", &["rho", "Vol", "ratio"], &rrows)?;
        let erows: Vec<Vec<f64>> = ends.rows.iter().map(|(r, e)| vec![*r, *e]).collect();
        ctx.out.csv("end_ratio.csv", &["r", "end_ratio"], &erows)?;
        ctx.out.dat("end_ratio.dat", &["r", "end_ratio"], &erows.iter().cloned().map(Some).collect::<Vec<_>>())?;
        ctx.out.plot(
            "radial_growth.svg",
            &format!("{}: Vol/rho^n on the radial path", sc.name),
            ("rho", "Vol/rho^n"),
            Axes { log_x: true, log_y: true },
            &[Series { label: "radial", points: rt.rows.iter().map(|r| (r.r, r.ratio)).collect() }],
        )?;
        // the radial path must agree with the grid where both apply
        let small: Vec<f64> = table.rows.iter().take(4).map(|r| r.r).collect();
        let cross = small
            .iter()
            .zip(&table.rows)
            .map(|(&r, row)| (radial.geodesic_ball_volume(r) / row.volume - 1.0).abs())
            .fold(0.0, f64::max);
        ctx.report.constant("geometry.radial_grid_mismatch", cross);
        if let Some(min_drop) = sc.expect.radial_volume_drop {
            ctx.report.hard(st, "radial_volume_drop", drop >= min_drop, Some(drop), format!("Vol/r^n falls by at least {min_drop}x"));
        }
        if let Some(max_tail) = sc.expect.end_ratio_tail {
            ctx.report.hard(st, "end_ratio_tail", ends.tail <= max_tail, Some(ends.tail), format!("end ratio at r = {:e} below {max_tail}", sc.geometry.end_radii.last().unwrap_or(&0.0)));
        }
        sec["radial"] = json!({ "growth": rt, "drop": drop, "end_ratio": ends, "grid_mismatch": cross });
    }
    ctx.section(Stage::Geometry, sec);
    Ok(())
}

fn stage_weights(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Weights.name();
    let p = &sc.weights;
    let cfg = WeightConfig {
        p_values: sc.p_values.clone(),
        holder_exponent: p.holder_exponent,
        balls: p.balls,
        pairs: p.pairs,
        seed: ctx.seeds.weights,
        radius_range: p.radius_range,
        separation_range: p.separation_range,
    };
    let rep = weight_report(ctx.omega(), &cfg)?;
    // A_p needs ω > 0 at every node; |x₁|^α vanishes on grid nodes
    let positive = ctx.omega().min() > 0.0;
    for &(pv, a) in &rep.ap_bounds {
        ctx.report.constant(format!("weights.ap.p{}", key(pv)), a);
        if positive {
            ctx.report.hard(st, &format!("ap_finite.p{}", key(pv)), a.is_finite() && a >= 1.0 - 1e-9, Some(a), "sampled A_p constant is finite and at least 1");
        }
    }
    ctx.report.constant("weights.doubling", rep.doubling_constant);
    ctx.report.constant("weights.reverse_holder", rep.reverse_holder.1);
    ctx.report.constant("weights.strong_ainf", rep.strong_ainf.worst());
    ctx.report.hard(st, "doubling_finite", rep.doubling_constant.is_finite(), Some(rep.doubling_constant), "sampled doubling constant is finite");
    ctx.doubling_exponent = Some(rep.doubling_exponent);
    let rows: Vec<Vec<f64>> = rep.ap_bounds.iter().map(|&(p, a)| vec![p, a]).collect();
    ctx.out.csv("weights.csv", &["p", "A_p"], &rows)?;
    let mut sec = serde_json::to_value(&rep).unwrap();
    sec["omega_positive"] = json!(positive);
    if let MetricSpec::AxisWeight { .. } = sc.metric {
        let g = ctx.grid;
        let l = g.halfwidth();
        let pairs = axis_straddling_pairs(&g, p.axis_pairs, ctx.seeds.pairs, (0.1 * l, 0.8 * l));
        let wd = WeightedDistances::new(ctx.omega().clone(), Stencil::default_for(g.dim()))?;
        let r = strong_ainfty_ratio(&wd, &pairs, ctx.seeds.pairs)?;
        ctx.report.constant("weights.axis_delta_over_d", r.max_delta_over_d);
        sec["axis_pairs"] = serde_json::to_value(r).unwrap();
    }
    ctx.section(Stage::Weights, sec);
    Ok(())
}

fn stage_poincare(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Poincare.name();
    let energy = match sc.poincare.energy {
        EnergyKind::Analytic => Energy::Analytic,
        EnergyKind::EdgeForm => Energy::EdgeForm,
    };
    let ps: Vec<f64> = sc.p_values.iter().copied().filter(|p| energy == Energy::Analytic || *p == 2.0).collect();
    let omega = ctx.omega().clone();
    let fs = ctx.functions()?.to_vec();
    let mut rows = Vec::new();
    let mut sec = Vec::new();
    for &p in &ps {
        let mut ratios = Vec::new();
        let mut strong = Vec::new();
        let mut infinite = 0usize;
        for (bi, b) in sc.balls.iter().enumerate() {
            let ball = b.ball();
            let res = fs
                .par_iter()
                .map(|f| {
                    let r = p_poincare_ratio(f, &omega, &ball, p, energy)?;
                    let s = if sc.poincare.strong { Some(strong_p_poincare_ratio(f, &omega, &ball, p)?) } else { None };
                    Ok((r, s))
                })
                .collect::<Result<Vec<_>, qlab_core::Error>>()?;
            for (fi, (r, s)) in res.into_iter().enumerate() {
                infinite += usize::from(r.infinite);
                ratios.push(r.ratio);
                let sr = s.map_or(f64::NAN, |s| s.ratio);
                if let Some(s) = s {
                    infinite += usize::from(s.infinite);
                    strong.push(s.ratio);
                }
                rows.push(vec![p, bi as f64, fi as f64, r.ratio, sr]);
            }
        }
        let c = fitted_constant(ratios.iter().copied());
        ctx.report.constant(format!("poincare.p{}", key(p)), c);
        let mut entry = json!({ "p": p, "constant": c, "samples": ratios.len() });
        if !strong.is_empty() {
            let cs = fitted_constant(strong.iter().copied());
            ctx.report.constant(format!("poincare.strong.p{}", key(p)), cs);
            entry["strong_constant"] = json!(cs);
        }
        ctx.report.hard(st, &format!("finite.p{}", key(p)), infinite == 0, Some(c), "every Poincaré ratio is finite");
        sec.push(entry);
    }
    ctx.out.csv("poincare.csv", &["p", "ball", "f", "ratio", "strong_ratio"], &rows)?;
    ctx.section(Stage::Poincare, json!({ "energy": sc.poincare.energy, "exponents": sec, "seed": ctx.seeds.functions }));
    Ok(())
}

fn stage_spectral(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Spectral.name();
    let omega = ctx.omega().clone();
    let fs = ctx.functions()?.to_vec();
    let cache = ctx.out.dir().join("cache");
    let mut eig_rows = Vec::new();
    let mut sq_rows = Vec::new();
    let mut sec = Vec::new();
    for (bi, b) in sc.balls.iter().enumerate() {
        let ball = b.ball();
        let two_b = ball.dilate(2.0);
        let op = WeightedOperator::from_weight(&omega, &two_b)?;
        let count = if op.len() <= DENSE_LIMIT { EigCount::All } else { EigCount::Lowest(sc.spectral.modes.min(op.len())) };
        let dec = if sc.spectral.cache {
            let path = SpectralDecomposition::cache_path(&cache, &ctx.hash[..16], &two_b, ctx.grid.resolution());
            SpectralDecomposition::load_or_compute(&op, &path, count)?
        } else {
            eig(&op, count)?
        };
        let lam = &dec.eigenvalues;
        let top = lam.iter().copied().fold(0.0, f64::max);
        let ortho = dec.orthonormality_error();
        let resid = dec.max_residual(&op) / top.max(1e-300);
        ctx.report.hard(st, &format!("orthonormal.b{bi}"), ortho <= 1e-8, Some(ortho), "eigenvectors orthonormal in the mass inner product");
        ctx.report.hard(st, &format!("residual.b{bi}"), resid <= 1e-8, Some(resid), "max eigen-residual relative to the top eigenvalue");
        ctx.report.hard(st, &format!("nonnegative.b{bi}"), lam.iter().all(|l| *l >= -1e-10 * top), lam.first().copied(), "spectrum is nonnegative up to 1e-10 of the top");
        let lambda1 = lam.iter().copied().find(|l| *l > 0.0).unwrap_or(f64::NAN);
        ctx.report.constant(format!("spectral.lambda1.b{bi}"), lambda1);
        for (k, l) in lam.iter().enumerate().take(50) {
            eig_rows.push(vec![bi as f64, k as f64, *l]);
        }

        let mut worst_by_alpha = Vec::new();
        for &alpha in &sc.alphas {
            let kc = kernel_constant(alpha)?;
            let errs = fs
                .par_iter()
                .enumerate()
                .map(|(fi, f)| {
                    let fl = op.restrict(&f.values);
                    let q = square_function_quadrature(&dec, &fl, alpha)?;
                    let norm = dec.frac_norm_sq(0.25 * alpha, &fl);
                    let rel = (q / (kc * norm) - 1.0).abs();
                    Ok(vec![bi as f64, alpha, fi as f64, q, norm, q / norm, kc, rel])
                })
                .collect::<Result<Vec<_>, qlab_core::Error>>()?;
            let worst = errs.iter().map(|r| r[7]).fold(0.0, f64::max);
            ctx.report.hard(
                st,
                &format!("square_function.b{bi}.a{}", key(alpha)),
                worst <= IDENTITY_TOLERANCE,
                Some(worst),
                format!("square function / |L^(a/4) f|^2 = K_a = {kc} within {IDENTITY_TOLERANCE:e}"),
            );
            worst_by_alpha.push(json!({ "alpha": alpha, "k_alpha": kc, "max_relative_error": worst }));
            sq_rows.extend(errs);
        }
        sec.push(json!({
            "ball": bi,
            "two_b": { "center": two_b.center, "radius": two_b.radius },
            "nodes": op.len(),
            "modes": lam.len(),
            "complete": dec.is_complete(),
            "lambda1": lambda1,
            "orthonormality_error": ortho,
            "relative_residual": resid,
            "square_function": worst_by_alpha,
        }));
        ctx.spectra.push(BallSpectrum { index: bi, ball, op, dec });
    }
    if let Ok(k) = kernel_constant(1.0) {
        let half_pi = std::f64::consts::FRAC_PI_2;
        ctx.report.hard(st, "k_alpha_one", (k - half_pi).abs() <= 1e-12, Some(k), "K_1 = pi/2");
    }
    ctx.out.csv("eigenvalues.csv", &["ball", "k", "lambda"], &eig_rows)?;
    ctx.out.csv("square_function.csv", &["ball", "alpha", "f", "quadrature", "frac_norm_sq", "ratio", "k_alpha", "relative_error"], &sq_rows)?;
    ctx.section(Stage::Spectral, json!({ "balls": sec }));
    Ok(())
}

fn stage_theorem1(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Theorem1.name();
    let fs = ctx.functions()?.to_vec();
    let metric = ctx.metric().clone();
    let mut rows = Vec::new();
    let mut by_alpha: Vec<(f64, [f64; 4])> = sc.alphas.iter().map(|a| (*a, [0.0; 4])).collect();
    let mut sampling = Vec::new();
    for s in &ctx.spectra {
        let mode = if s.op.len() <= sc.theorem1.full_limit {
            PairSampling::Full
        } else {
            PairSampling::Stratified { block: sc.theorem1.block, seed: ctx.seeds.pairs }
        };
        sampling.push(json!({ "ball": s.index, "full": matches!(mode, PairSampling::Full) }));
        let pairs = PairDistances::compute(&metric, &s.op, mode);
        for (ai, &alpha) in sc.alphas.iter().enumerate() {
            let mut finite = true;
            for (fi, f) in fs.iter().enumerate() {
                let t = theorem1_check(&metric, &s.op, &s.dec, &s.ball, f, alpha, &pairs)?;
                let rs = [t.measure_ratio, t.mid_ratio, t.lhs_ratio];
                finite &= rs.iter().all(|r| r.is_finite());
                let acc = &mut by_alpha[ai].1;
                for k in 0..3 {
                    acc[k] = acc[k].max(rs[k]);
                }
                acc[3] = acc[3].max(t.excluded_fraction);
                rows.push(vec![
                    s.index as f64,
                    alpha,
                    fi as f64,
                    t.lhs,
                    t.mid,
                    t.rhs,
                    t.offdiag,
                    t.diagonal_correction,
                    t.volume,
                    t.measure_ratio,
                    t.mid_ratio,
                    t.lhs_ratio,
                ]);
            }
            ctx.report.hard(st, &format!("finite.b{}.a{}", s.index, key(alpha)), finite, None, "lhs/mid and mid, lhs over rhs are finite");
        }
    }
    let mut sec = Vec::new();
    for (alpha, acc) in &by_alpha {
        let a = key(*alpha);
        ctx.report.constant(format!("theorem1.measure_ratio.a{a}"), acc[0]);
        ctx.report.constant(format!("theorem1.mid_ratio.a{a}"), acc[1]);
        ctx.report.constant(format!("theorem1.lhs_ratio.a{a}"), acc[2]);
        sec.push(json!({ "alpha": alpha, "measure_ratio": acc[0], "mid_ratio": acc[1], "lhs_ratio": acc[2], "max_excluded_fraction": acc[3] }));
    }
    ctx.out.csv(
        "theorem1.csv",
        &["ball", "alpha", "f", "lhs", "mid", "rhs", "offdiag", "diagonal", "volume", "measure_ratio", "mid_ratio", "lhs_ratio"],
        &rows,
    )?;
    let mut v = json!({ "alphas": sec, "sampling": sampling, "assumption_violated": ctx.assumption_violated });
    if ctx.assumption_violated {
        v["note"] = json!("assumption violated: the metric is not normal, the inequality is not expected to hold");
        ctx.report.flag("theorem1: assumption violated");
    }
    ctx.section(Stage::Theorem1, v);
    Ok(())
}

fn stage_decay(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let p = &sc.decay;
    let center = p.center.clone().unwrap_or_else(|| origin(sc.dim));
    let metric = ctx.metric();
    let radius = p.radius.unwrap_or(0.9 * ctx.grid.halfwidth());
    let op = WeightedOperator::assemble(metric, &Ball::new(center.clone(), radius))?;
    let e = Ball::new(center, p.e_radius);
    let ts = if p.ts.is_empty() {
        // largest √t whose farthest ratio still finds nodes, with a 20% margin
        let sources = ctx.grid.nodes_in_ball(&e);
        let dist = metric.paths().sweep(&sources, &SweepLimit { radius: None, targets: Some(op.nodes()) });
        let reach = op.nodes().iter().map(|&g| dist[g]).fold(0.0, f64::max);
        let smax = p.ratios.iter().copied().fold(0.0, f64::max);
        let t1 = (0.8 * reach / smax).powi(2);
        vec![0.5 * t1, t1]
    } else {
        p.ts.clone()
    };
    let fit = off_diagonal_decay(&op, metric, &e, &ts, &p.ratios)?;
    let ok = fit.slope < 0.0 && fit.r2 >= 0.9;
    ctx.report.hard("decay", "log_linear", ok, Some(fit.slope), format!("slope < 0 with R^2 = {:.4} >= 0.9", fit.r2));
    ctx.report.constant("decay.slope", fit.slope);
    ctx.report.constant("decay.r2", fit.r2);
    let rows: Vec<Vec<f64>> = fit.samples.iter().map(|s| vec![s.t, s.d, s.s, s.value, s.relative]).collect();
    ctx.out.csv("decay.csv", &["t", "d", "s", "value", "relative"], &rows)?;
    let mut dat = Vec::new();
    let mut series = Vec::new();
    let labels: Vec<String> = ts.iter().map(|t| format!("t = {t}")).collect();
    for (k, &t) in ts.iter().enumerate() {
        if k > 0 {
            dat.push(None);
        }
        let pts: Vec<(f64, f64)> = fit.samples.iter().filter(|s| s.t == t).map(|s| (s.s, s.relative)).collect();
        dat.extend(pts.iter().map(|&(s, r)| Some(vec![t, s, r])));
        series.push((k, pts));
    }
    ctx.out.dat("decay.dat", &["t", "d/sqrt(t)", "relative"], &dat)?;
    let series: Vec<Series> = series.into_iter().map(|(k, points)| Series { label: &labels[k], points }).collect();
    ctx.out.plot("decay.svg", &format!("{}: off-diagonal decay", sc.name), ("d/sqrt(t)", "relative value"), Axes { log_x: false, log_y: true }, &series)?;
    ctx.section(Stage::Decay, serde_json::to_value(&fit).unwrap());
    Ok(())
}

fn stage_covering(ctx: &mut Ctx) -> Result<(), CliError> {
    let sc = ctx.sc;
    let st = Stage::Covering.name();
    let p = &sc.covering;
    let g = ctx.grid;
    let metric = ctx.metric().clone();
    let domain = box_domain(&g, p.domain);
    let t = p.t.unwrap_or_else(|| {
        let top = domain.iter().map(|&i| metric.u().get(i).exp()).fold(0.0, f64::max);
        (3.5 * g.spacing() * top).powi(2)
    });
    let cover = build_cover(&metric, &domain, t)?;
    let cert = cover.certificate;
    ctx.report.hard(st, "disjoint", cert.disjoint, cert.min_separation, "centres pairwise farther apart than 2 sqrt(t)");
    ctx.report.hard(st, "covered", cert.covered, Some(cert.max_gap), "every domain node within 2 sqrt(t) of a centre");
    ctx.out.text("cover.json", &cover.to_json()?)?;

    let volumes = center_volumes(&cover, &metric);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seeds.covering);
    let queries: Vec<usize> = domain.choose_multiple(&mut rng, p.queries.min(domain.len())).copied().collect();
    let mut samples = Vec::new();
    for &theta in &p.thetas {
        let s = queries
            .par_iter()
            .map(|&x| overlap_count(&cover, &metric, &volumes, x, theta))
            .collect::<Result<Vec<_>, _>>()?;
        samples.extend(s);
    }
    let kappa = ctx.doubling_exponent.unwrap_or(g.dim() as f64);
    let theta0 = p.thetas.iter().copied().fold(f64::INFINITY, f64::min);
    let base: Vec<_> = samples.iter().filter(|s| s.theta == theta0).cloned().collect();
    let c_tilde = fit_overlap_constant(&base, kappa);
    let holds = overlap_bound_holds(&samples, c_tilde, kappa);
    ctx.report.hard(st, "overlap_bound", holds, Some(c_tilde), format!("count <= C~ theta^(2 kappa), kappa = {kappa:.4}, C~ fitted at theta = {theta0}"));
    let broken = samples.iter().filter(|s| s.chain_holds() == Some(false)).count();
    ctx.report.hard(st, "packing_chain", broken == 0, Some(broken as f64), "packed centre volumes fit in the enclosing ball");
    ctx.report.constant("covering.c_tilde", c_tilde);
    ctx.report.constant("covering.centers", cover.len() as f64);
    let mut counts = Vec::new();
    for &theta in &p.thetas {
        let m = samples.iter().filter(|s| s.theta == theta).map(|s| s.count).max().unwrap_or(0);
        ctx.report.constant(format!("covering.max_count.t{}", key(theta)), m as f64);
        counts.push(json!({ "theta": theta, "max_count": m }));
    }
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            vec![
                s.x as f64,
                s.theta,
                s.count as f64,
                s.packed_volume.unwrap_or(f64::NAN),
                s.enclosing_volume.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    ctx.out.csv("overlap.csv", &["x", "theta", "count", "packed_volume", "enclosing_volume"], &rows)?;

    // annuli around the centres nearest the origin
    let fs = ctx.functions()?.to_vec();
    let op = WeightedOperator::assemble(&metric, &Ball::new(origin(g.dim()), p.annuli_radius.unwrap_or(0.8 * g.halfwidth())))?;
    let fl = op.restrict(&fs[0].values);
    let mut order: Vec<usize> = (0..cover.len()).collect();
    order.sort_by(|&a, &b| norm(&cover.points[a]).total_cmp(&norm(&cover.points[b])).then(a.cmp(&b)));
    let jobs: Vec<(usize, u32)> = order.iter().take(p.annuli_centers).flat_map(|&j| (0..=p.annuli_k).map(move |k| (j, k))).collect();
    let annuli: Vec<_> = jobs.par_iter().map(|&(j, k)| annuli_oscillation(&cover, &metric, &op, &fl, j, k).ok()).collect();
    let skipped = annuli.iter().filter(|a| a.is_none()).count();
    let annuli: Vec<_> = annuli.into_iter().flatten().collect();
    let worst = annuli.iter().map(|a| a.ratio()).fold(0.0, f64::max);
    ctx.report.constant("covering.annuli_ratio", worst);
    let arows: Vec<Vec<f64>> = annuli.iter().map(|a| vec![a.j as f64, a.k as f64, a.lhs, a.rhs, a.volume, a.ratio()]).collect();
    ctx.out.csv("annuli.csv", &["j", "k", "lhs", "rhs", "volume", "ratio"], &arows)?;

    ctx.section(
        Stage::Covering,
        json!({
            "t": cover.t,
            "radius": cover.radius,
            "centers": cover.len(),
            "domain_size": cover.domain_size,
            "certificate": cert,
            "kappa": kappa,
            "c_tilde": c_tilde,
            "queries": queries.len(),
            "overlap": counts,
            "annuli": { "samples": annuli.len(), "skipped": skipped, "max_ratio": worst },
        }),
    );
    Ok(())
}

/// Soft regressions against the scenario baseline.
fn baseline_checks(ctx: &mut Ctx) {
    let band = ctx.sc.baseline.band;
    for (k, target) in &ctx.sc.baseline.constants {
        let got = ctx.report.constants.get(k).copied();
        let (passed, detail) = match got {
            Some(v) => {
                let rel = (v - target).abs() / target.abs().max(1e-300);
                (rel <= band, format!("baseline {target}, relative change {rel:.3} (band {band})"))
            }
            None => (false, format!("baseline {target}, constant not produced")),
        };
        ctx.report.check("baseline", k, Severity::Soft, passed, got, detail);
    }
}
