//! Composite Gauss-Legendre rules for the 1-D oracles (radial integrals,
//! `t`-quadrature of the square function).

use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

const ORDER: usize = 16;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(ORDER.try_into().expect("nonzero order")))
}

/// `∫_a^b f` with `panels` equal panels of 16-point Gauss-Legendre.
pub fn composite(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let panels = panels.max(1);
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = a + k as f64 * w;
            rule().integrate(lo, lo + w, &mut f)
        })
        .sum()
}

/// `∫_a^b f(x) dx` for `0 < a < b`, integrating in `log x` with panels per decade.
pub fn log_composite(a: f64, b: f64, panels_per_decade: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    assert!(a > 0.0 && b >= a);
    let (la, lb) = (a.ln(), b.ln());
    let panels = (((lb - la) / std::f64::consts::LN_10) * panels_per_decade as f64).ceil() as usize;
    composite(la, lb, panels, |t| {
        let x = t.exp();
        f(x) * x
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_log_rules() {
        assert!((composite(0.0, 2.0, 3, |x| x.powi(7)) - 32.0).abs() < 1e-11);
        let v = log_composite(1e-3, 1e4, 4, |x| 1.0 / (1.0 + x * x));
        let exact = 1e4f64.atan() - 1e-3f64.atan();
        assert!((v - exact).abs() < 1e-12);
    }
}
