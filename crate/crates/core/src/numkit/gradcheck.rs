/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: usize,
}

/// Denominator floor for the relative error, so that parameters whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central finite differences of `f` at `params`, compared entrywise with
/// `analytic`. Relative error is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn check_gradient<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let numeric = numeric_gradient(&f, params, h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}

pub fn numeric_gradient<F>(f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient() {
        let f = |p: &[f64]| p[0] * p[0] * p[1] + p[1].powi(3);
        let p = [1.5, -0.5];
        let analytic = [2.0 * p[0] * p[1], p[0] * p[0] + 3.0 * p[1] * p[1]];
        let r = check_gradient(f, &p, &analytic, 1e-5);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let f = |p: &[f64]| p[0] * p[0];
        let r = check_gradient(f, &[2.0], &[3.0], 1e-5);
        assert!(r.max_rel_error > 0.2);
    }
}
