/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Components where `f` could not be evaluated at `x +- h`.
    pub skipped: Vec<usize>,
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// component. `f` returns `None` where it is not evaluable (for example when a
/// perturbation crosses a ReLU kink); such components are skipped.
pub fn finite_diff_check<F>(mut f: F, analytic: &[f64], x: &[f64], h: f64) -> FdReport
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), x.len());
    let mut point = x.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        skipped: Vec::new(),
    };
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let up = f(&point);
        point[i] = x[i] - h;
        let down = f(&point);
        point[i] = x[i];
        let (Some(up), Some(down)) = (up, down) else {
            report.skipped.push(i);
            continue;
        };
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = [0.5, -1.25, 3.0];
        let f = |x: &[f64]| Some(x.iter().zip(&c).map(|(a, b)| a * b).sum());
        let r = finite_diff_check(f, &c, &[0.1, 0.2, 0.3], 1e-4);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn quadratic_at_ones() {
        let f = |x: &[f64]| Some(x.iter().map(|v| v * v).sum());
        let r = finite_diff_check(f, &[2.0, 2.0], &[1.0, 1.0], 1e-4);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn unevaluable_components_are_skipped() {
        let f = |x: &[f64]| if x[1] > 0.5 { None } else { Some(x[0]) };
        let r = finite_diff_check(f, &[1.0, 0.0], &[0.0, 0.5], 1e-3);
        assert_eq!(r.skipped, vec![1]);
        assert!(r.max_rel_error < 1e-9);
    }
}
