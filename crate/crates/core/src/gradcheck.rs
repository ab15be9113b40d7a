//! Central finite-difference gradient checking.

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` with central differences at the given coordinates.
///
/// The relative error uses `floor` to avoid dividing by near-zero gradients;
/// coordinates where both values fall below it are compared absolutely.
pub fn check_gradient<F>(mut f: F, x: &[f64], analytic: &[f64], indices: &[usize], h: f64, floor: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let num = central_difference(&mut f, &mut xs, i, h);
        let e = relative_error(analytic[i], num, floor);
        if e > out.max_rel_error || out.checked == 0 {
            out.max_rel_error = out.max_rel_error.max(e);
            out.worst_index = i;
        }
        out.checked += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_is_checked() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[0] * x[1];
        let x = [1.5, -0.5];
        let g = [3.0 * 1.5f64.powi(2) + 2.0 * -0.5, 2.0 * 1.5];
        let r = check_gradient(f, &x, &g, &[0, 1], 1e-4, 1e-8);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let bad = check_gradient(f, &x, &[0.0, 3.0], &[0, 1], 1e-4, 1e-8);
        assert_eq!(bad.worst_index, 0);
        assert!(bad.max_rel_error > 0.9);
    }
}
