//! Smooth ball indicators built from the `exp(-1/s)` bump.
//!
//! `1^eps_{B(0,R)}(v) = g(((R + eps)^2 - |v|^2) / (4 R eps))` with
//! `g(s) = f(s) / (f(s) + f(1 - s))` and `f(s) = exp(-1/s)` for `s > 0`,
//! `f(s) = 0` otherwise. The value is 1 for `|v| <= R - eps`, 0 for
//! `|v| >= R + eps`, and the function is C^infinity.

use ndarray::ArrayView1;

#[inline]
fn bump(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

#[inline]
fn bump_derivative(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp() / (s * s)
    } else {
        0.0
    }
}

/// Smooth transition from 0 (`s <= 0`) to 1 (`s >= 1`).
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let a = bump(s);
    let b = bump(1.0 - s);
    a / (a + b)
}

pub fn smooth_step_derivative(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let a = bump(s);
    let b = bump(1.0 - s);
    let denom = a + b;
    (bump_derivative(s) * b + a * bump_derivative(1.0 - s)) / (denom * denom)
}

#[inline]
fn shell_coordinate(sq_norm: f64, radius: f64, eps: f64) -> f64 {
    ((radius + eps).powi(2) - sq_norm) / (4.0 * radius * eps)
}

/// Value of the smooth indicator of `B(0, radius)` with smoothing width `eps`.
pub fn smooth_indicator(v: ArrayView1<'_, f64>, radius: f64, eps: f64) -> f64 {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    smooth_step(shell_coordinate(sq, radius, eps))
}

/// Value and gradient. The gradient is `-g'(s) v / (2 R eps)`.
pub(crate) fn indicator_with_gradient(v: &[f64], radius: f64, eps: f64) -> (f64, Vec<f64>) {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    let s = shell_coordinate(sq, radius, eps);
    let value = smooth_step(s);
    let slope = -smooth_step_derivative(s) / (2.0 * radius * eps);
    (value, v.iter().map(|x| slope * x).collect())
}

pub(crate) fn indicator_value(v: &[f64], radius: f64, eps: f64) -> f64 {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    smooth_step(shell_coordinate(sq, radius, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn radial(r: f64, radius: f64, eps: f64) -> f64 {
        smooth_indicator(array![r].view(), radius, eps)
    }

    #[test]
    fn plateau_and_dead_zone() {
        assert_eq!(smooth_indicator(array![0.0, 0.0].view(), 1.0, 0.1), 1.0);
        assert_eq!(radial(0.9, 1.0, 0.1), 1.0);
        assert_eq!(radial(1.1, 1.0, 0.1), 0.0);
        assert_eq!(radial(5.0, 1.0, 0.1), 0.0);
    }

    #[test]
    fn midpoint_is_half() {
        let (r, e) = (2.0f64, 0.3f64);
        let mid = (r * r + e * e).sqrt();
        assert!((radial(mid, r, e) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (radius, eps) = (1.5, 0.4);
        let h = 1e-6;
        for v in [[1.2, 0.3], [0.9, -0.9], [1.5, 0.0], [0.2, 1.4]] {
            let (_, grad) = indicator_with_gradient(&v, radius, eps);
            for i in 0..2 {
                let mut plus = v;
                let mut minus = v;
                plus[i] += h;
                minus[i] -= h;
                let fd = (indicator_value(&plus, radius, eps) - indicator_value(&minus, radius, eps))
                    / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-7, "{v:?} {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn range_is_unit_interval() {
        for k in 0..=200 {
            let r = k as f64 * 0.01;
            let v = radial(r, 1.0, 0.25);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
