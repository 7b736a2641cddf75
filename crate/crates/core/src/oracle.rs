//! Independent reference computations: brute-force 1-D transport,
//! central finite differences and empirical Lipschitz probes.
//!
//! Nothing here calls into the sorting or gradient code it is used to check.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `n` accepted by [`wasserstein_1d_bruteforce`] (8! = 40320 matchings).
pub const BRUTEFORCE_LIMIT: usize = 8;

/// Minimum over all `n!` matchings `pi` of `(1/n) sum_k |theta.x_k - theta.y_pi(k)|^p`.
pub fn wasserstein_1d_bruteforce(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
    p: f64,
) -> Result<f64> {
    let n = x.nrows();
    if n > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: BRUTEFORCE_LIMIT,
        });
    }
    if y.nrows() != n {
        return Err(Error::mismatch("oracle rows", n, y.nrows()));
    }
    if x.ncols() != theta.len() || y.ncols() != theta.len() {
        return Err(Error::mismatch("oracle direction", theta.len(), x.ncols()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let px: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| {
            let mut s = 0.0;
            for j in 0..r.len() {
                s += r[j] * theta[j];
            }
            s
        })
        .collect();
    let py: Vec<f64> = y
        .rows()
        .into_iter()
        .map(|r| {
            let mut s = 0.0;
            for j in 0..r.len() {
                s += r[j] * theta[j];
            }
            s
        })
        .collect();

    // Heap's algorithm over the matching of y indices.
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(k, &j)| (px[k] - py[j]).abs().powf(p))
            .sum::<f64>()
            / n as f64
    };
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Central differences `(f(u + h e_i) - f(u - h e_i)) / 2h` per coordinate.
pub fn fd_gradient<F>(fun: F, u: ArrayView1<'_, f64>, h: f64) -> Array1<f64>
where
    F: Fn(&Array1<f64>) -> f64,
{
    let mut point = u.to_owned();
    let mut grad = Array1::zeros(u.len());
    for i in 0..u.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = fun(&point);
        point[i] = orig - h;
        let minus = fun(&point);
        point[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `max_i |a_i - b_i| / max(1, |a|_2)` with `a` the analytic value.
pub fn relative_error(analytic: ArrayView1<'_, f64>, reference: ArrayView1<'_, f64>) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

/// Outcome of a sampling probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Largest observed ratio or error.
    pub max_value: f64,
    /// Inputs that produced `max_value`.
    pub argmax: Vec<Vec<f64>>,
    pub samples: usize,
}

impl ProbeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("probe report serialises")
    }
}

fn uniform_in_ball<R: Rng + ?Sized>(center: ArrayView1<'_, f64>, radius: f64, rng: &mut R) -> Array1<f64> {
    let d = center.len();
    loop {
        let g: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = g.dot(&g).sqrt();
        if norm == 0.0 {
            continue;
        }
        let r: f64 = rng.random::<f64>().powf(1.0 / d as f64) * radius;
        return &center + &(g * (r / norm));
    }
}

/// Largest `|f(u) - f(u')| / |u - u'|` over pairs drawn uniformly from
/// `B(center, eps)`; pairs closer than `1e-9` are redrawn.
pub fn lipschitz_probe<F, R>(
    fun: F,
    center: ArrayView1<'_, f64>,
    eps: f64,
    num_pairs: usize,
    rng: &mut R,
) -> Result<ProbeReport>
where
    F: Fn(&Array1<f64>) -> f64,
    R: Rng + ?Sized,
{
    if num_pairs == 0 {
        return Err(Error::InvalidArgument("probe needs at least one pair".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("probe radius must be positive".into()));
    }
    let mut best = 0.0f64;
    let mut argmax = vec![center.to_vec(), center.to_vec()];
    for _ in 0..num_pairs {
        let (a, b, dist) = loop {
            let a = uniform_in_ball(center, eps, rng);
            let b = uniform_in_ball(center, eps, rng);
            let diff = &a - &b;
            let dist = diff.dot(&diff).sqrt();
            if dist >= 1e-9 {
                break (a, b, dist);
            }
        };
        let ratio = (fun(&a) - fun(&b)).abs() / dist;
        if ratio > best {
            best = ratio;
            argmax = vec![a.to_vec(), b.to_vec()];
        }
    }
    Ok(ProbeReport {
        max_value: best,
        argmax,
        samples: num_pairs,
    })
}
