//! Continuous-time diagnostics: piecewise-affine interpolation of iterates,
//! the `d_c` metric of uniform convergence on segments, an explicit-Euler
//! reference flow for the population gradient, and the criticality gap of
//! the projected problem.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::network::NetworkSpec;
use crate::sgd::{fmt_float, Trajectory};
use crate::swloss::{estimate_grad_f, Integration, OrderP};

/// Relative tolerance for snapping `s / step` onto a knot.
const KNOT_SNAP: f64 = 1e-9;

/// Continuous path through `knots[k]` at time `k * step`, affine in between.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseAffinePath {
    knots: Array2<f64>,
    step: f64,
}

/// The interpolation `u_alpha(s)` of an SGD run.
pub type InterpolatedPath = PiecewiseAffinePath;

impl PiecewiseAffinePath {
    pub fn new(knots: Array2<f64>, step: f64) -> Result<Self> {
        if knots.nrows() == 0 {
            return Err(Error::InvalidArgument("path needs at least one knot".into()));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidArgument(format!("knot spacing must be positive, got {step}")));
        }
        Ok(Self { knots, step })
    }

    /// Interpolation of the iterates with spacing `alpha`.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            knots: traj.iterates.clone(),
            step: traj.alpha(),
        }
    }

    pub fn knots(&self) -> ArrayView2<'_, f64> {
        self.knots.view()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.knots.ncols()
    }

    /// Right end of the domain `[0, (K - 1) step]`.
    pub fn horizon(&self) -> f64 {
        (self.knots.nrows() - 1) as f64 * self.step
    }

    /// Largest slope `|knot_{k+1} - knot_k| / step`.
    pub fn lipschitz(&self) -> f64 {
        self.knots
            .rows()
            .into_iter()
            .zip(self.knots.rows().into_iter().skip(1))
            .map(|(a, b)| {
                let d = &b - &a;
                d.dot(&d).sqrt() / self.step
            })
            .fold(0.0, f64::max)
    }

    /// Value at time `s`; exact at knots.
    pub fn eval(&self, s: f64) -> Result<Array1<f64>> {
        let horizon = self.horizon();
        if !(s >= 0.0) || s > horizon * (1.0 + KNOT_SNAP) + f64::MIN_POSITIVE {
            return Err(Error::OutOfRange { s, horizon });
        }
        let q = s / self.step;
        let last = self.knots.nrows() - 1;
        let nearest = q.round();
        if (q - nearest).abs() <= KNOT_SNAP * nearest.max(1.0) {
            return Ok(self.knots.row((nearest as usize).min(last)).to_owned());
        }
        let t = (q.floor() as usize).min(last.saturating_sub(1));
        let w = q - t as f64;
        let a = self.knots.row(t);
        let b = self.knots.row(t + 1);
        Ok(&a + &((&b - &a) * w))
    }

    /// CSV rows `s, v_0, v_1, ...` at every knot.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["s".to_string()];
        header.extend((0..self.dim()).map(|i| format!("v{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, row) in self.knots.rows().into_iter().enumerate() {
            let mut fields = vec![fmt_float(k as f64 * self.step)];
            fields.extend(row.iter().map(|v| fmt_float(*v)));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// `u_alpha(s)` for `0 <= s <= t_max alpha`.
pub fn interpolate(path: &InterpolatedPath, s: f64) -> Result<Array1<f64>> {
    path.eval(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DcDistance {
    /// Truncated, grid-sampled series value in `[0, 1]`.
    pub value: f64,
    /// Bound `2^{-k_max}` on the omitted tail of the series.
    pub truncation_bound: f64,
    /// Bound `L_path * ds` on the underestimate of each grid maximum, where
    /// `L_path` is the sum of both paths' slopes.
    pub grid_bound: f64,
}

/// `sum_{k=1}^{k_max} 2^{-k} min(1, max_{s in grid, s <= k} |a(s) - b(s)|)`
/// on a uniform grid with `grid_per_unit` intervals per unit time.
pub fn distance_d_c(
    a: &PiecewiseAffinePath,
    b: &PiecewiseAffinePath,
    k_max: usize,
    grid_per_unit: usize,
) -> Result<DcDistance> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be >= 1".into()));
    }
    if grid_per_unit < 2 {
        return Err(Error::InvalidArgument("grid_per_unit must be >= 2".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::mismatch("path dimension", a.dim(), b.dim()));
    }
    for path in [a, b] {
        if path.horizon() < k_max as f64 * (1.0 - KNOT_SNAP) {
            return Err(Error::OutOfRange {
                s: k_max as f64,
                horizon: path.horizon(),
            });
        }
    }
    let ds = 1.0 / grid_per_unit as f64;
    let mut running = 0.0f64;
    let mut value = 0.0;
    let mut weight = 1.0;
    let mut j = 0usize;
    for k in 1..=k_max {
        while j <= k * grid_per_unit {
            let s = (j as f64 * ds).min(a.horizon()).min(b.horizon());
            let d = &a.eval(s)? - &b.eval(s)?;
            running = running.max(d.dot(&d).sqrt());
            j += 1;
        }
        weight *= 0.5;
        value += weight * running.min(1.0);
    }
    Ok(DcDistance {
        value,
        truncation_bound: weight,
        grid_bound: (a.lipschitz() + b.lipschitz()) * ds,
    })
}

/// Explicit-Euler path `v <- v - h g(v)` on `[0, horizon]`, where `g` is the
/// population-gradient estimate of [`estimate_grad_f`] (fresh batches at every
/// step in Monte-Carlo mode). The step is `horizon / ceil(horizon / step_ref)`
/// so the path ends exactly at `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn reference_flow<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    u0: ArrayView1<'_, f64>,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    p: OrderP,
    horizon: f64,
    step_ref: f64,
    integration: Integration,
    rng: &mut R,
) -> Result<PiecewiseAffinePath> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument("flow horizon must be positive".into()));
    }
    if !(step_ref > 0.0) || step_ref > horizon {
        return Err(Error::InvalidArgument("step_ref must lie in (0, horizon]".into()));
    }
    if u0.len() != spec.param_dim() {
        return Err(Error::mismatch("flow start", spec.param_dim(), u0.len()));
    }
    let steps = (horizon / step_ref).ceil() as usize;
    let h = horizon / steps as f64;
    let mut knots = Array2::zeros((steps + 1, u0.len()));
    knots.row_mut(0).assign(&u0);
    let mut v = u0.to_owned();
    for k in 1..=steps {
        let g = estimate_grad_f(spec, v.view(), mx, my, n, integration, rng, p)?;
        v.scaled_add(-h, &g);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        knots.row_mut(k).assign(&v);
    }
    PiecewiseAffinePath::new(knots, h)
}

/// Rejects reference steps coarser than `alpha / 50`.
pub fn check_reference_step(step_ref: f64, alpha: f64) -> Result<()> {
    if step_ref > alpha / 50.0 {
        return Err(Error::InvalidArgument(format!(
            "reference step {step_ref} must not exceed alpha / 50 = {}",
            alpha / 50.0
        )));
    }
    Ok(())
}

/// Distance from `-g` to the normal cone of `B(0, r)` at `u`: `|g|` inside,
/// `min_{s >= 0} |g + s u|` on the boundary (within `1e-9 r`).
pub fn gap_from_gradient(g: ArrayView1<'_, f64>, u: ArrayView1<'_, f64>, r: f64) -> Result<f64> {
    if g.len() != u.len() {
        return Err(Error::mismatch("gradient", u.len(), g.len()));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let norm2 = u.dot(&u);
    let norm = norm2.sqrt();
    let tol = 1e-9 * r;
    if norm > r + tol {
        return Err(Error::OutOfBall { norm, radius: r });
    }
    if norm < r - tol {
        return Ok(g.dot(&g).sqrt());
    }
    let s = (g.dot(&u) / norm2).min(0.0);
    let d = &g - &(&u * s);
    Ok(d.dot(&d).sqrt())
}

/// Criticality gap of `u` for the problem constrained to `B(0, r)`, with the
/// population gradient estimated per `integration`.
#[allow(clippy::too_many_arguments)]
pub fn criticality_gap<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    r: f64,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    p: OrderP,
    integration: Integration,
    rng: &mut R,
) -> Result<f64> {
    let norm = u.dot(&u).sqrt();
    if norm > r * (1.0 + 1e-9) {
        return Err(Error::OutOfBall { norm, radius: r });
    }
    let g = estimate_grad_f(spec, u, mx, my, n, integration, rng, p)?;
    gap_from_gradient(g.view(), u, r)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// True when `values` never increases, except for at most one step up of at
/// most `allowance` relative size.
pub fn non_increasing_with_allowance(values: &[f64], allowance: f64) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            if inversions > 1 || w[1] > w[0] * (1.0 + allowance) {
                return false;
            }
        }
    }
    true
}
