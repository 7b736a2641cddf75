//! Sorting-based projected Wasserstein costs, the minibatch SW loss `f`, its
//! almost-everywhere gradient `phi` for any order `p >= 1`, population
//! estimates of `F` and `grad F`, and the Lipschitz / step-size constants.
//!
//! For `X, Y` in `R^{n x d}` and a unit direction `theta`,
//! `w_theta(X, Y) = (1/n) sum_k |theta.x_(k) - theta.y_(k)|^p` where `(k)`
//! denotes the k-th smallest projection. The optimal matching is
//! `sigma = sort_Y o sort_X^{-1}`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{dot, project, sample_batch, DiscreteMeasure, SampleBatch};
use crate::network::NetworkSpec;

/// Transport order `p` in `[1, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct OrderP(f64);

impl OrderP {
    pub const TWO: OrderP = OrderP(2.0);

    pub fn new(p: f64) -> Result<Self> {
        if p.is_finite() && p >= 1.0 {
            Ok(Self(p))
        } else {
            Err(Error::InvalidArgument(format!("order p must lie in [1, inf), got {p}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_two(self) -> bool {
        self.0 == 2.0
    }
}

impl Default for OrderP {
    fn default() -> Self {
        Self::TWO
    }
}

impl TryFrom<f64> for OrderP {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<OrderP> for f64 {
    fn from(p: OrderP) -> f64 {
        p.0
    }
}

/// `sign(d) |d|^e`, with the selection 0 at `d = 0`.
#[inline]
fn signed_pow(d: f64, e: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d.signum() * d.abs().powf(e)
    }
}

/// Stable ascending argsort: entry `k` is the index of the k-th smallest
/// value; ties keep their original order.
pub fn sorting_permutation(v: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &j) in perm.iter().enumerate() {
        inv[j] = k;
    }
    inv
}

/// Matching from projected sorting orders: `sigma(k) = tau_Y[tau_X^{-1}(k)]`.
fn matching(px: &[f64], py: &[f64]) -> Vec<usize> {
    let tx = argsort(px);
    let ty = argsort(py);
    let mut sigma = vec![0; px.len()];
    for (rank, &k) in tx.iter().enumerate() {
        sigma[k] = ty[rank];
    }
    sigma
}

fn check_pair(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, theta: ArrayView1<'_, f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::mismatch("point counts", x.nrows(), y.nrows()));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty point cloud".into()));
    }
    if x.ncols() != theta.len() || y.ncols() != theta.len() {
        return Err(Error::mismatch("direction dimension", theta.len(), x.ncols()));
    }
    Ok(())
}

/// Optimal 1-D assignment `sigma_theta^{X,Y}` for the projected clouds.
pub fn assignment_sigma(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<Vec<usize>> {
    check_pair(x, y, theta)?;
    let px = project(x, theta)?;
    let py = project(y, theta)?;
    Ok(matching(px.as_slice().unwrap(), py.as_slice().unwrap()))
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// `W_p^p` between the projections of `gamma_X` and `gamma_Y` on `theta`.
pub fn w_theta_p(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
    p: OrderP,
) -> Result<f64> {
    if p.is_two() {
        w_theta_2(x, y, theta)
    } else {
        w_theta_p_general(x, y, theta, p)
    }
}

/// [`w_theta_p`] evaluated with `powf` for every order.
pub fn w_theta_p_general(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
    p: OrderP,
) -> Result<f64> {
    check_pair(x, y, theta)?;
    let px = sorted(project(x, theta)?.to_vec());
    let py = sorted(project(y, theta)?.to_vec());
    let n = px.len() as f64;
    Ok(px.iter().zip(&py).map(|(a, b)| (a - b).abs().powf(p.value())).sum::<f64>() / n)
}

/// Quadratic specialisation of [`w_theta_p`].
pub fn w_theta_2(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, theta: ArrayView1<'_, f64>) -> Result<f64> {
    check_pair(x, y, theta)?;
    let px = sorted(project(x, theta)?.to_vec());
    let py = sorted(project(y, theta)?.to_vec());
    let n = px.len() as f64;
    Ok(px.iter().zip(&py).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// A.e. gradient of `w_theta(., Y)` at `X` (`n x d` matrix).
pub fn grad_w_theta(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
    p: OrderP,
) -> Result<Array2<f64>> {
    if p.is_two() {
        grad_w_theta_2(x, y, theta)
    } else {
        grad_w_theta_general(x, y, theta, p)
    }
}

/// Row `k`: `(p/n) sign(d_k) |d_k|^{p-1} theta` with
/// `d_k = theta.x_k - theta.y_sigma(k)`.
pub fn grad_w_theta_general(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
    p: OrderP,
) -> Result<Array2<f64>> {
    check_pair(x, y, theta)?;
    let px = project(x, theta)?;
    let py = project(y, theta)?;
    let sigma = matching(px.as_slice().unwrap(), py.as_slice().unwrap());
    let n = x.nrows() as f64;
    let mut grad = Array2::zeros(x.raw_dim());
    for (k, mut row) in grad.rows_mut().into_iter().enumerate() {
        let c = p.value() / n * signed_pow(px[k] - py[sigma[k]], p.value() - 1.0);
        row.assign(&(&theta * c));
    }
    Ok(grad)
}

/// Row `k`: `(2/n) theta theta^T (x_k - y_sigma(k))`.
pub fn grad_w_theta_2(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    check_pair(x, y, theta)?;
    let sigma = assignment_sigma(x, y, theta)?;
    let n = x.nrows() as f64;
    let mut grad = Array2::zeros(x.raw_dim());
    for (k, mut row) in grad.rows_mut().into_iter().enumerate() {
        let residual = &x.row(k) - &y.row(sigma[k]);
        row.assign(&(&theta * (2.0 / n * dot(theta, residual.view()))));
    }
    Ok(grad)
}

fn check_batch(spec: &NetworkSpec, u: ArrayView1<'_, f64>, batch: &SampleBatch) -> Result<()> {
    if u.len() != spec.param_dim() {
        return Err(Error::mismatch("parameter vector", spec.param_dim(), u.len()));
    }
    if batch.x.ncols() != spec.input_dim() {
        return Err(Error::mismatch("batch inputs", spec.input_dim(), batch.x.ncols()));
    }
    if batch.y.ncols() != spec.output_dim() {
        return Err(Error::mismatch("batch targets", spec.output_dim(), batch.y.ncols()));
    }
    if batch.thetas.ncols() != spec.output_dim() {
        return Err(Error::mismatch("batch directions", spec.output_dim(), batch.thetas.ncols()));
    }
    if batch.x.nrows() != batch.y.nrows() || batch.x.nrows() == 0 || batch.thetas.nrows() == 0 {
        return Err(Error::InvalidArgument("malformed batch".into()));
    }
    Ok(())
}

/// Minibatch SW sample loss: mean over the batch directions of
/// `w_theta(T(u, X), Y)`.
pub fn sample_loss_f(spec: &NetworkSpec, u: ArrayView1<'_, f64>, batch: &SampleBatch, p: OrderP) -> Result<f64> {
    check_batch(spec, u, batch)?;
    let outputs = spec.forward_batch(u, batch.x.view())?;
    let total: f64 = batch
        .thetas
        .rows()
        .into_iter()
        .map(|theta| w_theta_p(outputs.view(), batch.y.view(), theta, p))
        .sum::<Result<f64>>()?;
    Ok(total / batch.num_directions() as f64)
}

/// Cotangents `v_k` such that `phi = sum_k (dT/du (u, x_k))^T v_k`.
fn cotangents(outputs: ArrayView2<'_, f64>, batch: &SampleBatch, p: OrderP, quadratic: bool) -> Array2<f64> {
    let n = outputs.nrows();
    let scale = 1.0 / (n as f64 * batch.num_directions() as f64);
    let mut cot = Array2::zeros(outputs.raw_dim());
    for theta in batch.thetas.rows() {
        let pt: Vec<f64> = outputs.rows().into_iter().map(|r| dot(r, theta)).collect();
        let py: Vec<f64> = batch.y.rows().into_iter().map(|r| dot(r, theta)).collect();
        let sigma = matching(&pt, &py);
        for k in 0..n {
            let c = if quadratic {
                let residual = &outputs.row(k) - &batch.y.row(sigma[k]);
                2.0 * dot(theta, residual.view())
            } else {
                p.value() * signed_pow(pt[k] - py[sigma[k]], p.value() - 1.0)
            };
            cot.row_mut(k).scaled_add(c * scale, &theta);
        }
    }
    cot
}

fn phi_from_cotangents(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    batch: &SampleBatch,
    cot: &Array2<f64>,
) -> Array1<f64> {
    let uvec = u.to_vec();
    let mut grad = vec![0.0; spec.param_dim()];
    for (x, v) in batch.x.rows().into_iter().zip(cot.rows()) {
        if v.iter().all(|c| *c == 0.0) {
            continue;
        }
        let (du, _) = spec.vjp_slice(&uvec, &x.to_vec(), &v.to_vec());
        for (g, d) in grad.iter_mut().zip(du) {
            *g += d;
        }
    }
    Array1::from(grad)
}

/// A.e. gradient `phi(u, X, Y, theta)` of [`sample_loss_f`], averaged over the
/// batch directions.
pub fn grad_phi(spec: &NetworkSpec, u: ArrayView1<'_, f64>, batch: &SampleBatch, p: OrderP) -> Result<Array1<f64>> {
    if p.is_two() {
        grad_phi_2(spec, u, batch)
    } else {
        grad_phi_general(spec, u, batch, p)
    }
}

/// [`grad_phi`] through the general `sign(d) |d|^{p-1}` weights.
pub fn grad_phi_general(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    batch: &SampleBatch,
    p: OrderP,
) -> Result<Array1<f64>> {
    check_batch(spec, u, batch)?;
    let outputs = spec.forward_batch(u, batch.x.view())?;
    let cot = cotangents(outputs.view(), batch, p, false);
    Ok(phi_from_cotangents(spec, u, batch, &cot))
}

/// [`grad_phi`] in the quadratic form `(2/n) J^T theta theta^T (T(u, x_k) - y_sigma(k))`.
pub fn grad_phi_2(spec: &NetworkSpec, u: ArrayView1<'_, f64>, batch: &SampleBatch) -> Result<Array1<f64>> {
    check_batch(spec, u, batch)?;
    let outputs = spec.forward_batch(u, batch.x.view())?;
    let cot = cotangents(outputs.view(), batch, OrderP::TWO, true);
    Ok(phi_from_cotangents(spec, u, batch, &cot))
}

/// Sample loss and `phi` sharing one forward pass.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    batch: &SampleBatch,
    p: OrderP,
) -> Result<(f64, Array1<f64>)> {
    check_batch(spec, u, batch)?;
    let outputs = spec.forward_batch(u, batch.x.view())?;
    let mut loss = 0.0;
    for theta in batch.thetas.rows() {
        loss += w_theta_p(outputs.view(), batch.y.view(), theta, p)?;
    }
    loss /= batch.num_directions() as f64;
    let cot = cotangents(outputs.view(), batch, p, p.is_two());
    Ok((loss, phi_from_cotangents(spec, u, batch, &cot)))
}

/// Smallest gap between consecutive sorted projections of `T(u, X)` over the
/// batch directions (ignoring rows with identical inputs), and (for `p < 2`)
/// the smallest matched residual. Large
/// values certify the sorting permutation is locally constant.
pub fn tie_margin(spec: &NetworkSpec, u: ArrayView1<'_, f64>, batch: &SampleBatch, p: OrderP) -> Result<f64> {
    check_batch(spec, u, batch)?;
    let outputs = spec.forward_batch(u, batch.x.view())?;
    let mut margin = f64::INFINITY;
    for theta in batch.thetas.rows() {
        let pt: Vec<f64> = outputs.rows().into_iter().map(|r| dot(r, theta)).collect();
        let py: Vec<f64> = batch.y.rows().into_iter().map(|r| dot(r, theta)).collect();
        let order = argsort(&pt);
        for w in order.windows(2) {
            // rows with identical inputs move together and never swap
            if batch.x.row(w[0]) != batch.x.row(w[1]) {
                margin = margin.min(pt[w[1]] - pt[w[0]]);
            }
        }
        if p.value() < 2.0 {
            let sigma = matching(&pt, &py);
            for k in 0..pt.len() {
                margin = margin.min((pt[k] - py[sigma[k]]).abs());
            }
        }
    }
    Ok(margin)
}

/// `max_k |x_k|_2`.
pub fn norm_inf2(x: ArrayView2<'_, f64>) -> f64 {
    x.axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

/// How expectations over `(X, Y, theta)` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integration {
    /// Average over `batches` independent draws with `directions` each.
    MonteCarlo { batches: usize, directions: usize },
    /// Exact enumeration of all `n`-tuples of atoms, with directions on a
    /// fixed grid: `{+1, -1}` for `d_y = 1`, 256 equispaced angles for
    /// `d_y = 2`, a 1024-point Fibonacci sphere for `d_y = 3`.
    Exhaustive,
}

/// Enumeration is refused above this many `(X, Y)` tuples.
pub const EXHAUSTIVE_LIMIT: usize = 1 << 22;

/// Quadrature directions for the exhaustive mode.
pub fn direction_grid(dim: usize) -> Result<Array2<f64>> {
    match dim {
        1 => Ok(ndarray::array![[1.0], [-1.0]]),
        2 => {
            let m = 256;
            Ok(Array2::from_shape_fn((m, 2), |(k, j)| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                if j == 0 {
                    a.cos()
                } else {
                    a.sin()
                }
            }))
        }
        3 => {
            let m = 1024;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let mut grid = Array2::zeros((m, 3));
            for k in 0..m {
                let z = 1.0 - (2.0 * k as f64 + 1.0) / m as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * k as f64;
                grid[[k, 0]] = r * a.cos();
                grid[[k, 1]] = r * a.sin();
                grid[[k, 2]] = z;
            }
            Ok(grid)
        }
        _ => Err(Error::InvalidArgument(format!(
            "exhaustive integration supports d_y <= 3, got {dim}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

fn check_measures(spec: &NetworkSpec, mx: &DiscreteMeasure, my: &DiscreteMeasure, n: usize) -> Result<()> {
    if mx.dim() != spec.input_dim() {
        return Err(Error::mismatch("input measure", spec.input_dim(), mx.dim()));
    }
    if my.dim() != spec.output_dim() {
        return Err(Error::mismatch("data measure", spec.output_dim(), my.dim()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    Ok(())
}

fn check_mc(batches: usize, directions: usize) -> Result<()> {
    if batches == 0 || directions == 0 {
        return Err(Error::InvalidArgument(
            "Monte-Carlo integration needs batches >= 1 and directions >= 1".into(),
        ));
    }
    Ok(())
}

/// Visits every `(X, Y)` atom-index tuple with its probability weight.
fn for_each_tuple<F>(mx: &DiscreteMeasure, my: &DiscreteMeasure, n: usize, mut visit: F) -> Result<()>
where
    F: FnMut(&[usize], &[usize], f64),
{
    let total = (mx.len() as f64).powi(n as i32) * (my.len() as f64).powi(n as i32);
    if total > EXHAUSTIVE_LIMIT as f64 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive integration over {total} tuples exceeds the limit {EXHAUSTIVE_LIMIT}"
        )));
    }
    let a = mx.weights();
    let b = my.weights();
    let mut ix = vec![0usize; n];
    let mut iy = vec![0usize; n];
    loop {
        let w: f64 = ix.iter().map(|&i| a[i]).product::<f64>() * iy.iter().map(|&j| b[j]).product::<f64>();
        if w > 0.0 {
            visit(&ix, &iy, w);
        }
        // odometer over (ix, iy)
        let mut pos = 0;
        loop {
            if pos == 2 * n {
                return Ok(());
            }
            let (slot, base) = if pos < n {
                (&mut ix[pos], mx.len())
            } else {
                (&mut iy[pos - n], my.len())
            };
            *slot += 1;
            if *slot < base {
                break;
            }
            *slot = 0;
            pos += 1;
        }
    }
}

/// Exact `F(u)` and `grad F(u)` over atom tuples, from cached per-atom outputs
/// and Jacobians.
fn exhaustive_moments(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    p: OrderP,
    want_grad: bool,
) -> Result<(f64, Option<Array1<f64>>)> {
    let grid = direction_grid(spec.output_dim())?;
    let outputs = spec.forward_batch(u, mx.points())?;
    let jacobians: Vec<Array2<f64>> = if want_grad {
        mx.points()
            .rows()
            .into_iter()
            .map(|x| spec.jacobian_u(u, x))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    // projections[g][atom]
    let proj_t: Vec<Vec<f64>> = grid
        .rows()
        .into_iter()
        .map(|t| outputs.rows().into_iter().map(|r| dot(r, t)).collect())
        .collect();
    let proj_y: Vec<Vec<f64>> = grid
        .rows()
        .into_iter()
        .map(|t| my.points().rows().into_iter().map(|r| dot(r, t)).collect())
        .collect();
    let g_count = grid.nrows() as f64;
    let nf = n as f64;
    let pv = p.value();
    let mut loss = 0.0;
    let mut cot = Array2::<f64>::zeros((mx.len(), spec.output_dim()));
    let mut pt = vec![0.0; n];
    let mut py = vec![0.0; n];
    for_each_tuple(mx, my, n, |ix, iy, w| {
        for (g, theta) in grid.rows().into_iter().enumerate() {
            for k in 0..n {
                pt[k] = proj_t[g][ix[k]];
                py[k] = proj_y[g][iy[k]];
            }
            let sigma = matching(&pt, &py);
            let mut cost = 0.0;
            for k in 0..n {
                let d = pt[k] - py[sigma[k]];
                cost += if p.is_two() { d * d } else { d.abs().powf(pv) };
                if want_grad {
                    let c = pv * signed_pow(d, pv - 1.0) * w / (nf * g_count);
                    cot.row_mut(ix[k]).scaled_add(c, &theta);
                }
            }
            loss += w * cost / (nf * g_count);
        }
    })?;
    let grad = want_grad.then(|| {
        let mut grad = Array1::zeros(spec.param_dim());
        for (j, v) in jacobians.iter().zip(cot.rows()) {
            grad += &j.t().dot(&v);
        }
        grad
    });
    Ok((loss, grad))
}

/// Estimate of the population loss `F(u) = E f(u, X, Y, theta)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_f<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    integration: Integration,
    rng: &mut R,
    p: OrderP,
) -> Result<LossEstimate> {
    check_measures(spec, mx, my, n)?;
    match integration {
        Integration::Exhaustive => {
            let (mean, _) = exhaustive_moments(spec, u, mx, my, n, p, false)?;
            Ok(LossEstimate {
                mean,
                std_error: 0.0,
                samples: 1,
            })
        }
        Integration::MonteCarlo { batches, directions } => {
            check_mc(batches, directions)?;
            let mut values = Vec::with_capacity(batches);
            for _ in 0..batches {
                let batch = sample_batch(mx, my, n, directions, rng)?;
                values.push(sample_loss_f(spec, u, &batch, p)?);
            }
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let std_error = if values.len() > 1 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
                (var / m).sqrt()
            } else {
                0.0
            };
            Ok(LossEstimate {
                mean,
                std_error,
                samples: values.len(),
            })
        }
    }
}

/// Estimate of `grad F(u)` as the expectation of `phi`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_grad_f<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    integration: Integration,
    rng: &mut R,
    p: OrderP,
) -> Result<Array1<f64>> {
    check_measures(spec, mx, my, n)?;
    match integration {
        Integration::Exhaustive => {
            let (_, grad) = exhaustive_moments(spec, u, mx, my, n, p, true)?;
            Ok(grad.expect("gradient requested"))
        }
        Integration::MonteCarlo { batches, directions } => {
            check_mc(batches, directions)?;
            let mut acc = Array1::zeros(spec.param_dim());
            for _ in 0..batches {
                let batch = sample_batch(mx, my, n, directions, rng)?;
                acc += &grad_phi(spec, u, &batch, p)?;
            }
            Ok(acc / batches as f64)
        }
    }
}

/// `K_w^(p)(r, X, Y) = p n (r + |X|_{inf,2} + |Y|_{inf,2})^{p-1}`.
pub fn lipschitz_k_w(r: f64, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: OrderP) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument("radius r must be positive".into()));
    }
    let n = x.nrows() as f64;
    Ok(p.value() * n * (r + norm_inf2(x) + norm_inf2(y)).powf(p.value() - 1.0))
}

/// `K_f^(p)(eps, u0, X, Y) = p n L (eps L + |T(u0, X)|_{inf,2} + |Y|_{inf,2})^{p-1}`
/// where `lip_t` is a global Lipschitz constant `L` of the network.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_k_f(
    eps: f64,
    spec: &NetworkSpec,
    u0: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    lip_t: f64,
    p: OrderP,
) -> Result<f64> {
    if !(eps > 0.0 && lip_t > 0.0) {
        return Err(Error::InvalidArgument("eps and L must be positive".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::mismatch("point counts", x.nrows(), y.nrows()));
    }
    let outputs = spec.forward_batch(u0, x)?;
    let n = x.nrows() as f64;
    Ok(p.value() * n * lip_t * (eps * lip_t + norm_inf2(outputs.view()) + norm_inf2(y)).powf(p.value() - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationLipschitz {
    /// `K_F^(p)(eps, u0)`.
    pub value: f64,
    /// Estimate of `C_1(u0) = E |T(u0, X)|_{inf,2}`.
    pub c1: f64,
    /// Estimate of `C_2 = E |Y|_{inf,2}`.
    pub c2: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of
/// `K_F^(p)(eps, u0) = p n L E[(eps L + |T(u0, X)|_{inf,2} + |Y|_{inf,2})^{p-1}]`,
/// which is `2 n L (eps L + C_1 + C_2)` at `p = 2`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_k_f_population<R: Rng + ?Sized>(
    eps: f64,
    u0: ArrayView1<'_, f64>,
    spec: &NetworkSpec,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    num_mc: usize,
    lip_t: f64,
    rng: &mut R,
    p: OrderP,
) -> Result<PopulationLipschitz> {
    check_measures(spec, mx, my, n)?;
    check_mc(num_mc, 1)?;
    if !(eps > 0.0 && lip_t > 0.0) {
        return Err(Error::InvalidArgument("eps and L must be positive".into()));
    }
    let (mut c1, mut c2, mut acc) = (0.0, 0.0, 0.0);
    for _ in 0..num_mc {
        let batch = sample_batch(mx, my, n, 1, rng)?;
        let outputs = spec.forward_batch(u0, batch.x.view())?;
        let a = norm_inf2(outputs.view());
        let b = norm_inf2(batch.y.view());
        c1 += a;
        c2 += b;
        acc += (eps * lip_t + a + b).powf(p.value() - 1.0);
    }
    let m = num_mc as f64;
    Ok(PopulationLipschitz {
        value: p.value() * n as f64 * lip_t * acc / m,
        c1: c1 / m,
        c2: c2 / m,
        samples: num_mc,
    })
}

/// Step-size threshold `alpha_0 = ((d_y^2 + 2 R_y) d_u M)^{-1}` below which
/// the SGD kernel preserves absolute continuity.
pub fn alpha_zero(d_y: usize, r_y: f64, d_u: usize, m: f64) -> Result<f64> {
    if d_y == 0 || d_u == 0 || !(r_y > 0.0) || !(m > 0.0) || !r_y.is_finite() || !m.is_finite() {
        return Err(Error::InvalidArgument("alpha_zero inputs must be positive".into()));
    }
    Ok(1.0 / ((d_y as f64 * d_y as f64 + 2.0 * r_y) * d_u as f64 * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample_unit_sphere, seeded_rng};
    use crate::network::Activation;
    use crate::oracle::{fd_gradient, relative_error, wasserstein_1d_bruteforce};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn p(v: f64) -> OrderP {
        OrderP::new(v).unwrap()
    }

    fn identity_1d() -> NetworkSpec {
        // T(u, x) = u_0 x + u_1 on the plateau
        NetworkSpec::feedforward(&[1, 1], Activation::Identity, 50.0, 50.0, 1.0).unwrap()
    }

    #[test]
    fn order_validation() {
        assert!(OrderP::new(0.5).is_err());
        assert!(OrderP::new(f64::INFINITY).is_err());
        assert_eq!(OrderP::default(), OrderP::TWO);
    }

    #[test]
    fn sorting_permutation_examples() {
        assert_eq!(sorting_permutation(array![3.0, 1.0, 2.0].view()), vec![1, 2, 0]);
        assert_eq!(sorting_permutation(array![1.0, 2.0, 5.0].view()), vec![0, 1, 2]);
        assert_eq!(sorting_permutation(array![1.0, 1.0, 0.0].view()), vec![2, 0, 1]);
    }

    #[test]
    fn assignment_examples() {
        let t = array![1.0];
        let x = array![[2.0], [1.0]];
        let y = array![[1.0], [2.0]];
        assert_eq!(assignment_sigma(x.view(), y.view(), t.view()).unwrap(), vec![1, 0]);
        assert_eq!(assignment_sigma(x.view(), x.view(), t.view()).unwrap(), vec![0, 1]);
        let ties = array![[1.0], [1.0], [1.0]];
        assert_eq!(assignment_sigma(ties.view(), ties.view(), t.view()).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            assignment_sigma(array![[4.0]].view(), array![[-2.0]].view(), t.view()).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn w_theta_examples() {
        let t = array![1.0];
        let x = array![[0.0], [2.0]];
        let y = array![[1.0], [3.0]];
        assert_eq!(w_theta_p(x.view(), y.view(), t.view(), p(2.0)).unwrap(), 1.0);
        assert_eq!(w_theta_p(x.view(), y.view(), t.view(), p(1.0)).unwrap(), 1.0);
        assert_eq!(w_theta_p(x.view(), x.view(), t.view(), p(3.0)).unwrap(), 0.0);
        assert!(w_theta_p(x.view(), array![[1.0]].view(), t.view(), p(2.0)).is_err());
    }

    #[test]
    fn grad_w_examples() {
        let t = array![1.0];
        let g = grad_w_theta(array![[5.0]].view(), array![[3.0]].view(), t.view(), p(2.0)).unwrap();
        assert_eq!(g, array![[4.0]]);
        let x = array![[0.3, 1.0], [2.0, -1.0]];
        let s = 0.5f64.sqrt();
        let g = grad_w_theta(x.view(), x.view(), array![s, s].view(), p(1.5)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_w_matches_finite_differences() {
        let mut rng = seeded_rng(21);
        let mut checked = 0;
        while checked < 50 {
            let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
            let y = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
            let theta = sample_unit_sphere(3, &mut rng).unwrap();
            let px = sorted(project(x.view(), theta.view()).unwrap().to_vec());
            if px.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                continue;
            }
            checked += 1;
            let g = grad_w_theta(x.view(), y.view(), theta.view(), p(2.0)).unwrap();
            let flat = Array1::from(x.iter().copied().collect::<Vec<_>>());
            let fd = fd_gradient(
                |v| {
                    let xm = Array2::from_shape_vec((5, 3), v.to_vec()).unwrap();
                    w_theta_p(xm.view(), y.view(), theta.view(), p(2.0)).unwrap()
                },
                flat.view(),
                1e-5,
            );
            let analytic = Array1::from(g.iter().copied().collect::<Vec<_>>());
            assert!(relative_error(analytic.view(), fd.view()) < 1e-6);
        }
    }

    #[test]
    fn sample_loss_examples() {
        let net = identity_1d();
        // T(u, x) = 2x - 1 maps X = (0, 1) to (-1, 1) = Y
        let u = array![2.0, -1.0];
        let batch = SampleBatch::new(array![[0.0], [1.0]], array![[1.0], [-1.0]], array![[1.0]]).unwrap();
        assert_eq!(sample_loss_f(&net, u.view(), &batch, p(2.0)).unwrap(), 0.0);
        assert!(grad_phi(&net, u.view(), &batch, p(2.0)).unwrap().iter().all(|v| *v == 0.0));

        // u = (1, 0.5): T(X) = (0.5, 1.5), Y = (0, 3) -> ((0.5)^2 + (1.5)^2) / 2 = 1.25
        let u = array![1.0, 0.5];
        let batch = SampleBatch::new(array![[0.0], [1.0]], array![[3.0], [0.0]], array![[1.0]]).unwrap();
        let f = sample_loss_f(&net, u.view(), &batch, p(2.0)).unwrap();
        assert!((f - 1.25).abs() < 1e-15);
        let direct = w_theta_p(
            net.forward_batch(u.view(), batch.x.view()).unwrap().view(),
            batch.y.view(),
            array![1.0].view(),
            p(2.0),
        )
        .unwrap();
        assert_eq!(f, direct);
    }

    // T(u, x) = u with d_u = 1 realised by a bias-only layer.
    #[test]
    fn scalar_gradient_hand_example() {
        let doc = crate::network::NetworkDoc {
            layer_dims: vec![1, 1],
            activation: Activation::Identity,
            output_activation: None,
            radius_u: 50.0,
            radius_x: 50.0,
            eps: 1.0,
            seed: 0,
            bias: true,
            residual: vec![],
            tensors: vec![crate::network::TensorLink {
                layer: 1,
                source: 0,
                entries: vec![],
            }],
            bias_matrices: vec![],
            param_dim: None,
        };
        let net = NetworkSpec::from_doc(doc).unwrap();
        assert_eq!(net.param_dim(), 1);
        let batch = SampleBatch::new(array![[0.7]], array![[3.0]], array![[1.0]]).unwrap();
        let g = grad_phi(&net, array![5.0].view(), &batch, p(2.0)).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-14);
        let fd = fd_gradient(
            |v| sample_loss_f(&net, v.view(), &batch, p(2.0)).unwrap(),
            array![5.0].view(),
            1e-5,
        );
        assert!((fd[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn grad_phi_matches_finite_differences_smooth() {
        let net = NetworkSpec::feedforward(&[2, 5, 2], Activation::Tanh, 4.0, 4.0, 0.5).unwrap();
        let mut rng = seeded_rng(123);
        let mut checked = 0;
        while checked < 40 {
            let u = net.sample_params(3.0, &mut rng).unwrap();
            let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-2.0..2.0));
            let y = Array2::from_shape_fn((4, 2), |_| rng.random_range(-2.0..2.0));
            let thetas = Array2::from_shape_fn((2, 2), |_| 0.0);
            let mut batch = SampleBatch::new(x, y, thetas).unwrap();
            for mut row in batch.thetas.rows_mut() {
                row.assign(&sample_unit_sphere(2, &mut rng).unwrap());
            }
            for order in [1.5, 2.0, 3.0] {
                if tie_margin(&net, u.view(), &batch, p(order)).unwrap() < 1e-3 {
                    continue;
                }
                let g = grad_phi(&net, u.view(), &batch, p(order)).unwrap();
                let fd = fd_gradient(
                    |v| sample_loss_f(&net, v.view(), &batch, p(order)).unwrap(),
                    u.view(),
                    1e-5,
                );
                assert!(relative_error(g.view(), fd.view()) < 1e-5);
            }
            checked += 1;
        }
    }

    #[test]
    fn loss_and_grad_agrees_with_separate_calls() {
        let net = NetworkSpec::feedforward(&[1, 3, 1], Activation::Softplus, 4.0, 4.0, 0.5).unwrap();
        let mut rng = seeded_rng(4);
        let mx = DiscreteMeasure::uniform(array![[-1.0], [0.0], [1.0]]).unwrap();
        let my = DiscreteMeasure::uniform(array![[2.0], [0.5]]).unwrap();
        let u = net.init_params();
        for order in [1.0, 2.0, 2.5] {
            let batch = sample_batch(&mx, &my, 5, 3, &mut rng).unwrap();
            let (f, g) = loss_and_grad(&net, u.view(), &batch, p(order)).unwrap();
            assert_eq!(f, sample_loss_f(&net, u.view(), &batch, p(order)).unwrap());
            assert_eq!(g, grad_phi(&net, u.view(), &batch, p(order)).unwrap());
        }
    }

    #[test]
    fn exhaustive_matches_enumerated_grad_phi() {
        let net = NetworkSpec::feedforward(&[1, 2, 2], Activation::Sigmoid, 4.0, 4.0, 0.5).unwrap();
        let mx = DiscreteMeasure::new(array![[-1.0], [0.5]], array![0.3, 0.7]).unwrap();
        let my = DiscreteMeasure::uniform(array![[0.0, 1.0], [1.0, -1.0]]).unwrap();
        let u = net.init_params();
        let n = 2;
        let grid = direction_grid(2).unwrap();
        let mut loss = 0.0;
        let mut grad = Array1::zeros(net.param_dim());
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        let w = mx.weights()[a] * mx.weights()[b] * my.weights()[c] * my.weights()[d];
                        let x = ndarray::stack![Axis(0), mx.point(a), mx.point(b)];
                        let y = ndarray::stack![Axis(0), my.point(c), my.point(d)];
                        let batch = SampleBatch::new(x, y, grid.clone()).unwrap();
                        loss += w * sample_loss_f(&net, u.view(), &batch, p(2.0)).unwrap();
                        grad.scaled_add(w, &grad_phi(&net, u.view(), &batch, p(2.0)).unwrap());
                    }
                }
            }
        }
        let mut rng = seeded_rng(0);
        let est = estimate_f(&net, u.view(), &mx, &my, n, Integration::Exhaustive, &mut rng, p(2.0)).unwrap();
        let g = estimate_grad_f(&net, u.view(), &mx, &my, n, Integration::Exhaustive, &mut rng, p(2.0)).unwrap();
        assert!((est.mean - loss).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
        assert!(relative_error(g.view(), grad.view()) < 1e-12);
    }

    #[test]
    fn estimate_f_degenerate_and_deterministic() {
        let net = identity_1d();
        let mx = DiscreteMeasure::dirac(&[1.0]).unwrap();
        let my = DiscreteMeasure::dirac(&[2.0]).unwrap();
        let u = array![1.5, 0.5];
        let mc = Integration::MonteCarlo { batches: 20, directions: 1 };
        let est = estimate_f(&net, u.view(), &mx, &my, 3, mc, &mut seeded_rng(1), p(2.0)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);

        let mx = DiscreteMeasure::uniform(array![[0.0], [1.0], [2.0]]).unwrap();
        let a = estimate_f(&net, u.view(), &mx, &my, 3, mc, &mut seeded_rng(7), p(2.0)).unwrap();
        let b = estimate_f(&net, u.view(), &mx, &my, 3, mc, &mut seeded_rng(7), p(2.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhaustive_agrees_with_monte_carlo() {
        let net = NetworkSpec::feedforward(&[1, 2], Activation::Identity, 20.0, 20.0, 1.0).unwrap();
        let mx = DiscreteMeasure::uniform(array![[-1.0], [0.0], [1.5]]).unwrap();
        let my = DiscreteMeasure::uniform(array![[0.0, 1.0], [2.0, 0.0], [-1.0, -1.0]]).unwrap();
        let u = array![0.8, -0.3, 0.1, 0.4];
        let exact = estimate_f(&net, u.view(), &mx, &my, 2, Integration::Exhaustive, &mut seeded_rng(0), p(2.0))
            .unwrap();
        let mc = estimate_f(
            &net,
            u.view(),
            &mx,
            &my,
            2,
            Integration::MonteCarlo { batches: 100_000, directions: 1 },
            &mut seeded_rng(99),
            p(2.0),
        )
        .unwrap();
        assert!((exact.mean - mc.mean).abs() < 3.0 * mc.std_error, "{exact:?} vs {mc:?}");
    }

    #[test]
    fn exhaustive_refuses_large_enumerations() {
        let net = identity_1d();
        let atoms = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let m = DiscreteMeasure::uniform(atoms).unwrap();
        let r = estimate_f(&net, array![1.0, 0.0].view(), &m, &m, 8, Integration::Exhaustive, &mut seeded_rng(0), p(2.0));
        assert!(r.is_err());
    }

    #[test]
    fn lipschitz_constant_examples() {
        let z = array![[0.0]];
        assert_eq!(lipschitz_k_w(1.0, z.view(), z.view(), p(2.0)).unwrap(), 2.0);
        let x = array![[1.0, 2.0], [0.0, -3.0]];
        let y = array![[4.0, 0.0], [0.5, 0.5]];
        for r in [0.1, 1.0, 9.0] {
            assert_eq!(lipschitz_k_w(r, x.view(), y.view(), p(1.0)).unwrap(), 2.0);
        }
        let base = lipschitz_k_w(0.5, x.view(), y.view(), p(2.0)).unwrap();
        let scaled = lipschitz_k_w(1.5, (&x * 3.0).view(), (&y * 3.0).view(), p(2.0)).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);

        // zero network output (u outside the shell) and Y = 0
        let net = identity_1d();
        let far = array![100.0, 0.0];
        let xs = array![[1.0], [2.0]];
        let ys = array![[0.0], [0.0]];
        let k = lipschitz_k_f(0.3, &net, far.view(), xs.view(), ys.view(), 2.0, p(2.0)).unwrap();
        assert!((k - 2.0 * 2.0 * 4.0 * 0.3).abs() < 1e-12);
        // p = 2 structure 2 n L (eps L + |T(u0, X)| + |Y|)
        let u0 = array![1.0, 1.0];
        let ys = array![[3.0], [-1.0]];
        let k = lipschitz_k_f(0.5, &net, u0.view(), xs.view(), ys.view(), 2.5, p(2.0)).unwrap();
        assert!((k - 2.0 * 2.0 * 2.5 * (0.5 * 2.5 + 3.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn population_constant_reduces_at_single_atoms() {
        let net = identity_1d();
        let mx = DiscreteMeasure::dirac(&[1.5]).unwrap();
        let my = DiscreteMeasure::dirac(&[-2.0]).unwrap();
        let u0 = array![0.5, 0.25];
        let est = estimate_k_f_population(0.4, u0.view(), &net, &mx, &my, 3, 10, 1.7, &mut seeded_rng(2), p(2.0))
            .unwrap();
        let xs = array![[1.5], [1.5], [1.5]];
        let ys = array![[-2.0], [-2.0], [-2.0]];
        let direct = lipschitz_k_f(0.4, &net, u0.view(), xs.view(), ys.view(), 1.7, p(2.0)).unwrap();
        assert!((est.value - direct).abs() < 1e-12);
        let again = estimate_k_f_population(0.4, u0.view(), &net, &mx, &my, 3, 10, 1.7, &mut seeded_rng(2), p(2.0))
            .unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn alpha_zero_examples() {
        assert!((alpha_zero(2, 1.0, 3, 1.0).unwrap() - 1.0 / 18.0).abs() < 1e-16);
        assert!((alpha_zero(1, 0.5, 1, 1.0).unwrap() - 0.5).abs() < 1e-16);
        let a = alpha_zero(3, 2.0, 7, 0.8).unwrap();
        let b = alpha_zero(3, 2.0, 7, 1.6).unwrap();
        assert!((a / b - 2.0).abs() < 1e-15);
        assert!(alpha_zero(0, 1.0, 1, 1.0).is_err());
        assert!(alpha_zero(1, 1.0, 1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sorting_is_optimal(seed in any::<u64>(), n in 1usize..=6, pi in 0usize..4) {
            let order = [1.0, 1.5, 2.0, 3.0][pi];
            let mut rng = seeded_rng(seed);
            let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0));
            let y = Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0));
            let theta = sample_unit_sphere(2, &mut rng).unwrap();
            let fast = w_theta_p(x.view(), y.view(), theta.view(), p(order)).unwrap();
            let brute = wasserstein_1d_bruteforce(x.view(), y.view(), theta.view(), order).unwrap();
            prop_assert!((fast - brute).abs() < 1e-12);
        }

        #[test]
        fn symmetric_and_translation_invariant(seed in any::<u64>(), pi in 0usize..4) {
            let order = p([1.0, 1.5, 2.0, 3.0][pi]);
            let mut rng = seeded_rng(seed);
            let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-3.0..3.0));
            let y = Array2::from_shape_fn((6, 3), |_| rng.random_range(-3.0..3.0));
            let shift = Array1::from_shape_fn(3, |_| rng.random_range(-5.0..5.0));
            let theta = sample_unit_sphere(3, &mut rng).unwrap();
            let a = w_theta_p(x.view(), y.view(), theta.view(), order).unwrap();
            let b = w_theta_p(y.view(), x.view(), theta.view(), order).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let c = w_theta_p((&x + &shift).view(), (&y + &shift).view(), theta.view(), order).unwrap();
            prop_assert!((a - c).abs() < 1e-10);
        }

        #[test]
        fn quadratic_paths_agree(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let x = Array2::from_shape_fn((5, 2), |_| rng.random_range(-3.0..3.0));
            let y = Array2::from_shape_fn((5, 2), |_| rng.random_range(-3.0..3.0));
            let theta = sample_unit_sphere(2, &mut rng).unwrap();
            let a = w_theta_2(x.view(), y.view(), theta.view()).unwrap();
            let b = w_theta_p_general(x.view(), y.view(), theta.view(), OrderP::TWO).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let ga = grad_w_theta_2(x.view(), y.view(), theta.view()).unwrap();
            let gb = grad_w_theta_general(x.view(), y.view(), theta.view(), OrderP::TWO).unwrap();
            for (u, v) in ga.iter().zip(gb.iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
