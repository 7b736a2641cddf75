//! Fixed-step SGD on the minibatch SW loss: the plain scheme
//! `u <- u - alpha phi(u, z)` and the projected-noised scheme
//! `u <- proj_r(u - alpha phi(u, z) + alpha beta eps)`, with full trajectory
//! recording.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{derive_seed, sample_batch, sample_uniform_ball, seeded_rng, DiscreteMeasure, SampleBatch};
use crate::network::probe::second_derivative_bound;
use crate::network::NetworkSpec;
use crate::swloss::{alpha_zero, estimate_f, grad_phi, loss_and_grad, Integration, LossEstimate, OrderP};

/// Independent random streams of a run. Keeping them apart makes a
/// projected-noised run with `beta = 0` replay the plain run exactly.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_PROBE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Plain,
    ProjectedNoised,
}

/// Law of the additive noise in the projected-noised scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Uniform on the unit ball.
    UniformBall,
}

/// Initial distribution of `u^(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Point mass at `u`.
    Point { u: Vec<f64> },
    /// Uniform on `B(0, radius)`; the default radius is `min(1, R_u - eps)`.
    Ball {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    /// Point mass at the network's seeded initialisation.
    Network,
}

impl Default for Init {
    fn default() -> Self {
        Init::Ball { radius: None }
    }
}

fn default_one() -> usize {
    1
}

fn default_tail() -> f64 {
    0.2
}

fn default_probe() -> usize {
    256
}

fn default_eval() -> Integration {
    Integration::MonteCarlo {
        batches: 64,
        directions: 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub alpha: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Noise level (projected-noised only).
    #[serde(default)]
    pub beta: f64,
    /// Projection radius (projected-noised only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_r: Option<f64>,
    pub t_max: usize,
    /// Minibatch size.
    pub n: usize,
    /// Projection directions per step.
    #[serde(default = "default_one")]
    pub directions: usize,
    #[serde(default)]
    pub p: OrderP,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub noise: NoiseLaw,
    pub seed: u64,
    /// Record an estimate of `F` every this many steps (0 disables).
    #[serde(default)]
    pub f_every: usize,
    #[serde(default = "default_eval")]
    pub f_integration: Integration,
    /// Fraction of the trajectory treated as the long-run tail.
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
    /// Samples for the second-derivative probe behind the step-size check
    /// (0 disables the check).
    #[serde(default = "default_probe")]
    pub probe_samples: usize,
}

impl SgdConfig {
    /// Plain scheme with defaults for every optional field.
    pub fn plain(alpha: f64, t_max: usize, n: usize, seed: u64) -> Self {
        Self {
            alpha,
            scheme: Scheme::Plain,
            beta: 0.0,
            radius_r: None,
            t_max,
            n,
            directions: 1,
            p: OrderP::default(),
            init: Init::default(),
            noise: NoiseLaw::default(),
            seed,
            f_every: 0,
            f_integration: default_eval(),
            tail_fraction: default_tail(),
            probe_samples: default_probe(),
        }
    }

    /// Projected-noised scheme with defaults for every optional field.
    pub fn projected_noised(alpha: f64, beta: f64, radius_r: f64, t_max: usize, n: usize, seed: u64) -> Self {
        Self {
            scheme: Scheme::ProjectedNoised,
            beta,
            radius_r: Some(radius_r),
            ..Self::plain(alpha, t_max, n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.n == 0 || self.directions == 0 {
            return Err(Error::InvalidArgument("n and directions must be >= 1".into()));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::InvalidArgument("tail_fraction must lie in (0, 1]".into()));
        }
        if self.scheme == Scheme::ProjectedNoised {
            match self.radius_r {
                Some(r) if r > 0.0 && r.is_finite() => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "projected_noised needs a positive radius_r".into(),
                    ))
                }
            }
            if !(self.beta >= 0.0) || !self.beta.is_finite() {
                return Err(Error::InvalidArgument("beta must be >= 0".into()));
            }
        }
        if let Init::Ball { radius: Some(r) } = self.init {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument("init ball radius must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Orthogonal projection onto the closed ball `B(0, r)`. The result's
/// computed norm never exceeds `r`.
pub fn project_ball(u: ArrayView1<'_, f64>, r: f64) -> Array1<f64> {
    let norm = u.dot(&u).sqrt();
    if norm <= r {
        return u.to_owned();
    }
    let mut scale = r / norm;
    loop {
        let v = &u * scale;
        if v.dot(&v).sqrt() <= r {
            return v;
        }
        scale = f64::from_bits(scale.to_bits() - 1);
    }
}

/// `u - alpha phi(u, z)`.
pub fn step_plain(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    batch: &SampleBatch,
    alpha: f64,
    p: OrderP,
) -> Result<Array1<f64>> {
    let g = grad_phi(spec, u, batch, p)?;
    Ok(&u - &(g * alpha))
}

/// `proj_r(u - alpha phi(u, z) + alpha beta noise)`.
#[allow(clippy::too_many_arguments)]
pub fn step_projected_noised(
    spec: &NetworkSpec,
    u: ArrayView1<'_, f64>,
    batch: &SampleBatch,
    noise: ArrayView1<'_, f64>,
    alpha: f64,
    beta: f64,
    r: f64,
    p: OrderP,
) -> Result<Array1<f64>> {
    if noise.len() != u.len() {
        return Err(Error::mismatch("noise vector", u.len(), noise.len()));
    }
    let g = grad_phi(spec, u, batch, p)?;
    Ok(noised_update(u, &g, noise, alpha, beta, r))
}

fn noised_update(u: ArrayView1<'_, f64>, g: &Array1<f64>, noise: ArrayView1<'_, f64>, alpha: f64, beta: f64, r: f64) -> Array1<f64> {
    let mut next = &u - &(g * alpha);
    if beta != 0.0 {
        next.scaled_add(alpha * beta, &noise);
    }
    project_ball(next.view(), r)
}

fn draw_noise<R: Rng + ?Sized>(law: NoiseLaw, dim: usize, rng: &mut R) -> Result<Array1<f64>> {
    match law {
        NoiseLaw::Gaussian => Ok(Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))),
        NoiseLaw::UniformBall => sample_uniform_ball(dim, 1.0, rng),
    }
}

/// Draw of `u^(0)` from the configured initial law.
pub fn initial_point(spec: &NetworkSpec, config: &SgdConfig) -> Result<Array1<f64>> {
    match &config.init {
        Init::Point { u } => {
            if u.len() != spec.param_dim() {
                return Err(Error::mismatch("initial point", spec.param_dim(), u.len()));
            }
            Ok(Array1::from(u.clone()))
        }
        Init::Ball { radius } => {
            let radius = radius.unwrap_or_else(|| 1f64.min(spec.radius_u() - spec.eps()));
            let mut rng = seeded_rng(derive_seed(config.seed, STREAM_INIT));
            sample_uniform_ball(spec.param_dim(), radius, &mut rng)
        }
        Init::Network => Ok(spec.init_params().into_inner()),
    }
}

/// Outcome of comparing `alpha` with the absolute-continuity threshold
/// `alpha_0(d_y, R_y, d_u, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaCheck {
    pub alpha: f64,
    pub alpha_zero: f64,
    pub m_hat: f64,
    pub exceeds: bool,
}

/// Probes `M` on the support of `mx` and compares `alpha` with `alpha_0`.
/// The probe is seeded from the network seed, so every run of a sweep sees
/// the same estimate.
pub fn alpha_check(
    spec: &NetworkSpec,
    alpha: f64,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    samples: usize,
) -> Result<AlphaCheck> {
    let mut rng = seeded_rng(derive_seed(spec.doc().seed, STREAM_PROBE));
    let m = second_derivative_bound(spec, samples, Some(mx.points()), 1e-4, &mut rng)?;
    alpha_check_with(spec, alpha, my, m.value)
}

/// [`alpha_check`] for a known estimate `m_hat` of `M`.
pub fn alpha_check_with(spec: &NetworkSpec, alpha: f64, my: &DiscreteMeasure, m_hat: f64) -> Result<AlphaCheck> {
    let m_hat = m_hat.max(f64::MIN_POSITIVE);
    let r_y = my.radius().max(f64::MIN_POSITIVE);
    let a0 = alpha_zero(spec.output_dim(), r_y, spec.param_dim(), m_hat)?;
    Ok(AlphaCheck {
        alpha,
        alpha_zero: a0,
        m_hat,
        exceeds: alpha >= a0,
    })
}

pub(crate) fn warn_alpha(check: &AlphaCheck) {
    if check.exceeds {
        log::warn!(
            "alpha = {} is not below alpha_0 = {:.3e} (M ~ {:.3e}); absolute continuity of the iterates is not guaranteed",
            check.alpha,
            check.alpha_zero,
            check.m_hat
        );
    }
}

/// Periodic estimate of `F(u^(t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FRecord {
    pub t: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Summary statistics written to the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub final_iterate_norm: f64,
    pub max_iterate_norm: f64,
    pub mean_sample_loss: Option<f64>,
    /// Mean sample loss over the trailing `tail_fraction` of steps.
    pub tail_mean_sample_loss: Option<f64>,
    pub tail_mean_grad_norm: Option<f64>,
    pub initial_f: Option<FRecord>,
    pub final_f: Option<FRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Row `t` is `u^(t)`, `t = 0..=t_max`.
    pub iterates: Array2<f64>,
    /// Sample loss of the step leaving `u^(t)`, `t = 0..t_max`.
    pub sample_loss: Vec<f64>,
    /// `|phi|_2` of the step leaving `u^(t)`.
    pub grad_norm: Vec<f64>,
    pub f_estimates: Vec<FRecord>,
    pub config: SgdConfig,
    pub alpha_check: Option<AlphaCheck>,
}

impl Trajectory {
    pub fn t_max(&self) -> usize {
        self.iterates.nrows() - 1
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn iterate(&self, t: usize) -> ArrayView1<'_, f64> {
        self.iterates.row(t)
    }

    pub fn last(&self) -> ArrayView1<'_, f64> {
        self.iterates.row(self.t_max())
    }

    /// First index of the long-run tail window.
    pub fn tail_start(&self) -> usize {
        let t = self.t_max();
        t - ((t as f64 * self.config.tail_fraction).ceil() as usize).min(t)
    }

    pub fn summary(&self) -> Summary {
        let norms: Vec<f64> = self.iterates.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let tail = self.tail_start().min(self.sample_loss.len());
        Summary {
            steps: self.t_max(),
            final_iterate_norm: *norms.last().unwrap(),
            max_iterate_norm: norms.iter().copied().fold(0.0, f64::max),
            mean_sample_loss: mean(&self.sample_loss),
            tail_mean_sample_loss: mean(&self.sample_loss[tail..]),
            tail_mean_grad_norm: mean(&self.grad_norm[tail..]),
            initial_f: self.f_estimates.first().copied(),
            final_f: self.f_estimates.last().copied(),
        }
    }

    /// CSV with one row per iterate: `t, u_0.., sample_loss, grad_norm, f`.
    /// The first line is a `#` comment holding the config as JSON. Values
    /// are written with 17 significant digits; fields with no value are empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let config = serde_json::to_string(&self.config).map_err(std::io::Error::other)?;
        writeln!(out, "# config: {config}")?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.iterates.ncols()).map(|i| format!("u{i}")));
        header.extend(["sample_loss", "grad_norm", "f_estimate"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        let mut f_iter = self.f_estimates.iter().peekable();
        for (t, row) in self.iterates.rows().into_iter().enumerate() {
            let mut fields = vec![t.to_string()];
            fields.extend(row.iter().map(|v| fmt_float(*v)));
            fields.push(self.sample_loss.get(t).map(|v| fmt_float(*v)).unwrap_or_default());
            fields.push(self.grad_norm.get(t).map(|v| fmt_float(*v)).unwrap_or_default());
            let f = match f_iter.peek() {
                Some(rec) if rec.t == t => {
                    let v = rec.mean;
                    f_iter.next();
                    fmt_float(v)
                }
                _ => String::new(),
            };
            fields.push(f);
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// JSON sidecar: config echo, step-size check and summary statistics.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "alpha_check": self.alpha_check,
            "summary": self.summary(),
            "f_estimates": self.f_estimates,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        let file = std::fs::File::create(csv_path).map_err(io_err(csv_path))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(io_err(csv_path))?;
        buf.flush().map_err(io_err(csv_path))?;
        let json_path = csv_path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.sidecar_json()).expect("serialisable sidecar");
        std::fs::write(&json_path, text + "\n").map_err(io_err(&json_path))?;
        Ok(())
    }
}

/// Fixed-width scientific formatting that round-trips every `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_run_inputs(spec: &NetworkSpec, mx: &DiscreteMeasure, my: &DiscreteMeasure) -> Result<()> {
    if mx.dim() != spec.input_dim() {
        return Err(Error::mismatch("input measure", spec.input_dim(), mx.dim()));
    }
    if my.dim() != spec.output_dim() {
        return Err(Error::mismatch("data measure", spec.output_dim(), my.dim()));
    }
    Ok(())
}

/// Runs the configured scheme for `t_max` steps. Fully deterministic given
/// the config (including its seed). Logs a warning when `alpha` is not below
/// the probed `alpha_0`.
pub fn run(spec: &NetworkSpec, config: &SgdConfig, mx: &DiscreteMeasure, my: &DiscreteMeasure) -> Result<Trajectory> {
    config.validate()?;
    check_run_inputs(spec, mx, my)?;
    let check = if config.probe_samples > 0 {
        let check = alpha_check(spec, config.alpha, mx, my, config.probe_samples)?;
        warn_alpha(&check);
        Some(check)
    } else {
        None
    };
    run_checked(spec, config, mx, my, check)
}

/// [`run`] with a precomputed step-size check attached to the result.
pub fn run_checked(
    spec: &NetworkSpec,
    config: &SgdConfig,
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    alpha_check: Option<AlphaCheck>,
) -> Result<Trajectory> {
    config.validate()?;
    check_run_inputs(spec, mx, my)?;
    let d_u = spec.param_dim();
    let mut batch_rng = seeded_rng(derive_seed(config.seed, STREAM_BATCH));
    let mut noise_rng = seeded_rng(derive_seed(config.seed, STREAM_NOISE));
    let mut eval_rng = seeded_rng(derive_seed(config.seed, STREAM_EVAL));

    let mut u = initial_point(spec, config)?;
    if config.scheme == Scheme::ProjectedNoised {
        u = project_ball(u.view(), config.radius_r.unwrap());
    }
    let mut iterates = Array2::zeros((config.t_max + 1, d_u));
    iterates.row_mut(0).assign(&u);
    let mut sample_loss = Vec::with_capacity(config.t_max);
    let mut grad_norm = Vec::with_capacity(config.t_max);
    let mut f_estimates = Vec::new();
    let mut record_f = |t: usize, u: &Array1<f64>, rng: &mut _| -> Result<()> {
        if config.f_every > 0 && (t.is_multiple_of(config.f_every) || t == config.t_max) {
            let LossEstimate { mean, std_error, .. } =
                estimate_f(spec, u.view(), mx, my, config.n, config.f_integration, rng, config.p)?;
            f_estimates.push(FRecord { t, mean, std_error });
        }
        Ok(())
    };
    record_f(0, &u, &mut eval_rng)?;

    for t in 1..=config.t_max {
        let batch = sample_batch(mx, my, config.n, config.directions, &mut batch_rng)?;
        let (loss, g) = loss_and_grad(spec, u.view(), &batch, config.p)?;
        sample_loss.push(loss);
        grad_norm.push(g.dot(&g).sqrt());
        u = match config.scheme {
            Scheme::Plain => &u - &(g * config.alpha),
            Scheme::ProjectedNoised => {
                let noise = draw_noise(config.noise, d_u, &mut noise_rng)?;
                noised_update(u.view(), &g, noise.view(), config.alpha, config.beta, config.radius_r.unwrap())
            }
        };
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: t });
        }
        iterates.row_mut(t).assign(&u);
        record_f(t, &u, &mut eval_rng)?;
    }

    Ok(Trajectory {
        iterates,
        sample_loss,
        grad_norm,
        f_estimates,
        config: config.clone(),
        alpha_check,
    })
}

/// Runs independent configurations in parallel on `workers` threads
/// (0 = rayon default). Results keep the input order. The step-size probe
/// runs once per sweep and each distinct exceeding alpha is logged once.
pub fn run_many(
    spec: &NetworkSpec,
    configs: &[SgdConfig],
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    workers: usize,
) -> Result<Vec<Result<Trajectory>>> {
    use rayon::prelude::*;
    let samples = configs.iter().map(|c| c.probe_samples).max().unwrap_or(0);
    let m_hat = if samples > 0 {
        check_run_inputs(spec, mx, my)?;
        let mut rng = seeded_rng(derive_seed(spec.doc().seed, STREAM_PROBE));
        Some(second_derivative_bound(spec, samples, Some(mx.points()), 1e-4, &mut rng)?.value)
    } else {
        None
    };
    let mut checks = Vec::with_capacity(configs.len());
    let mut warned: Vec<f64> = Vec::new();
    for c in configs {
        let check = match m_hat {
            Some(m) if c.probe_samples > 0 => Some(alpha_check_with(spec, c.alpha, my, m)?),
            _ => None,
        };
        if let Some(check) = &check {
            if !warned.contains(&c.alpha) {
                warn_alpha(check);
                warned.push(c.alpha);
            }
        }
        checks.push(check);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        configs
            .par_iter()
            .zip(checks)
            .map(|(c, check)| run_checked(spec, c, mx, my, check))
            .collect()
    }))
}
