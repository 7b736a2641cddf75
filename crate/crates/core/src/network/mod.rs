//! Bounded recursive networks `T(u, x) = T~(u, x) * 1_{B(0,R_u)}(u) * 1_{B(0,R_x)}(x)`.
//!
//! Layer `n` computes `h_n = a_n(sum_{i<n} A_{n,i}(u) h_i + B_n u)` with
//! `h_0 = x`. Every `A_{n,i}` is linear in `u`; by default it reads a
//! disjoint slice of `u` reshaped row-major to `d_n x d_i`, and `B_n` reads a
//! disjoint bias slice. General 3-tensor maps `(row, col, param, value)` and
//! general bias matrices can replace the defaults per link.

mod activation;
mod indicator;
pub mod probe;

use std::ops::Deref;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{sample_uniform_ball, seeded_rng};

pub use activation::Activation;
pub use indicator::{smooth_indicator, smooth_step, smooth_step_derivative};

/// Trainable parameter vector `u`. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Array1<f64>);

impl ParamVector {
    pub fn new(u: Array1<f64>) -> Result<Self> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameter vector has non-finite entries".into()));
        }
        Ok(Self(u))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Array1::zeros(dim))
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = Array1<f64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// One entry `A[row, col, param] = value` of a general link tensor.
pub type TensorEntry = (usize, usize, usize, f64);
/// One entry `B[row, param] = value` of a general bias matrix.
pub type BiasEntry = (usize, usize, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorLink {
    pub layer: usize,
    pub source: usize,
    pub entries: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasMatrix {
    pub layer: usize,
    pub entries: Vec<BiasEntry>,
}

/// Plain-text form of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    /// `(d_0 = d_x, d_1, ..., d_N = d_y)`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Activation of the last layer; defaults to `activation`. Only
    /// `identity` or an activation of the same regularity class is allowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_activation: Option<Activation>,
    pub radius_u: f64,
    pub radius_x: f64,
    pub eps: f64,
    /// Seed for [`NetworkSpec::init_params`].
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Extra links `[n, i]` with `i < n - 1`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<TensorLink>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bias_matrices: Vec<BiasMatrix>,
    /// Total parameter dimension when general maps address indices beyond
    /// the default slices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_dim: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
enum LinkMap {
    Slice { offset: usize },
    Tensor(Vec<TensorEntry>),
}

#[derive(Debug, Clone, PartialEq)]
enum BiasMap {
    None,
    Slice { offset: usize },
    Matrix(Vec<BiasEntry>),
}

#[derive(Debug, Clone, PartialEq)]
struct Link {
    source: usize,
    map: LinkMap,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    links: Vec<Link>,
    bias: BiasMap,
    activation: Activation,
}

/// Validated network architecture with its parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDoc", into = "NetworkDoc")]
pub struct NetworkSpec {
    doc: NetworkDoc,
    layers: Vec<Layer>,
    param_dim: usize,
}

impl TryFrom<NetworkDoc> for NetworkSpec {
    type Error = Error;

    fn try_from(doc: NetworkDoc) -> Result<Self> {
        NetworkSpec::from_doc(doc)
    }
}

impl From<NetworkSpec> for NetworkDoc {
    fn from(spec: NetworkSpec) -> Self {
        spec.doc
    }
}

/// Intermediate values of one forward pass.
struct Trace {
    /// `h_0 .. h_N`.
    hs: Vec<Vec<f64>>,
    /// Pre-activations `z_1 .. z_N`.
    zs: Vec<Vec<f64>>,
    ind_u: f64,
    grad_ind_u: Vec<f64>,
    ind_x: f64,
    grad_ind_x: Vec<f64>,
}

impl NetworkSpec {
    /// Dense feedforward network with bias slices.
    pub fn feedforward(
        layer_dims: &[usize],
        activation: Activation,
        radius_u: f64,
        radius_x: f64,
        eps: f64,
    ) -> Result<Self> {
        Self::from_doc(NetworkDoc {
            layer_dims: layer_dims.to_vec(),
            activation,
            output_activation: None,
            radius_u,
            radius_x,
            eps,
            seed: 0,
            bias: true,
            residual: Vec::new(),
            tensors: Vec::new(),
            bias_matrices: Vec::new(),
            param_dim: None,
        })
    }

    pub fn from_doc(doc: NetworkDoc) -> Result<Self> {
        let bad = |m: String| Error::InvalidNetwork(m);
        let dims = &doc.layer_dims;
        if dims.len() < 2 {
            return Err(bad("need at least input and output dimensions".into()));
        }
        if dims.contains(&0) {
            return Err(bad("layer dimensions must be positive".into()));
        }
        for (name, v) in [("radius_u", doc.radius_u), ("radius_x", doc.radius_x), ("eps", doc.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} must be a positive finite number")));
            }
        }
        if doc.eps >= doc.radius_u || doc.eps >= doc.radius_x {
            return Err(bad("eps must be smaller than both radii".into()));
        }
        let hidden = doc.activation;
        let output = doc.output_activation.unwrap_or(hidden);
        let kinked = hidden.has_kink() || output.has_kink();
        let curved = |a: Activation| a.is_smooth() && a != Activation::Identity;
        if kinked && (curved(hidden) || curved(output)) {
            return Err(bad(
                "activations must all be C^2 or all piecewise linear".into(),
            ));
        }

        let depth = dims.len() - 1;
        for &[n, i] in &doc.residual {
            if n == 0 || n > depth || i >= n {
                return Err(bad(format!("invalid residual link [{n}, {i}]")));
            }
        }
        for t in &doc.tensors {
            if t.layer == 0 || t.layer > depth || t.source >= t.layer {
                return Err(bad(format!("invalid tensor link [{}, {}]", t.layer, t.source)));
            }
        }
        for b in &doc.bias_matrices {
            if b.layer == 0 || b.layer > depth {
                return Err(bad(format!("invalid bias matrix layer {}", b.layer)));
            }
        }

        let mut offset = 0usize;
        let mut layers = Vec::with_capacity(depth);
        for n in 1..=depth {
            let mut sources = vec![n - 1];
            sources.extend(doc.residual.iter().filter(|l| l[0] == n).map(|l| l[1]));
            sources.extend(doc.tensors.iter().filter(|t| t.layer == n).map(|t| t.source));
            sources.sort_unstable();
            sources.dedup();
            let mut links = Vec::with_capacity(sources.len());
            for i in sources {
                let tensor = doc.tensors.iter().find(|t| t.layer == n && t.source == i);
                let map = match tensor {
                    Some(t) => LinkMap::Tensor(t.entries.clone()),
                    None => {
                        let map = LinkMap::Slice { offset };
                        offset += dims[n] * dims[i];
                        map
                    }
                };
                links.push(Link { source: i, map });
            }
            let bias = match doc.bias_matrices.iter().find(|b| b.layer == n) {
                Some(b) => BiasMap::Matrix(b.entries.clone()),
                None if doc.bias => {
                    let map = BiasMap::Slice { offset };
                    offset += dims[n];
                    map
                }
                None => BiasMap::None,
            };
            let activation = if n == depth { output } else { hidden };
            layers.push(Layer {
                links,
                bias,
                activation,
            });
        }

        let param_dim = match doc.param_dim {
            Some(p) if p < offset => {
                return Err(bad(format!(
                    "param_dim {p} smaller than the {offset} slice parameters"
                )))
            }
            Some(p) => p,
            None => offset,
        };
        for (n, layer) in layers.iter().enumerate() {
            let rows = dims[n + 1];
            for link in &layer.links {
                if let LinkMap::Tensor(entries) = &link.map {
                    let cols = dims[link.source];
                    for &(r, c, p, v) in entries {
                        if r >= rows || c >= cols || p >= param_dim || !v.is_finite() {
                            return Err(bad(format!(
                                "tensor entry ({r}, {c}, {p}) out of range for layer {}",
                                n + 1
                            )));
                        }
                    }
                }
            }
            if let BiasMap::Matrix(entries) = &layer.bias {
                for &(r, p, v) in entries {
                    if r >= rows || p >= param_dim || !v.is_finite() {
                        return Err(bad(format!("bias entry ({r}, {p}) out of range")));
                    }
                }
            }
        }
        if param_dim == 0 {
            return Err(bad("network has no parameters".into()));
        }

        Ok(Self {
            doc,
            layers,
            param_dim,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: NetworkDoc = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<network>".into(),
            message: e.to_string(),
        })?;
        Self::from_doc(doc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.doc).expect("network document serialises")
    }

    pub fn doc(&self) -> &NetworkDoc {
        &self.doc
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.doc.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.doc.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.doc.layer_dims.last().expect("validated non-empty")
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn radius_u(&self) -> f64 {
        self.doc.radius_u
    }

    pub fn radius_x(&self) -> f64 {
        self.doc.radius_x
    }

    pub fn eps(&self) -> f64 {
        self.doc.eps
    }

    pub fn activation(&self) -> Activation {
        self.doc.activation
    }

    /// True when any layer uses a kinked (piecewise-linear) activation.
    pub fn is_piecewise_linear(&self) -> bool {
        self.layers.iter().any(|l| l.activation.has_kink())
    }

    /// Source layers feeding layer `n` (1-based).
    pub fn connectivity(&self, n: usize) -> Vec<usize> {
        self.layers[n - 1].links.iter().map(|l| l.source).collect()
    }

    /// Deterministic initial parameters from the document seed: Gaussian
    /// weights with variance `1 / fan_in` on slice maps, zero biases, rescaled
    /// to lie inside half the indicator plateau.
    pub fn init_params(&self) -> ParamVector {
        let mut rng = seeded_rng(self.doc.seed);
        let dims = &self.doc.layer_dims;
        let mut u = Array1::<f64>::zeros(self.param_dim);
        for (n, layer) in self.layers.iter().enumerate() {
            let fan_in: usize = layer.links.iter().map(|l| dims[l.source]).sum();
            let scale = (1.0 / fan_in as f64).sqrt();
            for link in &layer.links {
                if let LinkMap::Slice { offset } = link.map {
                    let len = dims[n + 1] * dims[link.source];
                    for v in u.slice_mut(ndarray::s![offset..offset + len]) {
                        *v = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        let limit = 0.5 * (self.doc.radius_u - self.doc.eps);
        let norm = u.dot(&u).sqrt();
        if norm > limit {
            u *= limit / norm;
        }
        ParamVector(u)
    }

    /// Uniform draw in `B(0, radius)` of parameter space.
    pub fn sample_params<R: Rng + ?Sized>(&self, radius: f64, rng: &mut R) -> Result<ParamVector> {
        Ok(ParamVector(sample_uniform_ball(self.param_dim, radius, rng)?))
    }

    fn check_dims(&self, u: usize, x: usize) -> Result<()> {
        if u != self.param_dim {
            return Err(Error::mismatch("parameter vector", self.param_dim, u));
        }
        if x != self.input_dim() {
            return Err(Error::mismatch("network input", self.input_dim(), x));
        }
        Ok(())
    }

    fn trace(&self, u: &[f64], x: &[f64], want_grad: bool) -> Trace {
        let (ind_u, grad_ind_u) = if want_grad {
            indicator::indicator_with_gradient(u, self.doc.radius_u, self.doc.eps)
        } else {
            (indicator::indicator_value(u, self.doc.radius_u, self.doc.eps), Vec::new())
        };
        let (ind_x, grad_ind_x) = if want_grad {
            indicator::indicator_with_gradient(x, self.doc.radius_x, self.doc.eps)
        } else {
            (indicator::indicator_value(x, self.doc.radius_x, self.doc.eps), Vec::new())
        };
        let dims = &self.doc.layer_dims;
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        hs.push(x.to_vec());
        for (n, layer) in self.layers.iter().enumerate() {
            let rows = dims[n + 1];
            let mut z = vec![0.0; rows];
            for link in &layer.links {
                let h = &hs[link.source];
                match &link.map {
                    LinkMap::Slice { offset } => {
                        let cols = h.len();
                        for (r, zr) in z.iter_mut().enumerate() {
                            let w = &u[offset + r * cols..offset + (r + 1) * cols];
                            *zr += w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    LinkMap::Tensor(entries) => {
                        for &(r, c, p, v) in entries {
                            z[r] += v * h[c] * u[p];
                        }
                    }
                }
            }
            match &layer.bias {
                BiasMap::None => {}
                BiasMap::Slice { offset } => {
                    for (r, zr) in z.iter_mut().enumerate() {
                        *zr += u[offset + r];
                    }
                }
                BiasMap::Matrix(entries) => {
                    for &(r, p, v) in entries {
                        z[r] += v * u[p];
                    }
                }
            }
            let h: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            zs.push(z);
            hs.push(h);
        }
        Trace {
            hs,
            zs,
            ind_u,
            grad_ind_u,
            ind_x,
            grad_ind_x,
        }
    }

    /// Network output `T(u, x)`.
    pub fn forward(&self, u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(u.len(), x.len())?;
        let u = u.to_vec();
        let x = x.to_vec();
        Ok(Array1::from(self.forward_slice(&u, &x)))
    }

    pub(crate) fn forward_slice(&self, u: &[f64], x: &[f64]) -> Vec<f64> {
        let ind_u = indicator::indicator_value(u, self.doc.radius_u, self.doc.eps);
        let ind_x = indicator::indicator_value(x, self.doc.radius_x, self.doc.eps);
        let scale = ind_u * ind_x;
        if scale == 0.0 {
            return vec![0.0; self.output_dim()];
        }
        let trace = self.trace(u, x, false);
        trace.hs.last().unwrap().iter().map(|v| v * scale).collect()
    }

    /// Output of the unbounded network `T~(u, x)` (no indicators).
    pub fn forward_raw(&self, u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(u.len(), x.len())?;
        let trace = self.trace(&u.to_vec(), &x.to_vec(), false);
        Ok(Array1::from(trace.hs.last().unwrap().clone()))
    }

    /// Applies the network to every row of `xs`.
    pub fn forward_batch(&self, u: ArrayView1<'_, f64>, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dims(u.len(), xs.ncols())?;
        let u = u.to_vec();
        let mut out = Array2::zeros((xs.nrows(), self.output_dim()));
        for (k, row) in xs.rows().into_iter().enumerate() {
            let y = self.forward_slice(&u, &row.to_vec());
            out.row_mut(k).assign(&ArrayView1::from(&y[..]));
        }
        Ok(out)
    }

    /// Pre-activations `z_1, ..., z_N` of the unbounded network.
    pub fn pre_activations(&self, u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Vec<Array1<f64>>> {
        self.check_dims(u.len(), x.len())?;
        let trace = self.trace(&u.to_vec(), &x.to_vec(), false);
        Ok(trace.zs.into_iter().map(Array1::from).collect())
    }

    /// Smallest `|z|` over pre-activations feeding a kinked activation;
    /// infinite for smooth networks.
    pub fn kink_margin(&self, u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<f64> {
        let zs = self.pre_activations(u, x)?;
        Ok(self
            .layers
            .iter()
            .zip(&zs)
            .filter(|(l, _)| l.activation.has_kink())
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// Reverse-mode product `v^T dT/d(u, x)`; returns `(du, dx)`.
    pub(crate) fn vjp_slice(&self, u: &[f64], x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut du = vec![0.0; self.param_dim];
        let mut dx = vec![0.0; x.len()];
        let trace = self.trace(u, x, true);
        let scale = trace.ind_u * trace.ind_x;
        let dead_u = trace.ind_u == 0.0 && trace.grad_ind_u.iter().all(|g| *g == 0.0);
        let dead_x = trace.ind_x == 0.0 && trace.grad_ind_x.iter().all(|g| *g == 0.0);
        if dead_u || dead_x {
            return (du, dx);
        }

        let raw = trace.hs.last().unwrap();
        let v_dot_raw: f64 = v.iter().zip(raw).map(|(a, b)| a * b).sum();
        // product rule with the two indicators
        for (d, g) in du.iter_mut().zip(&trace.grad_ind_u) {
            *d += v_dot_raw * trace.ind_x * g;
        }
        for (d, g) in dx.iter_mut().zip(&trace.grad_ind_x) {
            *d += v_dot_raw * trace.ind_u * g;
        }
        if scale == 0.0 {
            return (du, dx);
        }

        let dims = &self.doc.layer_dims;
        let mut dh: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
        for (slot, vi) in dh.last_mut().unwrap().iter_mut().zip(v) {
            *slot = scale * vi;
        }
        for n in (0..self.layers.len()).rev() {
            let layer = &self.layers[n];
            let dz: Vec<f64> = dh[n + 1]
                .iter()
                .zip(&trace.zs[n])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            if dz.iter().all(|g| *g == 0.0) {
                continue;
            }
            match &layer.bias {
                BiasMap::None => {}
                BiasMap::Slice { offset } => {
                    for (r, g) in dz.iter().enumerate() {
                        du[offset + r] += g;
                    }
                }
                BiasMap::Matrix(entries) => {
                    for &(r, p, val) in entries {
                        du[p] += val * dz[r];
                    }
                }
            }
            for link in &layer.links {
                let h = &trace.hs[link.source];
                let cols = h.len();
                let mut dsrc = vec![0.0; cols];
                match &link.map {
                    LinkMap::Slice { offset } => {
                        for (r, g) in dz.iter().enumerate() {
                            let base = offset + r * cols;
                            for c in 0..cols {
                                du[base + c] += g * h[c];
                                dsrc[c] += g * u[base + c];
                            }
                        }
                    }
                    LinkMap::Tensor(entries) => {
                        for &(r, c, p, val) in entries {
                            du[p] += val * dz[r] * h[c];
                            dsrc[c] += val * dz[r] * u[p];
                        }
                    }
                }
                for (acc, g) in dh[link.source].iter_mut().zip(dsrc) {
                    *acc += g;
                }
            }
        }
        for (d, g) in dx.iter_mut().zip(&dh[0]) {
            *d += g;
        }
        (du, dx)
    }

    /// `(dT/du)^T v` for a cotangent `v` in `R^{d_y}`.
    pub fn vjp_u(
        &self,
        u: ArrayView1<'_, f64>,
        x: ArrayView1<'_, f64>,
        v: ArrayView1<'_, f64>,
    ) -> Result<Array1<f64>> {
        self.check_dims(u.len(), x.len())?;
        if v.len() != self.output_dim() {
            return Err(Error::mismatch("cotangent", self.output_dim(), v.len()));
        }
        let (du, _) = self.vjp_slice(&u.to_vec(), &x.to_vec(), &v.to_vec());
        Ok(Array1::from(du))
    }

    /// Parameter Jacobian `dT/du` as a `d_y x d_u` matrix.
    pub fn jacobian_u(&self, u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.jacobians(u, x)?.0)
    }

    /// Jacobians with respect to `u` (`d_y x d_u`) and `x` (`d_y x d_x`).
    pub fn jacobians(
        &self,
        u: ArrayView1<'_, f64>,
        x: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_dims(u.len(), x.len())?;
        let u = u.to_vec();
        let x = x.to_vec();
        let dy = self.output_dim();
        let mut ju = Array2::zeros((dy, self.param_dim));
        let mut jx = Array2::zeros((dy, x.len()));
        let mut e = vec![0.0; dy];
        for j in 0..dy {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let (du, dx) = self.vjp_slice(&u, &x, &e);
            ju.row_mut(j).assign(&ArrayView1::from(&du[..]));
            jx.row_mut(j).assign(&ArrayView1::from(&dx[..]));
        }
        Ok((ju, jx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_gradient;
    use ndarray::array;

    fn linear_net() -> NetworkSpec {
        let doc = NetworkDoc {
            layer_dims: vec![3, 2],
            activation: Activation::Identity,
            output_activation: None,
            radius_u: 20.0,
            radius_x: 20.0,
            eps: 1.0,
            seed: 0,
            bias: false,
            residual: vec![],
            tensors: vec![],
            bias_matrices: vec![],
            param_dim: None,
        };
        NetworkSpec::from_doc(doc).unwrap()
    }

    #[test]
    fn linear_forward_is_matrix_product() {
        let net = linear_net();
        assert_eq!(net.param_dim(), 6);
        let u = array![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let x = array![1.0, -1.0, 2.0];
        let out = net.forward(u.view(), x.view()).unwrap();
        assert_eq!(out, array![1.0 - 2.0 + 6.0, -1.0 - 0.5]);
    }

    #[test]
    fn linear_jacobian_is_kronecker_structured() {
        let net = linear_net();
        let u = array![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let x = array![1.0, -1.0, 2.0];
        let j = net.jacobian_u(u.view(), x.view()).unwrap();
        let expected = array![
            [1.0, -1.0, 2.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, -1.0, 2.0]
        ];
        assert_eq!(j, expected);
    }

    #[test]
    fn outside_the_shell_is_zero() {
        let net = NetworkSpec::feedforward(&[2, 3, 1], Activation::Tanh, 1.0, 5.0, 0.2).unwrap();
        let mut u = Array1::<f64>::from_elem(net.param_dim(), 1.0);
        let norm = u.dot(&u).sqrt();
        u *= 1.2 / norm;
        let x = array![0.3, -0.2];
        assert_eq!(net.forward(u.view(), x.view()).unwrap(), array![0.0]);
        let j = net.jacobian_u(u.view(), x.view()).unwrap();
        assert!(j.iter().all(|v| *v == 0.0));
        let far_x = array![10.0, 0.0];
        let u0 = Array1::from_elem(net.param_dim(), 0.1);
        assert_eq!(net.forward(u0.view(), far_x.view()).unwrap(), array![0.0]);
    }

    // Two-layer relu net evaluated by hand:
    //   W1 = [[1, -1], [0.5, 2]], b1 = [0.1, -3]; x = [2, 1]
    //   z1 = [2 - 1 + 0.1, 1 + 2 - 3] = [1.1, 0] -> h1 = [1.1, 0]
    //   W2 = [[2, -4]], b2 = [0.25] -> z2 = 2.2 + 0.25 = 2.45 -> relu 2.45
    #[test]
    fn relu_two_layer_hand_fixture() {
        let net = NetworkSpec::feedforward(&[2, 2, 1], Activation::Relu, 50.0, 50.0, 1.0).unwrap();
        assert_eq!(net.param_dim(), 4 + 2 + 2 + 1);
        let u = array![1.0, -1.0, 0.5, 2.0, 0.1, -3.0, 2.0, -4.0, 0.25];
        let x = array![2.0, 1.0];
        let out = net.forward(u.view(), x.view()).unwrap();
        assert!((out[0] - 2.45).abs() < 1e-14);
        // kink at z1[1] = 0 gives zero derivative for the second hidden unit
        let j = net.jacobian_u(u.view(), x.view()).unwrap();
        assert_eq!(j[[0, 2]], 0.0);
        assert_eq!(j[[0, 3]], 0.0);
        assert_eq!(j[[0, 5]], 0.0);
        assert!((j[[0, 0]] - 2.0 * 2.0).abs() < 1e-14);
        assert!((j[[0, 6]] - 1.1).abs() < 1e-14);
        assert_eq!(net.kink_margin(u.view(), x.view()).unwrap(), 0.0);
    }

    #[test]
    fn smooth_jacobian_matches_finite_differences() {
        let net = NetworkSpec::feedforward(&[2, 4, 3, 2], Activation::Tanh, 3.0, 4.0, 0.5).unwrap();
        let mut rng = seeded_rng(42);
        for _ in 0..100 {
            let u = net.sample_params(3.4, &mut rng).unwrap();
            let x = sample_uniform_ball(2, 4.4, &mut rng).unwrap();
            let j = net.jacobian_u(u.view(), x.view()).unwrap();
            for row in 0..2 {
                let fd = fd_gradient(
                    |p| net.forward(p.view(), x.view()).unwrap()[row],
                    u.view(),
                    1e-5,
                );
                let err = (&fd - &j.row(row)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = j.row(row).dot(&j.row(row)).sqrt().max(1.0);
                assert!(err / scale < 1e-5, "rel err {}", err / scale);
            }
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let net = NetworkSpec::feedforward(&[3, 3, 1], Activation::Softplus, 2.0, 2.0, 0.4).unwrap();
        let mut rng = seeded_rng(8);
        for _ in 0..20 {
            let u = net.sample_params(2.2, &mut rng).unwrap();
            let x = sample_uniform_ball(3, 2.3, &mut rng).unwrap();
            let (_, jx) = net.jacobians(u.view(), x.view()).unwrap();
            let fd = fd_gradient(|p| net.forward(u.view(), p.view()).unwrap()[0], x.view(), 1e-5);
            for (a, b) in fd.iter().zip(jx.row(0)) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn residual_and_tensor_links() {
        let doc = NetworkDoc {
            layer_dims: vec![2, 3, 2],
            activation: Activation::Sigmoid,
            output_activation: Some(Activation::Identity),
            radius_u: 5.0,
            radius_x: 5.0,
            eps: 0.5,
            seed: 1,
            bias: true,
            residual: vec![[2, 0]],
            tensors: vec![TensorLink {
                layer: 1,
                source: 0,
                entries: vec![(0, 0, 0, 1.0), (1, 1, 0, -0.5), (2, 0, 3, 2.0), (2, 1, 4, 0.7)],
            }],
            bias_matrices: vec![BiasMatrix {
                layer: 2,
                entries: vec![(0, 1, 1.0), (1, 2, -1.0)],
            }],
            param_dim: Some(16),
        };
        let net = NetworkSpec::from_doc(doc).unwrap();
        assert_eq!(net.connectivity(2), vec![0, 1]);
        assert_eq!(net.param_dim(), 16);
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let u = net.sample_params(4.0, &mut rng).unwrap();
            let x = sample_uniform_ball(2, 4.0, &mut rng).unwrap();
            let j = net.jacobian_u(u.view(), x.view()).unwrap();
            for row in 0..2 {
                let fd = fd_gradient(
                    |p| net.forward(p.view(), x.view()).unwrap()[row],
                    u.view(),
                    1e-5,
                );
                for (a, b) in fd.iter().zip(j.row(row)) {
                    assert!((a - b).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn mixed_regimes_rejected() {
        let mut doc = linear_net().doc().clone();
        doc.activation = Activation::Relu;
        doc.output_activation = Some(Activation::Tanh);
        assert!(NetworkSpec::from_doc(doc.clone()).is_err());
        doc.output_activation = Some(Activation::Identity);
        assert!(NetworkSpec::from_doc(doc).is_ok());
    }

    #[test]
    fn invalid_radii_rejected() {
        assert!(NetworkSpec::feedforward(&[1, 1], Activation::Identity, 1.0, 1.0, 1.0).is_err());
        assert!(NetworkSpec::feedforward(&[1, 1], Activation::Identity, -1.0, 1.0, 0.1).is_err());
        assert!(NetworkSpec::feedforward(&[1], Activation::Identity, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn dimension_mismatch_reported() {
        let net = linear_net();
        let err = net.forward(array![1.0].view(), array![1.0, 2.0, 3.0].view());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
layer_dims = [2, 8, 1]
activation = "leaky_relu:0.1"
output_activation = "identity"
radius_u = 10.0
radius_x = 3.0
eps = 0.5
seed = 99
residual = [[2, 0]]
"#;
        let net = NetworkSpec::from_toml_str(text).unwrap();
        assert_eq!(net.activation(), Activation::LeakyRelu(0.1));
        assert_eq!(net.param_dim(), 16 + 8 + 8 + 2 + 1);
        let again = NetworkSpec::from_toml_str(&net.to_toml_string()).unwrap();
        assert_eq!(net, again);
        let u = net.init_params();
        assert!(u.dot(&*u).sqrt() <= 0.5 * 9.5 + 1e-12);
        assert_eq!(u, again.init_params());
    }
}
