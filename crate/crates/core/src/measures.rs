//! Discrete probability measures, sphere sampling and per-iteration minibatch
//! draws.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Generator used for every run. All randomness flows through explicitly
/// seeded instances of this type.
pub type RunRng = ChaCha8Rng;

const WEIGHT_TOL: f64 = 1e-12;

pub fn seeded_rng(seed: u64) -> RunRng {
    RunRng::seed_from_u64(seed)
}

/// Derives an independent child seed (SplitMix64 finaliser over the pair).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A weighted point cloud `sum_k a_k delta_{x_k}`.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
    sampler: WeightedIndex<f64>,
}

impl DiscreteMeasure {
    /// Uniform weights over the rows of `points`.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::InvalidMeasure("measure needs at least one atom".into()));
        }
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Single atom at `point`.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        let points = Array2::from_shape_vec((1, point.len()), point.to_vec())
            .map_err(|e| Error::InvalidMeasure(e.to_string()))?;
        Self::uniform(points)
    }

    /// Weighted measure. Weights are renormalised to sum to one; they must be
    /// nonnegative with a positive total.
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidMeasure(format!(
                "support must be a nonempty n x d matrix, got {n} x {d}"
            )));
        }
        if weights.len() != n {
            return Err(Error::mismatch("measure weights", n, weights.len()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite support point".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.sum();
        if total <= 0.0 {
            return Err(Error::InvalidMeasure("weights sum to zero".into()));
        }
        let weights = if (total - 1.0).abs() <= WEIGHT_TOL {
            weights
        } else {
            weights / total
        };
        let sampler = WeightedIndex::new(weights.iter().copied())
            .map_err(|e| Error::InvalidMeasure(e.to_string()))?;
        Ok(Self {
            points,
            weights,
            sampler,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn point(&self, k: usize) -> ArrayView1<'_, f64> {
        self.points.row(k)
    }

    /// Largest Euclidean norm of a support point (`R_x` / `R_y`).
    pub fn radius(&self) -> f64 {
        self.points
            .axis_iter(Axis(0))
            .map(|row| row.dot(&row).sqrt())
            .fold(0.0, f64::max)
    }

    /// Index of an atom drawn according to the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Loads a measure from CSV: one support point per row, optionally
    /// followed by a weight column.
    ///
    /// With `dim = Some(d)`, a row of `d + 1` fields carries a trailing weight.
    /// A non-numeric first row is treated as a header; a header whose last
    /// field is `w` or `weight` also marks a weight column. Lines starting with
    /// `#` are ignored.
    pub fn from_csv_path(path: &Path, dim: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(file, dim).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_csv_reader<R: Read>(reader: R, dim: Option<usize>) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: "<csv>".into(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);

        let mut header_weight = false;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| parse_err(e.to_string()))?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(values) => rows.push(values),
                Err(_) if line == 0 => {
                    let last = record.iter().next_back().unwrap_or("").to_ascii_lowercase();
                    header_weight = last == "w" || last == "weight";
                }
                Err(e) => return Err(parse_err(format!("row {}: {e}", line + 1))),
            }
        }
        if rows.is_empty() {
            return Err(parse_err("no support points".into()));
        }
        let cols = rows[0].len();
        if let Some((k, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(parse_err(format!(
                "row {} has {} fields, expected {cols}",
                k + 1,
                row.len()
            )));
        }
        let has_weight = match dim {
            Some(d) if cols == d => false,
            Some(d) if cols == d + 1 => true,
            Some(d) => {
                return Err(parse_err(format!(
                    "expected {d} coordinates (plus optional weight), found {cols} fields"
                )))
            }
            None => header_weight,
        };
        let d = if has_weight { cols - 1 } else { cols };
        if d == 0 {
            return Err(parse_err("rows carry no coordinates".into()));
        }
        let n = rows.len();
        let mut points = Array2::zeros((n, d));
        let mut weights = Array1::from_elem(n, 1.0);
        for (k, row) in rows.iter().enumerate() {
            for j in 0..d {
                points[[k, j]] = row[j];
            }
            if has_weight {
                weights[k] = row[d];
            }
        }
        Self::new(points, weights)
    }
}

/// One SGD draw `z = (X, Y, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `n x d_x` inputs drawn from the latent measure.
    pub x: Array2<f64>,
    /// `n x d_y` targets drawn from the data measure.
    pub y: Array2<f64>,
    /// `L x d_y` unit projection directions.
    pub thetas: Array2<f64>,
}

impl SampleBatch {
    pub fn new(x: Array2<f64>, y: Array2<f64>, thetas: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::mismatch("batch rows", x.nrows(), y.nrows()));
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if thetas.nrows() == 0 {
            return Err(Error::InvalidArgument("batch needs at least one direction".into()));
        }
        if thetas.ncols() != y.ncols() {
            return Err(Error::mismatch("direction dimension", y.ncols(), thetas.ncols()));
        }
        Ok(Self { x, y, thetas })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn num_directions(&self) -> usize {
        self.thetas.nrows()
    }
}

/// Uniform draw on the unit sphere `S^{dim-1}` (normalised isotropic Gaussian).
pub fn sample_unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Array1<f64>> {
    if dim == 0 {
        return Err(Error::InvalidDimension("sphere dimension must be >= 1".into()));
    }
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-150 {
            return Ok(v / norm);
        }
    }
}

/// Uniform draw in the closed Euclidean ball of the given radius.
pub fn sample_uniform_ball<R: Rng + ?Sized>(
    dim: usize,
    radius: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("ball radius {radius}")));
    }
    let dir = sample_unit_sphere(dim, rng)?;
    let u: f64 = rng.random();
    Ok(dir * (radius * u.powf(1.0 / dim as f64)))
}

/// Draws `n` i.i.d. rows from each measure and `num_directions` sphere
/// directions in `R^{d_y}`.
pub fn sample_batch<R: Rng + ?Sized>(
    mx: &DiscreteMeasure,
    my: &DiscreteMeasure,
    n: usize,
    num_directions: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if n == 0 || num_directions == 0 {
        return Err(Error::InvalidArgument(
            "batch size and direction count must be >= 1".into(),
        ));
    }
    let mut x = Array2::zeros((n, mx.dim()));
    for mut row in x.rows_mut() {
        row.assign(&mx.point(mx.sample_index(rng)));
    }
    let mut y = Array2::zeros((n, my.dim()));
    for mut row in y.rows_mut() {
        row.assign(&my.point(my.sample_index(rng)));
    }
    let mut thetas = Array2::zeros((num_directions, my.dim()));
    for mut row in thetas.rows_mut() {
        row.assign(&sample_unit_sphere(my.dim(), rng)?);
    }
    Ok(SampleBatch { x, y, thetas })
}

/// Projects every row onto `theta`: entry `k` is `theta . x_k`.
pub fn project(x: ArrayView2<'_, f64>, theta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.ncols() != theta.len() {
        return Err(Error::mismatch("projection", theta.len(), x.ncols()));
    }
    Ok(x.rows().into_iter().map(|row| dot(row, theta)).collect())
}

pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
