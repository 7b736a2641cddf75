//! Experiment documents (TOML or JSON) and their resolution against the
//! filesystem and command-line overrides.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::network::{NetworkDoc, NetworkSpec};
use crate::sgd::SgdConfig;
use crate::swloss::{Integration, OrderP};

/// A network given inline or by path to a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    File { path: PathBuf },
    Inline(NetworkDoc),
}

/// A measure given by CSV path or inline atoms (uniform unless weights are
/// given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSource {
    File { path: PathBuf },
    Inline {
        points: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Step sizes; defaults to `[sgd.alpha]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
    /// Seeds; defaults to `[sgd.seed]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    /// Continuous-time horizon `s`; when set, every run uses
    /// `t_max = ceil(s / alpha)` instead of `sgd.t_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

fn default_k_max() -> usize {
    8
}

fn default_grid() -> usize {
    200
}

fn default_exhaustive() -> Integration {
    Integration::Exhaustive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowOptions {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_grid")]
    pub grid_per_unit: usize,
    /// Euler step of the reference flow; defaults to `min(alpha) / 50`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ref: Option<f64>,
    #[serde(default = "default_exhaustive")]
    pub integration: Integration,
    /// Also write the reference flow path(s) as CSV.
    #[serde(default)]
    pub write_paths: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            k_max: default_k_max(),
            grid_per_unit: default_grid(),
            step_ref: None,
            integration: default_exhaustive(),
            write_paths: false,
        }
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalityOptions {
    /// How the population gradient is estimated for each gap.
    #[serde(default = "default_exhaustive")]
    pub integration: Integration,
    /// Evaluate every `stride`-th iterate of the tail window.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for CriticalityOptions {
    fn default() -> Self {
        Self {
            integration: default_exhaustive(),
            stride: default_stride(),
        }
    }
}

fn default_probes() -> usize {
    100
}

fn default_instances() -> usize {
    1000
}

fn default_pairs() -> usize {
    2000
}

fn default_h() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    /// Random instances for the sorting-oracle and p-consistency suites.
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Probe points for the finite-difference gradient suite.
    #[serde(default = "default_probes")]
    pub gradient_probes: usize,
    /// Pairs per Lipschitz probe.
    #[serde(default = "default_pairs")]
    pub lipschitz_pairs: usize,
    #[serde(default = "default_h")]
    pub fd_step: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: default_instances(),
            gradient_probes: default_probes(),
            lipschitz_pairs: default_pairs(),
            fd_step: default_h(),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    /// Input measure (the law of `x`).
    pub input: MeasureSource,
    /// Data measure (the law of `y`).
    pub data: MeasureSource,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub criticality: CriticalityOptions,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Worker threads for sweeps (0 = one per core).
    #[serde(default)]
    pub workers: usize,
}

/// Values given on the command line; each replaces the document field.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub alphas: Option<Vec<f64>>,
    pub p: Option<f64>,
}

/// One `(alpha, seed)` run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub alpha: f64,
    pub seed: u64,
    pub config: SgdConfig,
}

/// A config with its network and measures loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: NetworkSpec,
    pub input: DiscreteMeasure,
    pub data: DiscreteMeasure,
}

fn parse_err(path: &Path, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    };
    std::path::absolute(&joined).unwrap_or(joined)
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn from_str_at(text: &str, origin: &Path) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| parse_err(origin, e))
        } else {
            toml::from_str(text).map_err(|e| parse_err(origin, e))
        }
    }

    /// Reads a document and makes every relative path in it (network,
    /// measures, output directory) absolute with respect to the document's
    /// directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_str_at(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let NetworkSource::File { path } = &mut self.network {
            *path = resolve(base, path);
        }
        for source in [&mut self.input, &mut self.data] {
            if let MeasureSource::File { path } = source {
                *path = resolve(base, path);
            }
        }
        self.out_dir = resolve(base, &self.out_dir);
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<()> {
        if let Some(out) = &overrides.out_dir {
            self.out_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
        if let Some(w) = overrides.workers {
            self.workers = w;
        }
        if let Some(seed) = overrides.seed {
            self.sgd.seed = seed;
            self.sweep.seeds = vec![seed];
        }
        if let Some(alphas) = &overrides.alphas {
            self.sweep.alphas = alphas.clone();
        }
        if let Some(p) = overrides.p {
            self.sgd.p = OrderP::new(p)?;
        }
        Ok(())
    }

    pub fn alphas(&self) -> Vec<f64> {
        if self.sweep.alphas.is_empty() {
            vec![self.sgd.alpha]
        } else {
            self.sweep.alphas.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.sweep.seeds.is_empty() {
            vec![self.sgd.seed]
        } else {
            self.sweep.seeds.clone()
        }
    }

    /// Every `(alpha, seed)` pair, alpha-major in list order.
    pub fn plans(&self) -> Result<Vec<RunPlan>> {
        let mut plans = Vec::new();
        for alpha in self.alphas() {
            for seed in self.seeds() {
                let mut config = self.sgd.clone();
                config.alpha = alpha;
                config.seed = seed;
                if let Some(h) = self.sweep.horizon {
                    if !(h > 0.0) || !h.is_finite() {
                        return Err(Error::InvalidArgument("sweep horizon must be positive".into()));
                    }
                    config.t_max = (h / alpha - 1e-9).ceil() as usize;
                }
                config.validate()?;
                plans.push(RunPlan { alpha, seed, config });
            }
        }
        Ok(plans)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.alphas().iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument("every alpha must be positive".into()));
        }
        if self.criticality.stride == 0 {
            return Err(Error::InvalidArgument("criticality.stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Loads the network and both measures.
    pub fn load(self) -> Result<Experiment> {
        self.validate()?;
        let spec = match &self.network {
            NetworkSource::File { path } => NetworkSpec::from_path(path)?,
            NetworkSource::Inline(doc) => NetworkSpec::from_doc(doc.clone())?,
        };
        let input = load_measure(&self.input, Some(spec.input_dim()))?;
        let data = load_measure(&self.data, Some(spec.output_dim()))?;
        Ok(Experiment {
            config: self,
            spec,
            input,
            data,
        })
    }

    /// JSON echo embedded in every artifact.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

fn load_measure(source: &MeasureSource, dim: Option<usize>) -> Result<DiscreteMeasure> {
    match source {
        MeasureSource::File { path } => DiscreteMeasure::from_csv_path(path, dim),
        MeasureSource::Inline { points, weights } => {
            let d = points.first().map_or(0, Vec::len);
            if points.iter().any(|p| p.len() != d) {
                return Err(Error::InvalidMeasure("ragged inline points".into()));
            }
            let flat: Vec<f64> = points.iter().flatten().copied().collect();
            let pts = Array2::from_shape_vec((points.len(), d), flat)
                .map_err(|e| Error::InvalidMeasure(e.to_string()))?;
            match weights {
                Some(w) => DiscreteMeasure::new(pts, Array1::from(w.clone())),
                None => DiscreteMeasure::uniform(pts),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
out_dir = "results"

[network]
layer_dims = [1, 1]
activation = "identity"
radius_u = 10.0
radius_x = 10.0
eps = 0.5

[input]
points = [[-1.0], [1.0]]

[data]
path = "data.csv"

[sgd]
alpha = 0.1
t_max = 10
n = 2
seed = 4

[sweep]
alphas = [0.1, 0.01]
seeds = [1, 2, 3]
horizon = 1.0
"#;

    #[test]
    fn parses_toml_and_resolves_paths() {
        let mut cfg = ExperimentConfig::from_str_at(DOC, Path::new("x.toml")).unwrap();
        cfg.resolve_paths(Path::new("/tmp/exp"));
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/exp/results"));
        assert_eq!(cfg.data, MeasureSource::File { path: "/tmp/exp/data.csv".into() });
        assert!(matches!(cfg.network, NetworkSource::Inline(_)));
        let plans = cfg.plans().unwrap();
        assert_eq!(plans.len(), 6);
        assert_eq!(plans[0].config.t_max, 10);
        assert_eq!(plans[5].config.t_max, 100);
        assert_eq!(plans[4].seed, 2);
    }

    #[test]
    fn json_echo_round_trips() {
        let cfg = ExperimentConfig::from_str_at(DOC, Path::new("x.toml")).unwrap();
        let back = ExperimentConfig::from_str_at(&cfg.echo(), Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::from_str_at(DOC, Path::new("x.toml")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            alphas: Some(vec![0.5]),
            p: Some(1.5),
            workers: Some(2),
            out_dir: Some("/tmp/o".into()),
        })
        .unwrap();
        assert_eq!(cfg.seeds(), vec![9]);
        assert_eq!(cfg.alphas(), vec![0.5]);
        assert_eq!(cfg.sgd.p.value(), 1.5);
        assert_eq!(cfg.workers, 2);
        assert!(cfg.apply(&Overrides { p: Some(0.5), ..Default::default() }).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = DOC.replace("seed = 4", "seed = 4\nstep = 3");
        assert!(ExperimentConfig::from_str_at(&bad, Path::new("x.toml")).is_err());
    }
}
