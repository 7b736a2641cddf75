//! The built-in toy problem: a one-dimensional affine model
//! `T(u, x) = u_0 x + u_1` (on the indicator plateau) fitted to a four-atom
//! data measure from a four-atom input measure.

use std::path::PathBuf;

use crate::cli::config::{CriticalityOptions, ExperimentConfig, FlowOptions, MeasureSource, NetworkSource, Sweep, VerifyOptions};
use crate::network::{Activation, NetworkDoc};
use crate::sgd::{Init, NoiseLaw, Scheme, SgdConfig};
use crate::swloss::{Integration, OrderP};

pub const INPUT_ATOMS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
pub const DATA_ATOMS: [f64; 4] = [0.0, 1.0, 2.0, 5.0];
pub const ALPHAS: [f64; 3] = [0.1, 0.03, 0.01];
pub const INIT: [f64; 2] = [0.3, -1.5];
pub const BATCH: usize = 2;
pub const HORIZON: f64 = 8.0;
pub const RADIUS_R: f64 = 5.0;
pub const BETA: f64 = 1.0;

pub fn network_doc() -> NetworkDoc {
    NetworkDoc {
        layer_dims: vec![1, 1],
        activation: Activation::Identity,
        output_activation: None,
        radius_u: 10.0,
        radius_x: 10.0,
        eps: 0.5,
        seed: 0,
        bias: true,
        residual: Vec::new(),
        tensors: Vec::new(),
        bias_matrices: Vec::new(),
        param_dim: None,
    }
}

fn atoms(values: &[f64]) -> MeasureSource {
    MeasureSource::Inline {
        points: values.iter().map(|v| vec![*v]).collect(),
        weights: None,
    }
}

/// Plain-SGD sweep over [`ALPHAS`] and 20 seeds on a continuous-time horizon
/// of [`HORIZON`], all runs started at [`INIT`].
pub fn experiment_config() -> ExperimentConfig {
    let mut sgd = SgdConfig::plain(ALPHAS[0], (HORIZON / ALPHAS[0]).round() as usize, BATCH, 0);
    sgd.init = Init::Point { u: INIT.to_vec() };
    sgd.p = OrderP::TWO;
    ExperimentConfig {
        network: NetworkSource::Inline(network_doc()),
        input: atoms(&INPUT_ATOMS),
        data: atoms(&DATA_ATOMS),
        sgd,
        sweep: Sweep {
            alphas: ALPHAS.to_vec(),
            seeds: (0..20).collect(),
            horizon: Some(HORIZON),
        },
        flow: FlowOptions {
            integration: Integration::Exhaustive,
            ..FlowOptions::default()
        },
        criticality: CriticalityOptions::default(),
        verify: VerifyOptions::default(),
        out_dir: PathBuf::from("out"),
        workers: 0,
    }
}

/// [`experiment_config`] with the projected-noised scheme
/// (`beta = BETA`, `r = RADIUS_R`, Gaussian noise).
pub fn criticality_config() -> ExperimentConfig {
    let mut cfg = experiment_config();
    cfg.sgd.scheme = Scheme::ProjectedNoised;
    cfg.sgd.beta = BETA;
    cfg.sgd.radius_r = Some(RADIUS_R);
    cfg.sgd.noise = NoiseLaw::Gaussian;
    cfg
}
