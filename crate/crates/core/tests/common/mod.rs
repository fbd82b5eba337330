#![allow(dead_code)]

use std::path::Path;

use gca::data::{simulate_from, DomainConfig, NoiseParam, Series, WeightedLagStructure};
use gca::model::{ModelConfig, ModelKind, ModelParams};
use gca::trainer::{Checkpoint, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noiseless(domain_id: usize) -> DomainConfig {
    DomainConfig {
        domain_id,
        noise: 0.0,
        sample_interval: 1,
        nonlinearity_c: 0.0,
        noise_param: NoiseParam::StdDev,
    }
}

/// `z_t = -z_{t-1}` from `z_0 = 1`: alternating +-1, already standardized.
pub fn flip_series(len: usize) -> Series {
    let s = WeightedLagStructure::from_weights(1, 1, vec![-1.0]).unwrap();
    let init = Series::new(1, vec![1.0]).unwrap();
    simulate_from(&[s], &noiseless(1), &init, len - 1, &mut rng(0)).unwrap()
}

/// Hand-set parameters that realize `z_t = -z_{t-1}` for one variable:
/// the edge is certain and `G(g(z))` is linear to within `eps^2`.
pub fn flip_oracle() -> ModelParams {
    let eps = 1e-3;
    let mut p = ModelParams::init(ModelConfig::new(ModelKind::Gca, 1, 1, vec![1]), &mut rng(1)).unwrap();
    let names = p.names().to_vec();
    for name in &names {
        p.get_mut(name).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p.get_mut("encoder.1.b_out").unwrap().values_mut()[0] = 30.0;
    p.get_mut("intra.w_source").unwrap().values_mut()[0] = eps;
    p.get_mut("inter.w_hidden").unwrap().values_mut()[0] = 1.0;
    p.get_mut("inter.w_out").unwrap().values_mut()[0] = -1.0 / eps;
    p
}

pub fn oracle_checkpoint(window: usize, horizon: usize) -> Checkpoint {
    Checkpoint {
        epoch: 0,
        val_mse: 0.0,
        source_domain: 1,
        target_domain: 1,
        train_config: TrainConfig {
            max_lag: 1,
            window,
            horizon,
            n_predict: 4,
            ..TrainConfig::default()
        },
        normalization: Vec::new(),
        model: flip_oracle(),
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
