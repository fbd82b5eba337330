//! Recurrent Granger-causality VAE.
//!
//! A per-lag encoder turns the last `k` history steps and a domain code
//! `alpha` into Bernoulli edge logits for `A_1..A_k`, each lag conditioned on
//! the samples already drawn for earlier lags. The decoder masks lagged
//! inputs by each `A_j`, maps them through a per-variable network `g` that
//! also sees the domain strength code `beta`, and aggregates the `k` effects
//! with `G` into a one-step prediction.
//!
//! Everything is batched: a [`Batch`] holds `B` histories of one domain and
//! the network functions in [`network`] record their work on a tape so the
//! objectives can differentiate through them. The functions in this module
//! wrap those for single histories.

mod graph;
pub mod network;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use graph::{gumbel_bernoulli_sample, summary_graph, FullTimeGraph, StructureNoise, SummaryGraph};
pub use network::{Batch, Sampling, TapeStructures};
pub use params::{BoundParams, DomainEmbedding, ModelParams};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Full model or the structure-free baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gca,
    /// Same decoder with every mask fixed to one and no domain codes.
    Baseline,
}

/// Architecture hyperparameters; fixed for the lifetime of a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vars: usize,
    pub max_lag: usize,
    /// Domain ids in embedding-table order.
    pub domains: Vec<usize>,
    #[serde(default = "default_code_dim")]
    pub alpha_dim: usize,
    #[serde(default = "default_code_dim")]
    pub beta_dim: usize,
    #[serde(default = "default_effect_width")]
    pub effect_width: usize,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_hidden")]
    pub aggregator_hidden: usize,
    #[serde(default = "default_prior")]
    pub prior_edge_prob: f64,
    #[serde(default = "default_decoder_std")]
    pub decoder_std: f64,
    /// Edge probability at or above which hard mode keeps an edge.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Initial value of the encoder output biases (edge logits).
    #[serde(default)]
    pub encoder_bias_init: f64,
}

fn default_code_dim() -> usize {
    4
}
fn default_effect_width() -> usize {
    3
}
fn default_hidden() -> usize {
    16
}
fn default_prior() -> f64 {
    0.1
}
fn default_decoder_std() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.5
}

impl ModelConfig {
    pub fn new(kind: ModelKind, vars: usize, max_lag: usize, domains: Vec<usize>) -> Self {
        Self {
            kind,
            vars,
            max_lag,
            domains,
            alpha_dim: default_code_dim(),
            beta_dim: default_code_dim(),
            effect_width: default_effect_width(),
            encoder_hidden: default_hidden(),
            aggregator_hidden: default_hidden(),
            prior_edge_prob: default_prior(),
            decoder_std: default_decoder_std(),
            threshold: default_threshold(),
            encoder_bias_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vars", self.vars),
            ("max_lag", self.max_lag),
            ("alpha_dim", self.alpha_dim),
            ("beta_dim", self.beta_dim),
            ("effect_width", self.effect_width),
            ("encoder_hidden", self.encoder_hidden),
            ("aggregator_hidden", self.aggregator_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.domains.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one domain".into()));
        }
        let mut ids = self.domains.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::InvalidArgument("duplicate domain ids".into()));
        }
        if !(self.prior_edge_prob > 0.0 && self.prior_edge_prob < 1.0) {
            return Err(Error::InvalidArgument("prior edge probability must be in (0,1)".into()));
        }
        if !(self.decoder_std > 0.0) || !self.decoder_std.is_finite() {
            return Err(Error::InvalidArgument("decoder std must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument("threshold must be in (0,1)".into()));
        }
        if !self.encoder_bias_init.is_finite() {
            return Err(Error::InvalidArgument("encoder bias init must be finite".into()));
        }
        Ok(())
    }
}

/// How forecasts treat structure samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    /// One relaxed Gumbel sample per lag at the given temperature.
    Stochastic,
    /// Edge probabilities thresholded to {0, 1}.
    Hard,
}

fn check_history(history: &[f64], vars: usize, max_lag: usize) -> Result<usize> {
    if vars == 0 || history.len() % vars != 0 {
        return Err(Error::Shape {
            op: "history",
            lhs: vec![history.len()],
            rhs: vec![vars],
        });
    }
    let t = history.len() / vars;
    if t < max_lag {
        return Err(Error::InvalidArgument(format!(
            "history of {t} steps is shorter than max lag {max_lag}"
        )));
    }
    Ok(t)
}

/// Samples `A_1..A_k` for one history (`T x M`, row-major) with relaxed
/// Gumbel-Bernoulli draws at `temperature`.
pub fn encode_structures<R: Rng + ?Sized>(
    history: &[f64],
    domain_id: usize,
    params: &ModelParams,
    temperature: f64,
    rng: &mut R,
) -> Result<FullTimeGraph> {
    let c = params.config();
    check_history(history, c.vars, c.max_lag)?;
    let noise = StructureNoise::draw(1, c.vars, c.max_lag, rng);
    encode_with(history, domain_id, params, Sampling::Relaxed { temperature, noise: &noise })
}

/// Encodes one history under an explicit sampling mode.
pub fn encode_with(
    history: &[f64],
    domain_id: usize,
    params: &ModelParams,
    sampling: Sampling<'_>,
) -> Result<FullTimeGraph> {
    let c = params.config();
    check_history(history, c.vars, c.max_lag)?;
    let batch = Batch::from_history(history, c.vars)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let s = network::encode(&bound, &batch, domain_id, sampling)?;
    Ok(s.to_graphs()?.remove(0))
}

/// Effect of one lag: `M x h`, row `i` is target `i`'s view of `z_lag`
/// through row `i` of `a_j`, with strength code `beta`.
pub fn intra_lag_effect(
    z_lag: &[f64],
    a_j: &[f64],
    beta: &[f64],
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let c = params.config();
    let m = c.vars;
    let shape_err = |op| Error::Shape {
        op,
        lhs: vec![z_lag.len(), a_j.len(), beta.len()],
        rhs: vec![m, m * m, c.beta_dim],
    };
    if z_lag.len() != m {
        return Err(shape_err("intra_lag_effect z"));
    }
    if a_j.len() != m * m {
        return Err(shape_err("intra_lag_effect mask"));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let beta_term = match c.kind {
        ModelKind::Gca => {
            if beta.len() != c.beta_dim {
                return Err(shape_err("intra_lag_effect beta"));
            }
            let b = tape.constant(Tensor::new(vec![1, c.beta_dim], beta.to_vec())?);
            Some(network::beta_effect(&bound, &b)?)
        }
        ModelKind::Baseline => None,
    };
    let z = tape.constant(Tensor::new(vec![1, 1, 1, m], z_lag.to_vec())?);
    let mask = tape.constant(Tensor::new(vec![1, m, m], a_j.to_vec())?);
    let e = network::lag_effect(&bound, &z, &mask, beta_term.as_ref())?;
    Ok(e.value().values().to_vec())
}

/// Combines `k` lag effects (each `M x h`) into one prediction per variable.
pub fn inter_lag_aggregate(effects: &[Vec<f64>], params: &ModelParams) -> Result<Vec<f64>> {
    let c = params.config();
    if effects.len() != c.max_lag {
        return Err(Error::InvalidArgument(format!(
            "expected {} lag effects, got {}",
            c.max_lag,
            effects.len()
        )));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let vars = effects
        .iter()
        .map(|e| {
            Tensor::new(vec![1, c.vars, 1, c.effect_width], e.clone()).map(|t| tape.constant(t))
        })
        .collect::<Result<Vec<Var>>>()?;
    let out = network::aggregate(&bound, &vars)?;
    Ok(out.value().values().to_vec())
}

/// Predicts the step after `history` using the samples stored in `graph`.
pub fn one_step_predict(
    history: &[f64],
    graph: &FullTimeGraph,
    domain_id: usize,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    rollout_with_graph(history, graph, domain_id, params, 1)
}

/// Autoregressive rollout of `horizon` steps (`horizon x M`, row-major).
/// Structures are encoded once from the original history.
pub fn forecast<R: Rng + ?Sized>(
    history: &[f64],
    horizon: usize,
    domain_id: usize,
    params: &ModelParams,
    mode: ForecastMode,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be >= 1".into()));
    }
    let c = params.config();
    check_history(history, c.vars, c.max_lag)?;
    let batch = Batch::from_history(history, c.vars)?;
    let noise;
    let sampling = match mode {
        ForecastMode::Hard => Sampling::Hard,
        ForecastMode::Stochastic => {
            noise = StructureNoise::draw(1, c.vars, c.max_lag, rng);
            Sampling::Relaxed {
                temperature,
                noise: &noise,
            }
        }
    };
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let s = network::encode(&bound, &batch, domain_id, sampling)?;
    let steps = network::rollout(&bound, &batch, &s.samples, domain_id, horizon)?;
    Ok(steps
        .iter()
        .flat_map(|s| s.value().values().to_vec())
        .collect())
}

fn rollout_with_graph(
    history: &[f64],
    graph: &FullTimeGraph,
    domain_id: usize,
    params: &ModelParams,
    horizon: usize,
) -> Result<Vec<f64>> {
    let c = params.config();
    check_history(history, c.vars, c.max_lag)?;
    if graph.vars != c.vars || graph.max_lag != c.max_lag {
        return Err(Error::Shape {
            op: "graph",
            lhs: vec![graph.max_lag, graph.vars],
            rhs: vec![c.max_lag, c.vars],
        });
    }
    let batch = Batch::from_history(history, c.vars)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let m = c.vars;
    let samples = (0..c.max_lag)
        .map(|j| {
            let lag = graph.samples[j * m * m..(j + 1) * m * m].to_vec();
            Tensor::new(vec![1, m, m], lag).map(|t| tape.constant(t))
        })
        .collect::<Result<Vec<Var>>>()?;
    let steps = network::rollout(&bound, &batch, &samples, domain_id, horizon)?;
    Ok(steps
        .iter()
        .flat_map(|s| s.value().values().to_vec())
        .collect())
}
