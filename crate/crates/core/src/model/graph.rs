use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};

/// Lag-resolved structure of one window: `k` matrices of `M x M`, entry
/// `(i, m)` of lag `j` meaning "variable `m` at `t - j` drives `i` at `t`".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullTimeGraph {
    pub max_lag: usize,
    pub vars: usize,
    /// `k * M * M` edge logits, lag-major.
    pub logits: Vec<f64>,
    /// `k * M * M` values in `[0, 1]`.
    pub samples: Vec<f64>,
}

impl FullTimeGraph {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Edge probabilities of lag `j` (1-based).
    pub fn lag_probabilities(&self, j: usize) -> Vec<f64> {
        let mm = self.vars * self.vars;
        self.logits[(j - 1) * mm..j * mm]
            .iter()
            .map(|&l| sigmoid(l))
            .collect()
    }

    /// Copy whose samples are the thresholded probabilities.
    pub fn hardened(&self, threshold: f64) -> FullTimeGraph {
        FullTimeGraph {
            samples: self
                .probabilities()
                .into_iter()
                .map(|p| if p >= threshold { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone()
        }
    }
}

/// Lag-collapsed edge probabilities (`M x M`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryGraph {
    pub vars: usize,
    pub matrix: Vec<f64>,
}

impl SummaryGraph {
    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.matrix[target * self.vars + source]
    }
}

/// Mean over lags of `sigmoid(logit)`.
pub fn summary_graph(graph: &FullTimeGraph) -> Result<SummaryGraph> {
    let mm = graph.vars * graph.vars;
    if graph.max_lag == 0 || graph.logits.len() != graph.max_lag * mm {
        return Err(Error::InvalidArgument("graph needs at least one lag".into()));
    }
    let mut matrix = vec![0.0; mm];
    for lag in graph.logits.chunks(mm) {
        for (acc, &l) in matrix.iter_mut().zip(lag) {
            *acc += sigmoid(l);
        }
    }
    let k = graph.max_lag as f64;
    matrix.iter_mut().for_each(|v| *v /= k);
    Ok(SummaryGraph {
        vars: graph.vars,
        matrix,
    })
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Difference of two standard Gumbel draws (a standard logistic variate).
pub(crate) fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let g1 = gumbel(rng);
    let g0 = gumbel(rng);
    g1 - g0
}

/// Class-1 coordinate of a two-class Gumbel-Softmax over `(logit, 0)`.
///
/// `softmax((logit + g1, g0) / temp)[0]` reduces to
/// `sigmoid((logit + g1 - g0) / temp)`.
pub fn gumbel_bernoulli_sample<R: Rng + ?Sized>(
    logit: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let x = sigmoid((logit + logistic_noise(rng)) / temperature);
    // Keep strictly inside (0, 1) even when the sigmoid saturates.
    Ok(x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Pre-drawn Gumbel noise (`g1 - g0`) for every edge of a batch, one
/// `[B, M, M]` tensor per lag. Freezing it makes the loss a deterministic
/// function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureNoise {
    pub per_lag: Vec<Tensor>,
}

impl StructureNoise {
    pub fn draw<R: Rng + ?Sized>(batch: usize, vars: usize, max_lag: usize, rng: &mut R) -> Self {
        let n = batch * vars * vars;
        let per_lag = (0..max_lag)
            .map(|_| {
                let v = (0..n).map(|_| logistic_noise(rng)).collect();
                Tensor::new(vec![batch, vars, vars], v).expect("noise shape")
            })
            .collect();
        Self { per_lag }
    }

    pub fn zeros(batch: usize, vars: usize, max_lag: usize) -> Self {
        Self {
            per_lag: vec![Tensor::zeros(&[batch, vars, vars]); max_lag],
        }
    }
}
