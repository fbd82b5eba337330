//! Multi-domain nonlinear VAR generator.
//!
//! Each domain evolves as
//! `z_t = sum_j W_j (z_{t-j} + c sin(z_{t-j})) + eps_t`, `eps_t ~ N(0, s^2 I)`
//! over one shared set of lag structures; domains differ in noise level,
//! nonlinearity strength and sampling interval.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::series::{subsample_interval, Series};
use crate::error::{Error, Result};

/// Steps discarded at the start of every simulation.
pub const BURN_IN: usize = 200;
/// Target companion-matrix spectral radius after stabilisation.
pub const MAX_SPECTRAL_RADIUS: f64 = 0.95;
/// Smallest magnitude of a sampled nonzero weight.
pub const MIN_WEIGHT: f64 = 0.05;
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Lag-`j` edges: entry `(i, m)` set iff `z^m` at lag `j` drives `z^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedLagStructure {
    lag: usize,
    vars: usize,
    adjacency: Vec<bool>,
    weights: Vec<f64>,
}

impl WeightedLagStructure {
    pub fn new(lag: usize, vars: usize, adjacency: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        if adjacency.len() != vars * vars || weights.len() != vars * vars {
            return Err(Error::InvalidArgument(format!(
                "lag structure needs {0}x{0} entries",
                vars
            )));
        }
        if adjacency.iter().zip(&weights).any(|(&a, &w)| !a && w != 0.0) {
            return Err(Error::InvalidArgument(
                "nonzero weight on an absent edge".into(),
            ));
        }
        Ok(Self {
            lag,
            vars,
            adjacency,
            weights,
        })
    }

    /// Builds a structure from a dense weight matrix; nonzeros become edges.
    pub fn from_weights(lag: usize, vars: usize, weights: Vec<f64>) -> Result<Self> {
        let adjacency = weights.iter().map(|&w| w != 0.0).collect();
        Self::new(lag, vars, adjacency, weights)
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn has_edge(&self, target: usize, source: usize) -> bool {
        self.adjacency[target * self.vars + source]
    }

    pub fn weight(&self, target: usize, source: usize) -> f64 {
        self.weights[target * self.vars + source]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a).count()
    }

    fn scale_weights(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
    }
}

/// Samples `k` lag structures with i.i.d. Bernoulli(`density`) edges and
/// weights uniform in `[-scale, -0.05] U [0.05, scale]`, then shrinks all
/// weights uniformly until the linear part is stable.
pub fn sample_structures<R: Rng + ?Sized>(
    vars: usize,
    max_lag: usize,
    density: f64,
    weight_scale: f64,
    rng: &mut R,
) -> Result<Vec<WeightedLagStructure>> {
    if vars == 0 || max_lag == 0 {
        return Err(Error::InvalidArgument("M and k must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidArgument(format!("density {density} outside [0, 1]")));
    }
    if !(weight_scale > MIN_WEIGHT) {
        return Err(Error::InvalidArgument(format!(
            "weight scale must exceed {MIN_WEIGHT}, got {weight_scale}"
        )));
    }
    let mut structures = (1..=max_lag)
        .map(|lag| {
            let mut adjacency = Vec::with_capacity(vars * vars);
            let mut weights = Vec::with_capacity(vars * vars);
            for _ in 0..vars * vars {
                let edge = rng.random_bool(density);
                adjacency.push(edge);
                weights.push(if edge {
                    let magnitude = rng.random_range(MIN_WEIGHT..=weight_scale);
                    if rng.random_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                } else {
                    0.0
                });
            }
            WeightedLagStructure::new(lag, vars, adjacency, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    stabilize(&mut structures, MAX_SPECTRAL_RADIUS);
    Ok(structures)
}

/// Spectral radius of the companion matrix `[W_1 .. W_k; I 0]`.
pub fn spectral_radius(structures: &[WeightedLagStructure]) -> f64 {
    let Some(first) = structures.first() else {
        return 0.0;
    };
    let m = first.vars;
    let n = m * structures.len();
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for (j, s) in structures.iter().enumerate() {
        for i in 0..m {
            for src in 0..m {
                companion[(i, j * m + src)] = s.weight(i, src);
            }
        }
    }
    for r in m..n {
        companion[(r, r - m)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Uniformly rescales all weights until the spectral radius is `<= target`.
pub fn stabilize(structures: &mut [WeightedLagStructure], target: f64) {
    for _ in 0..200 {
        let rho = spectral_radius(structures);
        if rho <= target {
            return;
        }
        let factor = target / rho * (1.0 - 1e-9);
        structures.iter_mut().for_each(|s| s.scale_weights(factor));
    }
}

/// Multiplies every weight by an i.i.d. Uniform[0.8, 1.2] factor and
/// re-stabilises. Gives each domain its own causal strengths over the shared
/// edge set.
pub fn perturb_weights<R: Rng + ?Sized>(
    structures: &[WeightedLagStructure],
    rng: &mut R,
) -> Vec<WeightedLagStructure> {
    let mut out: Vec<WeightedLagStructure> = structures
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.weights
                .iter_mut()
                .for_each(|w| *w *= rng.random_range(0.8..=1.2));
            s
        })
        .collect();
    stabilize(&mut out, MAX_SPECTRAL_RADIUS);
    out
}

/// How `noise` in a [`DomainConfig`] is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseParam {
    /// `phi` is the standard deviation of the additive noise.
    #[default]
    StdDev,
    /// `phi` is the variance; the standard deviation is `sqrt(phi)`.
    Variance,
}

/// Per-domain generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain_id: usize,
    /// Noise level `phi`; see `noise_param`.
    pub noise: f64,
    pub sample_interval: usize,
    pub nonlinearity_c: f64,
    #[serde(default)]
    pub noise_param: NoiseParam,
}

impl DomainConfig {
    /// Presets for domains 1, 2 and 3.
    pub fn preset(domain_id: usize) -> Result<Self> {
        let (noise, sample_interval, nonlinearity_c) = match domain_id {
            1 => (1.0, 1, 0.02),
            2 => (5.0, 2, 0.04),
            3 => (10.0, 3, 0.06),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "no preset for domain {other}; presets exist for 1, 2, 3"
                )))
            }
        };
        Ok(Self {
            domain_id,
            noise,
            sample_interval,
            nonlinearity_c,
            noise_param: NoiseParam::StdDev,
        })
    }

    pub fn noise_std(&self) -> f64 {
        match self.noise_param {
            NoiseParam::StdDev => self.noise,
            NoiseParam::Variance => self.noise.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_interval == 0 {
            return Err(Error::InvalidArgument("sample interval must be >= 1".into()));
        }
        if !(self.noise >= 0.0) || !(self.nonlinearity_c >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise and nonlinearity must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_structures(structures: &[WeightedLagStructure]) -> Result<usize> {
    let m = structures
        .first()
        .ok_or_else(|| Error::InvalidArgument("no lag structures".into()))?
        .vars;
    if structures.iter().any(|s| s.vars != m) {
        return Err(Error::InvalidArgument("lag structures disagree on M".into()));
    }
    Ok(m)
}

/// Runs the recursion from explicit initial rows (oldest first), appending
/// `steps` new rows. No burn-in is applied.
pub fn simulate_from<R: Rng + ?Sized>(
    structures: &[WeightedLagStructure],
    config: &DomainConfig,
    initial: &Series,
    steps: usize,
    rng: &mut R,
) -> Result<Series> {
    config.validate()?;
    let m = check_structures(structures)?;
    let k = structures.len();
    if initial.vars() != m || initial.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least {k} initial rows of {m} variables"
        )));
    }
    let sd = config.noise_std();
    let c = config.nonlinearity_c;
    let mut series = initial.clone();
    let mut next = vec![0.0; m];
    let mut lagged = vec![0.0; m];
    for step in 0..steps {
        let t = series.len();
        next.iter_mut().for_each(|v| *v = 0.0);
        for s in structures {
            let prev = series.row(t - s.lag);
            for (l, &z) in lagged.iter_mut().zip(prev) {
                *l = z + c * z.sin();
            }
            for (i, out) in next.iter_mut().enumerate() {
                *out += (0..m).map(|src| s.weight(i, src) * lagged[src]).sum::<f64>();
            }
        }
        if sd > 0.0 {
            for v in next.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += sd * e;
            }
        }
        if next.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::UnstableSystem { step });
        }
        series.push_row(&next);
    }
    Ok(series)
}

/// Simulates `length` rows after a [`BURN_IN`]-step warm-up started from
/// i.i.d. standard normal initial states.
pub fn simulate_domain<R: Rng + ?Sized>(
    structures: &[WeightedLagStructure],
    config: &DomainConfig,
    length: usize,
    rng: &mut R,
) -> Result<Series> {
    let m = check_structures(structures)?;
    let k = structures.len();
    if length <= k {
        return Err(Error::InvalidArgument(format!(
            "length {length} must exceed the maximum lag {k}"
        )));
    }
    let init: Vec<f64> = (0..k * m).map(|_| StandardNormal.sample(rng)).collect();
    let initial = Series::new(m, init)?;
    let total = BURN_IN + length;
    let full = simulate_from(structures, config, &initial, total - k, rng)?;
    Ok(full.rows_from(BURN_IN))
}

/// Generates every domain from one shared structure set. Each domain is
/// simulated for `length * interval` steps and then subsampled, so all
/// returned series have `length` rows.
pub fn generate_domains<R: Rng + ?Sized>(
    structures: &[WeightedLagStructure],
    configs: &[DomainConfig],
    length: usize,
    perturb: bool,
    rng: &mut R,
) -> Result<Vec<Series>> {
    configs
        .iter()
        .map(|cfg| {
            cfg.validate()?;
            let own;
            let used = if perturb {
                own = perturb_weights(structures, rng);
                &own[..]
            } else {
                structures
            };
            let raw = simulate_domain(used, cfg, length * cfg.sample_interval, rng)?;
            subsample_interval(&raw, cfg.sample_interval)
        })
        .collect()
}

/// Serializable ground-truth lag structures (`k x M x M`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "M")]
    pub vars: usize,
    pub k: usize,
    pub adjacency: Vec<Vec<Vec<u8>>>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    pub fn from_structures(structures: &[WeightedLagStructure]) -> Result<Self> {
        let m = check_structures(structures)?;
        let nest = |f: &dyn Fn(&WeightedLagStructure, usize, usize) -> f64| {
            structures
                .iter()
                .map(|s| (0..m).map(|i| (0..m).map(|j| f(s, i, j)).collect()).collect())
                .collect::<Vec<Vec<Vec<f64>>>>()
        };
        let weights = nest(&|s, i, j| s.weight(i, j));
        let adjacency = nest(&|s, i, j| s.has_edge(i, j) as u8 as f64)
            .into_iter()
            .map(|l| l.into_iter().map(|r| r.into_iter().map(|v| v as u8).collect()).collect())
            .collect();
        Ok(Self {
            vars: m,
            k: structures.len(),
            adjacency,
            weights,
        })
    }

    pub fn to_structures(&self) -> Result<Vec<WeightedLagStructure>> {
        if self.adjacency.len() != self.k || self.weights.len() != self.k {
            return Err(Error::Data("ground truth lag count mismatch".into()));
        }
        (0..self.k)
            .map(|j| {
                let adj: Vec<bool> = self.adjacency[j].concat().iter().map(|&a| a != 0).collect();
                let w = self.weights[j].concat();
                WeightedLagStructure::new(j + 1, self.vars, adj, w)
            })
            .collect()
    }

    /// Flat lag-resolved adjacency (`k * M * M`, lag-major).
    pub fn flat_adjacency(&self) -> Vec<bool> {
        self.adjacency
            .iter()
            .flat_map(|l| l.iter().flat_map(|r| r.iter().map(|&a| a != 0)))
            .collect()
    }

    /// Summary adjacency: an edge if any lag carries it.
    pub fn summary_adjacency(&self) -> Vec<bool> {
        let m = self.vars;
        (0..m * m)
            .map(|e| self.adjacency.iter().any(|l| l[e / m][e % m] != 0))
            .collect()
    }
}
