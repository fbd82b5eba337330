//! Batched encoder and decoder recorded on a tape.
//!
//! Shape conventions: `B` windows, `M` variables, `k` lags, `n` predicted
//! positions, `h` effect width. Lagged inputs are `[B, 1, n, M]`, masks
//! `[B, M, M]` (row = target), lag effects `[B, M, n, h]` and predictions
//! `[B, M, n, 1]`.

use std::collections::VecDeque;

use super::graph::{FullTimeGraph, StructureNoise};
use super::params::BoundParams;
use super::ModelKind;
use crate::autodiff::{sigmoid, Tensor, Var};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};

/// `B` same-shaped histories (and optional forecast targets) from one domain.
#[derive(Clone, Debug)]
pub struct Batch {
    size: usize,
    vars: usize,
    history_len: usize,
    horizon: usize,
    histories: Vec<f64>,
    targets: Vec<f64>,
}

impl Batch {
    pub fn from_windows(windows: &[&TimeSeriesWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (vars, history_len, horizon) = (first.vars, first.history_len(), first.horizon());
        let mut histories = Vec::with_capacity(windows.len() * history_len * vars);
        let mut targets = Vec::with_capacity(windows.len() * horizon * vars);
        for w in windows {
            if w.vars != vars || w.history_len() != history_len || w.horizon() != horizon {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: vec![w.history_len(), w.horizon(), w.vars],
                    rhs: vec![history_len, horizon, vars],
                });
            }
            histories.extend_from_slice(&w.history);
            targets.extend_from_slice(&w.target);
        }
        Ok(Self {
            size: windows.len(),
            vars,
            history_len,
            horizon,
            histories,
            targets,
        })
    }

    /// A single history without targets.
    pub fn from_history(history: &[f64], vars: usize) -> Result<Self> {
        if vars == 0 || history.is_empty() || history.len() % vars != 0 {
            return Err(Error::Shape {
                op: "history",
                lhs: vec![history.len()],
                rhs: vec![vars],
            });
        }
        Ok(Self {
            size: 1,
            vars,
            history_len: history.len() / vars,
            horizon: 0,
            histories: history.to_vec(),
            targets: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn hist(&self, b: usize, t: usize) -> &[f64] {
        let base = (b * self.history_len + t) * self.vars;
        &self.histories[base..base + self.vars]
    }

    fn need(&self, steps: usize) -> Result<()> {
        if self.history_len < steps {
            return Err(Error::InvalidArgument(format!(
                "history of {} steps, need at least {steps}",
                self.history_len
            )));
        }
        Ok(())
    }

    /// `[B, k*M]`: rows `T-1, T-2, ..., T-k` of each history, concatenated.
    pub fn encoder_input(&self, max_lag: usize) -> Result<Tensor> {
        self.need(max_lag)?;
        let t = self.history_len;
        let mut v = Vec::with_capacity(self.size * max_lag * self.vars);
        for b in 0..self.size {
            for j in 1..=max_lag {
                v.extend_from_slice(self.hist(b, t - j));
            }
        }
        Tensor::new(vec![self.size, max_lag * self.vars], v)
    }

    /// Per lag `j`, the `[B, 1, n, M]` inputs for predicting rows
    /// `T-n .. T-1` from the row `j` steps earlier.
    pub fn lagged_inputs(&self, max_lag: usize, n: usize) -> Result<Vec<Tensor>> {
        self.need(max_lag + n)?;
        let t = self.history_len;
        (1..=max_lag)
            .map(|j| {
                let mut v = Vec::with_capacity(self.size * n * self.vars);
                for b in 0..self.size {
                    for s in 0..n {
                        v.extend_from_slice(self.hist(b, t - n + s - j));
                    }
                }
                Tensor::new(vec![self.size, 1, n, self.vars], v)
            })
            .collect()
    }

    /// `[B, M, n, 1]` true values of rows `T-n .. T-1`.
    pub fn teacher_targets(&self, n: usize) -> Result<Tensor> {
        self.need(n)?;
        let t = self.history_len;
        let mut v = Vec::with_capacity(self.size * self.vars * n);
        for b in 0..self.size {
            for i in 0..self.vars {
                for s in 0..n {
                    v.push(self.hist(b, t - n + s)[i]);
                }
            }
        }
        Tensor::new(vec![self.size, self.vars, n, 1], v)
    }

    /// Per lag `j`, row `T-j` as `[B, 1, 1, M]`.
    pub fn last_rows(&self, max_lag: usize) -> Result<Vec<Tensor>> {
        self.need(max_lag)?;
        let t = self.history_len;
        (1..=max_lag)
            .map(|j| {
                let v = (0..self.size)
                    .flat_map(|b| self.hist(b, t - j).to_vec())
                    .collect();
                Tensor::new(vec![self.size, 1, 1, self.vars], v)
            })
            .collect()
    }

    fn check_targets(&self, steps: usize) -> Result<()> {
        if steps == 0 || steps > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "batch has {} target steps, asked for {steps}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// `[B, 1, 1, steps]` targets of variable `m`.
    pub fn target_variable(&self, m: usize, steps: usize) -> Result<Tensor> {
        self.check_targets(steps)?;
        if m >= self.vars {
            return Err(Error::InvalidArgument(format!("no variable {m}")));
        }
        let mut v = Vec::with_capacity(self.size * steps);
        for b in 0..self.size {
            for s in 0..steps {
                v.push(self.targets[(b * self.horizon + s) * self.vars + m]);
            }
        }
        Tensor::new(vec![self.size, 1, 1, steps], v)
    }

    /// `[B, 1, 1, steps*M]` targets, step-major.
    pub fn targets_flat(&self, steps: usize) -> Result<Tensor> {
        self.check_targets(steps)?;
        let per = steps * self.vars;
        let v = (0..self.size)
            .flat_map(|b| {
                let base = b * self.horizon * self.vars;
                self.targets[base..base + per].to_vec()
            })
            .collect();
        Tensor::new(vec![self.size, 1, 1, per], v)
    }
}

/// How the encoder turns logits into the masks the decoder uses.
#[derive(Clone, Copy, Debug)]
pub enum Sampling<'a> {
    /// Relaxed Gumbel-Bernoulli samples from frozen noise.
    Relaxed {
        temperature: f64,
        noise: &'a StructureNoise,
    },
    /// Edge probabilities thresholded at the configured level (no gradient).
    Hard,
    /// The edge probabilities themselves.
    Expected,
}

/// Structures for every window of a batch, still on the tape.
pub struct TapeStructures {
    /// Per lag `[B, M, M]`; empty for the baseline.
    pub logits: Vec<Var>,
    /// Per lag `[B, M, M]` (or `[1, M, M]` ones for the baseline).
    pub samples: Vec<Var>,
}

impl TapeStructures {
    /// Batch mean of the lag-averaged edge probabilities, `[M, M]`.
    pub fn summary(&self) -> Result<Var> {
        let first = self
            .logits
            .first()
            .ok_or_else(|| Error::InvalidArgument("model has no learned structures".into()))?;
        let b = first.shape()[0] as f64;
        let k = self.logits.len() as f64;
        let mut acc = first.sigmoid()?;
        for l in &self.logits[1..] {
            acc = acc.add(&l.sigmoid()?)?;
        }
        acc.sum_axis(0)?.scale(1.0 / (b * k))
    }

    /// Detaches each window's structure.
    pub fn to_graphs(&self) -> Result<Vec<FullTimeGraph>> {
        let first = self
            .logits
            .first()
            .ok_or_else(|| Error::InvalidArgument("model has no learned structures".into()))?;
        let (b, m) = (first.shape()[0], first.shape()[1]);
        let k = self.logits.len();
        let mm = m * m;
        Ok((0..b)
            .map(|w| {
                let take = |vs: &[Var]| -> Vec<f64> {
                    vs.iter()
                        .flat_map(|v| v.value().values()[w * mm..(w + 1) * mm].to_vec())
                        .collect()
                };
                FullTimeGraph {
                    max_lag: k,
                    vars: m,
                    logits: take(&self.logits),
                    samples: take(&self.samples),
                }
            })
            .collect())
    }
}

/// Samples `A_1..A_k` lag by lag; lag `j` sees the samples of lags `< j`.
pub fn encode(
    bound: &BoundParams<'_>,
    batch: &Batch,
    domain_id: usize,
    sampling: Sampling<'_>,
) -> Result<TapeStructures> {
    let params = bound.params();
    let c = params.config();
    let row = params.domain_index(domain_id)?;
    let (b, m, k) = (batch.size(), c.vars, c.max_lag);
    if batch.vars() != m {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![batch.vars()],
            rhs: vec![m],
        });
    }
    let tape = bound.tape();
    if c.kind == ModelKind::Baseline {
        let ones = tape.constant(Tensor::ones(&[1, m, m]));
        return Ok(TapeStructures {
            logits: Vec::new(),
            samples: vec![ones; k],
        });
    }
    if let Sampling::Relaxed { temperature, noise } = sampling {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if noise.per_lag.len() != k || noise.per_lag.iter().any(|t| t.shape() != [b, m, m]) {
            return Err(Error::Shape {
                op: "structure noise",
                lhs: noise.per_lag.first().map_or(vec![], |t| t.shape().to_vec()),
                rhs: vec![b, m, m],
            });
        }
    }
    let layout = params.layout();
    let hist = tape.constant(batch.encoder_input(k)?);
    let alpha_idx = layout.alpha.expect("gca layout has alpha");
    let alpha = bound.var(alpha_idx).slice(0, row, 1)?;
    let mut logits = Vec::with_capacity(k);
    let mut samples = Vec::with_capacity(k);
    let mut flat_samples: Vec<Var> = Vec::with_capacity(k);
    for (j, enc) in layout.encoders.iter().enumerate() {
        let mut pre = hist
            .matmul(bound.var(enc.w_history))?
            .add(&alpha.matmul(bound.var(enc.w_alpha))?)?
            .add(bound.var(enc.b_hidden))?;
        if let Some(ws) = enc.w_samples {
            let prev = Var::concat(&flat_samples)?;
            pre = pre.add(&prev.matmul(bound.var(ws))?)?;
        }
        let logit = pre
            .tanh()?
            .matmul(bound.var(enc.w_out))?
            .add(bound.var(enc.b_out))?
            .reshape(&[b, m, m])?;
        let sample = match sampling {
            Sampling::Relaxed { temperature, noise } => {
                let g = tape.constant(noise.per_lag[j].clone());
                logit.add(&g)?.scale(1.0 / temperature)?.sigmoid()?
            }
            Sampling::Hard => {
                let v = logit
                    .value()
                    .values()
                    .iter()
                    .map(|&l| if sigmoid(l) >= c.threshold { 1.0 } else { 0.0 })
                    .collect();
                tape.constant(Tensor::new(vec![b, m, m], v)?)
            }
            Sampling::Expected => logit.sigmoid()?,
        };
        flat_samples.push(sample.reshape(&[b, m * m])?);
        logits.push(logit);
        samples.push(sample);
    }
    Ok(TapeStructures { logits, samples })
}

/// `beta [1, d_beta]` mapped to the additive term `[M, 1, h]` of `g`.
pub fn beta_effect(bound: &BoundParams<'_>, beta: &Var) -> Result<Var> {
    let idx = bound
        .params()
        .layout()
        .g_beta
        .ok_or_else(|| Error::InvalidArgument("baseline model has no strength code".into()))?;
    beta.matmul(bound.var(idx))
}

/// The strength term of `domain_id`, or `None` for the baseline.
pub fn domain_beta_effect(bound: &BoundParams<'_>, domain_id: usize) -> Result<Option<Var>> {
    let params = bound.params();
    let row = params.domain_index(domain_id)?;
    match params.layout().beta {
        Some(idx) => {
            let beta = bound.var(idx).slice(0, row, 1)?;
            beta_effect(bound, &beta).map(Some)
        }
        None => Ok(None),
    }
}

/// `g`: masks `z [B, 1, n, M]` by each target's row of `mask [B, M, M]` and
/// maps it to `[B, M, n, h]`.
pub fn lag_effect(
    bound: &BoundParams<'_>,
    z: &Var,
    mask: &Var,
    beta_term: Option<&Var>,
) -> Result<Var> {
    let layout = bound.params().layout();
    let ms = mask.shape();
    if ms.len() != 3 || ms[1] != ms[2] {
        return Err(Error::Shape {
            op: "lag_effect mask",
            lhs: ms.to_vec(),
            rhs: vec![0, ms.get(1).copied().unwrap_or(0), ms.get(1).copied().unwrap_or(0)],
        });
    }
    let m = ms[1];
    let mask = mask.reshape(&[ms[0], m, 1, m])?;
    let mut pre = z
        .mul(&mask)?
        .matmul(bound.var(layout.g_source))?
        .add(bound.var(layout.g_bias))?;
    if let Some(bt) = beta_term {
        pre = pre.add(bt)?;
    }
    pre.tanh()
}

/// `G`: concatenates `k` effects `[B, M, n, h]` per variable and maps them
/// to predictions `[B, M, n, 1]`.
pub fn aggregate(bound: &BoundParams<'_>, effects: &[Var]) -> Result<Var> {
    let layout = bound.params().layout();
    let k = bound.params().config().max_lag;
    if effects.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} lag effects, got {}",
            effects.len()
        )));
    }
    Var::concat(effects)?
        .matmul(bound.var(layout.agg_w1))?
        .add(bound.var(layout.agg_b1))?
        .tanh()?
        .matmul(bound.var(layout.agg_w2))?
        .add(bound.var(layout.agg_b2))
}

/// One-step predictions of the last `n` history rows from their true
/// predecessors, `[B, M, n, 1]`.
pub fn teacher_forced(
    bound: &BoundParams<'_>,
    batch: &Batch,
    samples: &[Var],
    domain_id: usize,
    n: usize,
) -> Result<Var> {
    let k = bound.params().config().max_lag;
    let tape = bound.tape();
    let beta = domain_beta_effect(bound, domain_id)?;
    let inputs = batch.lagged_inputs(k, n)?;
    let effects = inputs
        .into_iter()
        .zip(samples)
        .map(|(z, a)| lag_effect(bound, &tape.constant(z), a, beta.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    aggregate(bound, &effects)
}

/// Autoregressive rollout from the end of each history. Returns one
/// `[B, 1, 1, M]` prediction per step.
pub fn rollout(
    bound: &BoundParams<'_>,
    batch: &Batch,
    samples: &[Var],
    domain_id: usize,
    steps: usize,
) -> Result<Vec<Var>> {
    let c = bound.params().config();
    let (k, m) = (c.max_lag, c.vars);
    if samples.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} lag structures, got {}",
            samples.len()
        )));
    }
    let tape = bound.tape();
    let beta = domain_beta_effect(bound, domain_id)?;
    let mut recent: VecDeque<Var> = batch
        .last_rows(k)?
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let effects = recent
            .iter()
            .zip(samples)
            .map(|(z, a)| lag_effect(bound, z, a, beta.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let pred = aggregate(bound, &effects)?;
        let row = pred.reshape(&[pred.shape()[0], 1, 1, m])?;
        recent.pop_back();
        recent.push_front(row.clone());
        out.push(row);
    }
    Ok(out)
}
