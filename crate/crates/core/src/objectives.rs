//! Training objectives: the recurrent ELBO, structure KL, summary-graph
//! alignment, sparsity, strengthen loss and their weighted total.
//!
//! Scalar reference versions operate on plain slices; the `tape_*` versions
//! build the same quantities on a tape for a whole batch.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::model::network::{self, Batch, Sampling, TapeStructures};
use crate::model::{BoundParams, FullTimeGraph, ModelKind, ModelParams, StructureNoise, SummaryGraph};

/// Clamp applied to edge probabilities and the prior before the KL.
pub const KL_CLAMP: f64 = 1e-6;

/// `sum_i [-(z_i - zhat_i)^2 / (2 sigma^2) - ln(sigma sqrt(2 pi))]`.
pub fn reconstruction_loglik(z: &[f64], zhat: &[f64], sigma: f64) -> Result<f64> {
    if z.len() != zhat.len() {
        return Err(Error::Shape {
            op: "reconstruction_loglik",
            lhs: vec![z.len()],
            rhs: vec![zhat.len()],
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("decoder std must be > 0, got {sigma}")));
    }
    let norm = (sigma * (2.0 * PI).sqrt()).ln();
    Ok(z.iter()
        .zip(zhat)
        .map(|(a, b)| -0.5 * ((a - b) / sigma).powi(2) - norm)
        .sum())
}

/// `KL(Bernoulli(q) || Bernoulli(p0))` with both clamped to `[1e-6, 1-1e-6]`.
pub fn bernoulli_kl(q: f64, p0: f64) -> f64 {
    let q = q.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    let p = p0.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

fn check_pair(s: &SummaryGraph, t: &SummaryGraph) -> Result<()> {
    if s.vars != t.vars || s.matrix.len() != t.matrix.len() {
        return Err(Error::Shape {
            op: "summary pair",
            lhs: vec![s.vars, s.vars],
            rhs: vec![t.vars, t.vars],
        });
    }
    Ok(())
}

/// Mean absolute difference between the two summaries.
pub fn alignment_loss(source: &SummaryGraph, target: &SummaryGraph) -> Result<f64> {
    check_pair(source, target)?;
    let n = source.matrix.len() as f64;
    Ok(source
        .matrix
        .iter()
        .zip(&target.matrix)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Sum of the two mean absolute entries.
pub fn sparsity_loss(source: &SummaryGraph, target: &SummaryGraph) -> Result<f64> {
    check_pair(source, target)?;
    let n = source.matrix.len() as f64;
    let l1 = |g: &SummaryGraph| g.matrix.iter().map(|v| v.abs()).sum::<f64>() / n;
    Ok(l1(source) + l1(target))
}

/// Mean squared error of the designated variable over the horizon.
pub fn strengthen_loss(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "strengthen_loss",
            lhs: vec![pred.len()],
            rhs: vec![label.len()],
        });
    }
    Ok(pred
        .iter()
        .zip(label)
        .map(|(p, l)| (p - l).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Weights of the regularizers in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            delta: 0.01,
            lambda: 1.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("delta", self.delta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Every term of the total loss for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_elbo_source: f64,
    pub neg_elbo_target: f64,
    pub alignment: f64,
    pub sparsity: f64,
    pub strengthen: f64,
    pub total: f64,
    pub hyper: Hyper,
}

impl LossBreakdown {
    pub fn combine(
        neg_elbo_source: f64,
        neg_elbo_target: f64,
        alignment: f64,
        sparsity: f64,
        strengthen: f64,
        hyper: Hyper,
    ) -> Result<Self> {
        hyper.validate()?;
        let total = neg_elbo_source
            + neg_elbo_target
            + hyper.gamma * alignment
            + hyper.delta * sparsity
            + hyper.lambda * strengthen;
        Ok(Self {
            neg_elbo_source,
            neg_elbo_target,
            alignment,
            sparsity,
            strengthen,
            total,
            hyper,
        })
    }
}

/// Sum of the Bernoulli KL over every edge of every lag and window.
pub fn tape_structure_kl(logits: &[Var], p0: f64) -> Result<Var> {
    let p = p0.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    let (lp, lnp) = (p.ln(), (1.0 - p).ln());
    let mut total: Option<Var> = None;
    for l in logits {
        let q = l.sigmoid()?.clamp(KL_CLAMP, 1.0 - KL_CLAMP)?;
        let nq = q.neg()?.offset(1.0)?;
        let kl = q
            .mul(&q.ln()?.offset(-lp)?)?
            .add(&nq.mul(&nq.ln()?.offset(-lnp)?)?)?
            .sum()?;
        total = Some(match total {
            Some(t) => t.add(&kl)?,
            None => kl,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no structures to regularize".into()))
}

/// Negative ELBO of a batch, averaged over windows, with the structures it
/// sampled.
pub struct BatchElbo {
    pub neg_elbo: Var,
    pub structures: TapeStructures,
    /// `[B, M, n, 1]` teacher-forced predictions.
    pub predictions: Var,
}

pub fn tape_neg_elbo(
    bound: &BoundParams<'_>,
    batch: &Batch,
    domain_id: usize,
    sampling: Sampling<'_>,
    n_predict: usize,
) -> Result<BatchElbo> {
    let c = bound.params().config();
    let tape = bound.tape();
    let structures = network::encode(bound, batch, domain_id, sampling)?;
    let predictions =
        network::teacher_forced(bound, batch, &structures.samples, domain_id, n_predict)?;
    let targets = tape.constant(batch.teacher_targets(n_predict)?);
    let b = batch.size() as f64;
    let sigma = c.decoder_std;
    let per_window_norm = (c.vars * n_predict) as f64 * (sigma * (2.0 * PI).sqrt()).ln();
    let mut total = predictions
        .sub(&targets)?
        .scale(1.0 / sigma)?
        .square()?
        .sum()?
        .scale(0.5)?;
    if c.kind == ModelKind::Gca {
        total = total.add(&tape_structure_kl(&structures.logits, c.prior_edge_prob)?)?;
    }
    let neg_elbo = total.scale(1.0 / b)?.offset(per_window_norm)?;
    Ok(BatchElbo {
        neg_elbo,
        structures,
        predictions,
    })
}

/// Result of [`elbo`] for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowElbo {
    pub neg_elbo: f64,
    /// `None` for the baseline, which has no structures.
    pub graph: Option<FullTimeGraph>,
    /// `n_predict x M` teacher-forced predictions, row-major.
    pub predictions: Vec<f64>,
}

/// Negative ELBO of one window with one Gumbel sample.
pub fn elbo<R: Rng + ?Sized>(
    window: &TimeSeriesWindow,
    domain_id: usize,
    params: &ModelParams,
    temperature: f64,
    rng: &mut R,
    n_predict: usize,
) -> Result<WindowElbo> {
    let c = params.config();
    if window.history_len() < c.max_lag + n_predict || n_predict == 0 {
        return Err(Error::InvalidArgument(format!(
            "history of {} steps cannot supply {n_predict} predictions at lag {}",
            window.history_len(),
            c.max_lag
        )));
    }
    let batch = Batch::from_windows(&[window])?;
    let noise = StructureNoise::draw(1, c.vars, c.max_lag, rng);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = tape_neg_elbo(
        &bound,
        &batch,
        domain_id,
        Sampling::Relaxed {
            temperature,
            noise: &noise,
        },
        n_predict,
    )?;
    let graph = match c.kind {
        ModelKind::Gca => Some(out.structures.to_graphs()?.remove(0)),
        ModelKind::Baseline => None,
    };
    // [1, M, n, 1] -> n x M
    let p = out.predictions.value().values();
    let predictions = (0..n_predict)
        .flat_map(|s| (0..c.vars).map(move |i| p[i * n_predict + s]))
        .collect();
    Ok(WindowElbo {
        neg_elbo: out.neg_elbo.item()?,
        graph,
        predictions,
    })
}

/// Mean squared error of variable `m` over the rollout of every window in
/// each batch, pooled.
fn tape_strengthen(
    parts: &[(&Batch, &TapeStructures, usize)],
    bound: &BoundParams<'_>,
    target_var: usize,
    horizon: usize,
) -> Result<Var> {
    let tape = bound.tape();
    let mut sum: Option<Var> = None;
    let mut count = 0usize;
    for (batch, structures, domain_id) in parts {
        let steps = network::rollout(bound, batch, &structures.samples, *domain_id, horizon)?;
        let picked = steps
            .iter()
            .map(|s| s.slice(3, target_var, 1))
            .collect::<Result<Vec<_>>>()?;
        let pred = Var::concat(&picked)?;
        let label = tape.constant(batch.target_variable(target_var, horizon)?);
        let sq = pred.sub(&label)?.square()?.sum()?;
        count += batch.size() * horizon;
        sum = Some(match sum {
            Some(s) => s.add(&sq)?,
            None => sq,
        });
    }
    let sum = sum.ok_or_else(|| Error::InvalidArgument("no forecasts for strengthen loss".into()))?;
    sum.scale(1.0 / count as f64)
}

/// The three batches a training step consumes.
#[derive(Clone, Copy, Debug)]
pub struct LossBatches<'a> {
    pub source: &'a [&'a TimeSeriesWindow],
    /// May be empty.
    pub labeled_target: &'a [&'a TimeSeriesWindow],
    pub all_target: &'a [&'a TimeSeriesWindow],
}

/// Frozen Gumbel noise for the three batches.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    pub source: StructureNoise,
    pub labeled_target: StructureNoise,
    pub all_target: StructureNoise,
}

impl LossNoise {
    pub fn draw<R: Rng + ?Sized>(batches: &LossBatches<'_>, params: &ModelParams, rng: &mut R) -> Self {
        let c = params.config();
        let mut d = |n| StructureNoise::draw(n, c.vars, c.max_lag, rng);
        Self {
            source: d(batches.source.len()),
            labeled_target: d(batches.labeled_target.len()),
            all_target: d(batches.all_target.len()),
        }
    }
}

/// Settings shared by every step of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub hyper: Hyper,
    pub temperature: f64,
    /// Teacher-forced positions per window in the ELBO.
    pub n_predict: usize,
    /// Rollout length for the strengthen loss.
    pub horizon: usize,
    /// Index of the designated forecast variable.
    pub target_var: usize,
    /// Adds the ELBO of the unlabeled target histories to the target term.
    #[serde(default)]
    pub unlabeled_target_elbo: bool,
}

fn domain_of(windows: &[&TimeSeriesWindow], what: &str) -> Result<usize> {
    let d = windows
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("{what} batch is empty")))?
        .domain_id;
    if windows.iter().any(|w| w.domain_id != d) {
        return Err(Error::InvalidArgument(format!("{what} batch mixes domains")));
    }
    Ok(d)
}

/// The total loss on a tape plus its breakdown.
pub fn tape_total_loss(
    bound: &BoundParams<'_>,
    batches: &LossBatches<'_>,
    settings: &LossSettings,
    noise: &LossNoise,
) -> Result<(Var, LossBreakdown)> {
    let hyper = settings.hyper;
    hyper.validate()?;
    let c = bound.params().config();
    let tape = bound.tape();
    let relaxed = |noise| Sampling::Relaxed {
        temperature: settings.temperature,
        noise,
    };
    let source_domain = domain_of(batches.source, "source")?;
    let target_domain = domain_of(batches.all_target, "target")?;
    let source_batch = Batch::from_windows(batches.source)?;
    let src = tape_neg_elbo(
        bound,
        &source_batch,
        source_domain,
        relaxed(&noise.source),
        settings.n_predict,
    )?;

    let labeled_batch = if batches.labeled_target.is_empty() {
        None
    } else {
        if domain_of(batches.labeled_target, "labeled target")? != target_domain {
            return Err(Error::InvalidArgument(
                "labeled and unlabeled target batches come from different domains".into(),
            ));
        }
        Some(Batch::from_windows(batches.labeled_target)?)
    };
    let tgt = labeled_batch
        .as_ref()
        .map(|b| {
            tape_neg_elbo(
                bound,
                b,
                target_domain,
                relaxed(&noise.labeled_target),
                settings.n_predict,
            )
        })
        .transpose()?;

    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut unlabeled_elbo = None;
    let (l_r, l_d) = match c.kind {
        ModelKind::Gca => {
            let all_batch = Batch::from_windows(batches.all_target)?;
            let all = if settings.unlabeled_target_elbo {
                let e = tape_neg_elbo(
                    bound,
                    &all_batch,
                    target_domain,
                    relaxed(&noise.all_target),
                    settings.n_predict,
                )?;
                unlabeled_elbo = Some(e.neg_elbo);
                e.structures
            } else {
                network::encode(bound, &all_batch, target_domain, relaxed(&noise.all_target))?
            };
            let s = src.structures.summary()?;
            let t = all.summary()?;
            let mm = (c.vars * c.vars) as f64;
            let l_r = s.sub(&t)?.abs()?.sum()?.scale(1.0 / mm)?;
            let l_d = s.abs()?.sum()?.add(&t.abs()?.sum()?)?.scale(1.0 / mm)?;
            (l_r, l_d)
        }
        ModelKind::Baseline => (zero(), zero()),
    };

    let mut parts = vec![(&source_batch, &src.structures, source_domain)];
    if let (Some(b), Some(t)) = (&labeled_batch, &tgt) {
        parts.push((b, &t.structures, target_domain));
    }
    let l_e = tape_strengthen(&parts, bound, settings.target_var, settings.horizon)?;

    let mut neg_t = tgt.as_ref().map_or_else(zero, |t| t.neg_elbo.clone());
    if let Some(u) = unlabeled_elbo {
        neg_t = neg_t.add(&u)?;
    }
    let total = src
        .neg_elbo
        .add(&neg_t)?
        .add(&l_r.scale(hyper.gamma)?)?
        .add(&l_d.scale(hyper.delta)?)?
        .add(&l_e.scale(hyper.lambda)?)?;
    let breakdown = LossBreakdown::combine(
        src.neg_elbo.item()?,
        neg_t.item()?,
        l_r.item()?,
        l_d.item()?,
        l_e.item()?,
        hyper,
    )?;
    Ok((total, breakdown))
}

/// Evaluates the total loss with fresh Gumbel noise.
pub fn total_loss<R: Rng + ?Sized>(
    batches: &LossBatches<'_>,
    params: &ModelParams,
    settings: &LossSettings,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = LossNoise::draw(batches, params, rng);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    tape_total_loss(&bound, batches, settings, &noise).map(|(_, b)| b)
}

/// Loss breakdown and the gradient of the total for every parameter
/// tensor, in parameter order.
pub fn total_loss_with_grad(
    batches: &LossBatches<'_>,
    params: &ModelParams,
    settings: &LossSettings,
    noise: &LossNoise,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (total, breakdown) = tape_total_loss(&bound, batches, settings, noise)?;
    let grads = tape.backward(&total)?;
    let out = bound
        .vars()
        .iter()
        .map(|v| {
            grads
                .get(v)
                .ok_or_else(|| Error::Tape("missing parameter gradient".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((breakdown, out))
}
