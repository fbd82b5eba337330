//! Semi-supervised training over labeled source, a few labeled target and
//! all target windows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::io::write_json;
use crate::data::{Dataset, NormStats, SplitRatios, TimeSeriesWindow, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::{forecast_metrics, infer, worker_threads};
use crate::model::{ModelConfig, ModelKind, ModelParams};
use crate::objectives::{total_loss_with_grad, Hyper, LossBatches, LossBreakdown, LossNoise, LossSettings};

/// Training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gca,
    /// Without summary-graph alignment.
    GcaR,
    /// Without the strengthen loss.
    GcaE,
    /// Structure-free autoregressive network on source + labeled target.
    Baseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Gca => "gca",
            Mode::GcaR => "gca_r",
            Mode::GcaE => "gca_e",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gca" => Ok(Mode::Gca),
            "gca_r" => Ok(Mode::GcaR),
            "gca_e" => Ok(Mode::GcaE),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected gca, gca_r, gca_e or baseline)"
            ))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub max_lag: usize,
    pub window: usize,
    pub horizon: usize,
    pub target_var: usize,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub labeled_fraction: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    /// Per-epoch decay; derived from `epochs` when absent.
    pub temp_decay: Option<f64>,
    pub seed: u64,
    /// Teacher-forced positions per window in each ELBO.
    pub n_predict: usize,
    /// Offset between consecutive windows.
    pub stride: usize,
    /// Also reconstruct unlabeled target histories. Off by default.
    pub unlabeled_target_elbo: bool,
    pub prior_edge_prob: f64,
    pub encoder_bias_init: f64,
    /// Abort once the total loss exceeds this.
    pub divergence_limit: f64,
    /// Caps the steps of each epoch (all source batches when absent).
    pub max_steps_per_epoch: Option<usize>,
    /// Write `checkpoints/epoch_<n>.json` every epoch.
    pub save_every_epoch: bool,
    /// Chronological train/validation/test fractions of each domain.
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gca,
            max_lag: 3,
            window: 30,
            horizon: 10,
            target_var: 0,
            gamma: 1.0,
            delta: 0.01,
            lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            labeled_fraction: 0.05,
            temp_start: 1.0,
            temp_end: 0.5,
            temp_decay: None,
            seed: 0,
            n_predict: 8,
            stride: 1,
            unlabeled_target_elbo: false,
            prior_edge_prob: 0.1,
            encoder_bias_init: 0.0,
            divergence_limit: 1e8,
            max_steps_per_epoch: None,
            save_every_epoch: true,
            split: SplitRatios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [
            ("max_lag", self.max_lag),
            ("window", self.window),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("n_predict", self.n_predict),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.window < self.max_lag + self.n_predict {
            return bad(format!(
                "window {} must be at least max_lag + n_predict = {}",
                self.window,
                self.max_lag + self.n_predict
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("temp_start", self.temp_start),
            ("temp_end", self.temp_end),
            ("divergence_limit", self.divergence_limit),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.temp_end > self.temp_start {
            return bad("temp_end must not exceed temp_start".into());
        }
        if let Some(d) = self.temp_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("temp_decay must be in (0,1], got {d}"));
            }
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return bad(format!("labeled_fraction must be in [0,1], got {}", self.labeled_fraction));
        }
        let r = [self.split.train, self.split.val, self.split.test];
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios must be positive and sum to 1, got {r:?}"));
        }
        self.hyper().validate()
    }

    /// Windowing implied by this configuration.
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            history_len: self.window,
            horizon: self.horizon,
            stride: self.stride,
            ratios: self.split,
        }
    }

    /// The loss weights after the mode's zeroing.
    pub fn hyper(&self) -> Hyper {
        let mut h = Hyper {
            gamma: self.gamma,
            delta: self.delta,
            lambda: self.lambda,
        };
        match self.mode {
            Mode::GcaR => h.gamma = 0.0,
            Mode::GcaE => h.lambda = 0.0,
            Mode::Baseline => {
                h.gamma = 0.0;
                h.delta = 0.0;
            }
            Mode::Gca => {}
        }
        h
    }

    pub fn model_config(&self, vars: usize, domains: Vec<usize>) -> ModelConfig {
        let kind = match self.mode {
            Mode::Baseline => ModelKind::Baseline,
            _ => ModelKind::Gca,
        };
        let mut c = ModelConfig::new(kind, vars, self.max_lag, domains);
        c.prior_edge_prob = self.prior_edge_prob;
        c.encoder_bias_init = self.encoder_bias_init;
        c
    }
}

/// `max(end, start * decay^epoch)`, reaching `end` at 80% of the epochs.
pub fn temperature_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let (start, end) = (config.temp_start, config.temp_end);
    let anneal = 0.8 * config.epochs as f64;
    let decay = config
        .temp_decay
        .unwrap_or_else(|| (end / start).powf(1.0 / anneal.max(1.0)));
    if config.temp_decay.is_none() && epoch as f64 >= anneal {
        return end;
    }
    (start * decay.powi(epoch as i32)).max(end)
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `names` label errors.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or("?", String::as_str);
        if p.shape() != g.shape() || state.first[i].len() != p.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, &gj)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub temperature: f64,
}

/// Epoch means plus validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub neg_elbo_source: f64,
    pub neg_elbo_target: f64,
    pub alignment: f64,
    pub sparsity: f64,
    pub strengthen: f64,
    pub total: f64,
    pub val_mse: f64,
    pub temperature: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} total={:.6} elbo_s={:.6} elbo_t={:.6} l_r={:.6} l_d={:.6} l_e={:.6} val_mse={:.6} temp={:.4}",
            self.epoch,
            self.total,
            self.neg_elbo_source,
            self.neg_elbo_target,
            self.alignment,
            self.sparsity,
            self.strengthen,
            self.val_mse,
            self.temperature
        )
    }
}

/// Normalization statistics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain_id: usize,
    pub stats: NormStats,
}

/// A saved model with what is needed to evaluate it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_mse: f64,
    pub source_domain: usize,
    pub target_domain: usize,
    pub train_config: TrainConfig,
    #[serde(default)]
    pub normalization: Vec<DomainStats>,
    pub model: ModelParams,
}

impl Checkpoint {
    pub fn stats_for(&self, domain_id: usize) -> Option<&NormStats> {
        self.normalization
            .iter()
            .find(|d| d.domain_id == domain_id)
            .map(|d| &d.stats)
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub best: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Source training windows, target training windows and target
/// validation windows, already normalized.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Dataset,
    pub target: Dataset,
    pub target_val: Dataset,
}

/// Index of the lowest validation MSE; ties go to the earliest epoch.
pub fn select_model(epochs: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in epochs.iter().enumerate() {
        if e.val_mse.is_nan() {
            continue;
        }
        if best.is_none_or(|b| e.val_mse < epochs[b].val_mse) {
            best = Some(i);
        }
    }
    best
}

/// Designated-variable MSE of hard-mode forecasts on `data`.
pub fn validation_mse(params: &ModelParams, data: &Dataset, target_var: usize) -> Result<f64> {
    let inf = infer(params, data, worker_threads())?;
    Ok(forecast_metrics(&inf.forecasts, &inf.truths, data.vars, &[target_var])?.0)
}

/// Number of labeled target windows for a target set of `n`.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n == 0 {
        return 0;
    }
    ((n as f64 * fraction).ceil() as usize).clamp(1, n)
}

fn check_data(data: &TrainData, config: &TrainConfig) -> Result<()> {
    if data.source.is_empty() {
        return Err(Error::Data("source training set is empty".into()));
    }
    if data.target.is_empty() {
        return Err(Error::Data("target training set is empty".into()));
    }
    if data.target_val.is_empty() {
        return Err(Error::Data("target validation set is empty".into()));
    }
    let vars = data.source.vars;
    for d in [&data.target, &data.target_val] {
        if d.vars != vars {
            return Err(Error::Data(format!(
                "source has {vars} variables but target has {}",
                d.vars
            )));
        }
    }
    if config.target_var >= vars {
        return Err(Error::InvalidArgument(format!(
            "target variable {} out of range for {vars} variables",
            config.target_var
        )));
    }
    for d in [&data.source, &data.target, &data.target_val] {
        if d.history_len < config.max_lag + config.n_predict || d.horizon < config.horizon {
            return Err(Error::Data(format!(
                "windows of T={}, tau={} are too short for lag {} with {} teacher-forced steps and horizon {}",
                d.history_len, d.horizon, config.max_lag, config.n_predict, config.horizon
            )));
        }
    }
    if data.target.domain_id != data.target_val.domain_id {
        return Err(Error::Data("target train and validation sets differ in domain".into()));
    }
    Ok(())
}

fn sample<'a, R: rand::Rng + ?Sized>(
    pool: &'a [TimeSeriesWindow],
    size: usize,
    rng: &mut R,
) -> Vec<&'a TimeSeriesWindow> {
    let mut picks: Vec<&TimeSeriesWindow> = pool.choose_multiple(rng, size.min(pool.len())).collect();
    picks.sort_by_key(|w| w.start);
    picks
}

/// Header of `history.csv`.
pub const HISTORY_HEADER: &str = "step,neg_elbo_s,neg_elbo_t,l_r,l_d,l_e,total,temperature";

/// One `history.csv` row.
pub fn history_row(r: &StepRecord) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{}",
        r.step,
        l.neg_elbo_source,
        l.neg_elbo_target,
        l.alignment,
        l.sparsity,
        l.strengthen,
        l.total,
        r.temperature
    )
}

/// Runs the full training loop. With `run_dir`, writes `config.json`,
/// `history.csv`, per-epoch checkpoints and `best.json` there.
pub fn train(
    data: &TrainData,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(data, config)?;
    let source_domain = data.source.domain_id;
    let target_domain = data.target.domain_id;
    let mut domains = vec![source_domain];
    if target_domain != source_domain {
        domains.push(target_domain);
    }
    let vars = data.source.vars;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut params = ModelParams::init(config.model_config(vars, domains), &mut init_rng)?;
    let mut opt = OptimizerState::new(params.tensors());
    let hyper = config.hyper();

    let mut target_sorted = data.target.windows.clone();
    target_sorted.sort_by_key(|w| w.start);
    let n_labeled = labeled_count(target_sorted.len(), config.labeled_fraction);
    let labeled = &target_sorted[..n_labeled];

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), config)?;
    }
    let mut history = String::new();
    history.push_str(HISTORY_HEADER);
    history.push('\n');

    let normalization: Vec<DomainStats> = [&data.source, &data.target]
        .iter()
        .filter_map(|d| {
            d.stats.clone().map(|stats| DomainStats {
                domain_id: d.domain_id,
                stats,
            })
        })
        .fold(Vec::new(), |mut acc, d| {
            if !acc.iter().any(|x: &DomainStats| x.domain_id == d.domain_id) {
                acc.push(d);
            }
            acc
        });
    let checkpoint = |params: &ModelParams, epoch: usize, val_mse: f64| Checkpoint {
        epoch,
        val_mse,
        source_domain,
        target_domain,
        train_config: config.clone(),
        normalization: normalization.clone(),
        model: params.clone(),
    };

    let mut steps = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..data.source.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let temperature = temperature_schedule(epoch, config);
        let settings = LossSettings {
            hyper,
            temperature,
            n_predict: config.n_predict,
            horizon: config.horizon,
            target_var: config.target_var,
            unlabeled_target_elbo: config.unlabeled_target_elbo,
        };
        order.shuffle(&mut rng);
        let mut n_steps = order.len().div_ceil(config.batch_size);
        if let Some(cap) = config.max_steps_per_epoch {
            n_steps = n_steps.min(cap.max(1));
        }
        let mut sums = [0.0f64; 6];
        for chunk in order.chunks(config.batch_size).take(n_steps) {
            let mut src: Vec<&TimeSeriesWindow> = chunk.iter().map(|&i| &data.source.windows[i]).collect();
            src.sort_by_key(|w| w.start);
            let lab = sample(labeled, config.batch_size, &mut rng);
            let all = sample(&target_sorted, config.batch_size, &mut rng);
            let batches = LossBatches {
                source: &src,
                labeled_target: &lab,
                all_target: &all,
            };
            let noise = LossNoise::draw(&batches, &params, &mut rng);
            let (loss, grads) = total_loss_with_grad(&batches, &params, &settings, &noise)?;
            if !loss.total.is_finite() || loss.total.abs() > config.divergence_limit {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} step {step}: total={} elbo_s={} elbo_t={} l_r={} l_d={} l_e={}",
                    loss.total,
                    loss.neg_elbo_source,
                    loss.neg_elbo_target,
                    loss.alignment,
                    loss.sparsity,
                    loss.strengthen
                )));
            }
            let names = params.names().to_vec();
            adam_step(params.tensors_mut(), &names, &grads, &mut opt, config.learning_rate)?;
            let rec = StepRecord {
                step,
                epoch,
                loss,
                temperature,
            };
            history.push_str(&history_row(&rec));
            history.push('\n');
            for (s, v) in sums.iter_mut().zip([
                loss.neg_elbo_source,
                loss.neg_elbo_target,
                loss.alignment,
                loss.sparsity,
                loss.strengthen,
                loss.total,
            ]) {
                *s += v;
            }
            steps.push(rec);
            step += 1;
        }
        let val_mse = validation_mse(&params, &data.target_val, config.target_var)?;
        let n = n_steps as f64;
        let rec = EpochRecord {
            epoch,
            neg_elbo_source: sums[0] / n,
            neg_elbo_target: sums[1] / n,
            alignment: sums[2] / n,
            sparsity: sums[3] / n,
            strengthen: sums[4] / n,
            total: sums[5] / n,
            val_mse,
            temperature,
        };
        log(&rec.log_line());
        epochs.push(rec);
        let ck = checkpoint(&params, epoch, val_mse);
        if let Some(dir) = run_dir {
            if config.save_every_epoch {
                write_json(&dir.join("checkpoints").join(format!("epoch_{epoch}.json")), &ck)?;
            }
            fs::write(dir.join("history.csv"), &history).map_err(|e| Error::io(dir, e))?;
        }
        if select_model(&epochs) == Some(epochs.len() - 1) {
            best = Some(ck);
        }
    }
    let best = best.ok_or_else(|| Error::Numeric("no finite validation MSE recorded".into()))?;
    if let Some(dir) = run_dir {
        write_json(&dir.join("best.json"), &best)?;
        let mut summary = String::new();
        let _ = writeln!(summary, "best_epoch={} val_mse={}", best.epoch, best.val_mse);
        log(summary.trim_end());
    }
    Ok(TrainOutcome {
        last: params,
        best,
        steps,
        epochs,
    })
}
