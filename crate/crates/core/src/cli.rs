//! `gca` command line: `generate`, `train`, `eval` and `export-structure`.
//!
//! Exit codes: 0 ok, 2 usage or configuration, 3 data, 4 numeric.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_json, read_series_csv, write_json, write_series_csv};
use crate::data::{
    generate_domains, prepare_domain, prepare_with_stats, sample_structures, DomainConfig,
    DomainSplits, GroundTruth, NoiseParam, Series,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, export_structures, worker_threads};
use crate::trainer::{train, Checkpoint, Mode, TrainConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::UnknownDomain(_) | Error::Io { .. } | Error::Parse { .. } => EXIT_USAGE,
        Error::Data(_) | Error::UnstableSystem { .. } | Error::Shape { .. } => EXIT_DATA,
        Error::Numeric(_) | Error::NonFinite { .. } | Error::Tape(_) => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "gca", version, about = "Granger causality alignment for time-series transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate multi-domain series from one shared causal structure.
    Generate(GenerateArgs),
    /// Train a model on a source domain and a sparsely labeled target.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Write the inferred causal structures of a checkpoint.
    ExportStructure(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NoiseParamArg {
    Std,
    Variance,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    vars: usize,
    #[arg(long, default_value_t = 2)]
    lag: usize,
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    /// Rows per domain after subsampling.
    #[arg(long, default_value_t = 5000)]
    length: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    domains: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    weight_scale: f64,
    /// Give every domain its own small weight perturbation.
    #[arg(long)]
    perturb: bool,
    /// Noise level per domain (one value, or one per domain).
    #[arg(long, value_delimiter = ',')]
    noise: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    interval: Vec<usize>,
    /// Nonlinearity strength c per domain.
    #[arg(long, value_delimiter = ',')]
    nonlinearity: Vec<f64>,
    #[arg(long, value_enum)]
    noise_param: Option<NoiseParamArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding a `manifest.json` from `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    source_csv: Option<PathBuf>,
    #[arg(long)]
    target_csv: Option<PathBuf>,
    #[arg(long)]
    source: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_lag: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    target_var: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    n_predict: Option<usize>,
    #[arg(long)]
    max_steps_per_epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Manifest directory or a single-domain CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Domain to evaluate (the checkpoint's target by default).
    #[arg(long)]
    domain: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Report path (defaults to `eval.json` next to the model).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    domain: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

/// One domain entry of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    #[serde(flatten)]
    pub config: DomainConfig,
    /// CSV file name relative to the manifest.
    pub file: String,
}

/// Written by `generate`; lets `train`, `eval` and `export-structure` find
/// every file of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vars: usize,
    pub lag: usize,
    pub density: f64,
    pub length: usize,
    pub seed: u64,
    pub weight_scale: f64,
    pub perturb: bool,
    pub ground_truth: String,
    pub domains: Vec<ManifestDomain>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(Self::FILE))
    }

    pub fn domain(&self, id: usize) -> Result<&ManifestDomain> {
        self.domains
            .iter()
            .find(|d| d.config.domain_id == id)
            .ok_or(Error::UnknownDomain(id))
    }
}

/// Where the training series come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A `generate` output directory.
    Manifest {
        dir: PathBuf,
        source: usize,
        target: usize,
    },
    /// One CSV per domain.
    Csv {
        source: PathBuf,
        target: PathBuf,
        #[serde(default = "one")]
        source_domain: usize,
        #[serde(default = "two")]
        target_domain: usize,
    },
    /// Simulated in memory from a pair of domain settings.
    Synthetic {
        vars: usize,
        lag: usize,
        density: f64,
        length: usize,
        seed: u64,
        #[serde(default = "unit")]
        weight_scale: f64,
        #[serde(default)]
        perturb: bool,
        source: DomainConfig,
        target: DomainConfig,
    },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn unit() -> f64 {
    1.0
}

impl DataSource {
    fn domain_ids(&self) -> (usize, usize) {
        match self {
            DataSource::Manifest { source, target, .. } => (*source, *target),
            DataSource::Csv {
                source_domain,
                target_domain,
                ..
            } => (*source_domain, *target_domain),
            DataSource::Synthetic { source, target, .. } => (source.domain_id, target.domain_id),
        }
    }

    /// Source and target series plus the ground truth when known.
    fn load(&self) -> Result<(Series, Series, Option<GroundTruth>)> {
        match self {
            DataSource::Manifest { dir, source, target } => {
                let m = Manifest::load(dir)?;
                let s = read_series_csv(&dir.join(&m.domain(*source)?.file))?;
                let t = read_series_csv(&dir.join(&m.domain(*target)?.file))?;
                let gt = read_json(&dir.join(&m.ground_truth))?;
                Ok((s, t, Some(gt)))
            }
            DataSource::Csv { source, target, .. } => {
                Ok((read_series_csv(source)?, read_series_csv(target)?, None))
            }
            DataSource::Synthetic {
                vars,
                lag,
                density,
                length,
                seed,
                weight_scale,
                perturb,
                source,
                target,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let structures = sample_structures(*vars, *lag, *density, *weight_scale, &mut rng)?;
                let configs = if source.domain_id == target.domain_id {
                    vec![source.clone()]
                } else {
                    vec![source.clone(), target.clone()]
                };
                let mut series = generate_domains(&structures, &configs, *length, *perturb, &mut rng)?;
                let t = series.pop().expect("at least one domain");
                let s = series.pop().unwrap_or_else(|| t.clone());
                Ok((s, t, Some(GroundTruth::from_structures(&structures)?)))
            }
        }
    }
}

/// Everything a `train` invocation needs; the JSON form has the training
/// fields at top level next to `data`, `out` and `task`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
    /// Label such as `1->2`.
    #[serde(default)]
    pub task: Option<String>,
}

impl ExperimentConfig {
    pub fn task_label(&self) -> String {
        self.task.clone().unwrap_or_else(|| {
            let (s, t) = self.data.domain_ids();
            format!("{s}->{t}")
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.out.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("output directory is empty".into()));
        }
        Ok(())
    }
}

/// Runs the command line and returns the exit code. Normal output goes to
/// `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::ExportStructure(a) => cmd_export_structure(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn Write, line: &str) {
    let _ = writeln!(out, "{line}");
}

fn per_domain<T: Copy>(values: &[T], n: usize, name: &str) -> Result<Option<Vec<T>>> {
    match values.len() {
        0 => Ok(None),
        1 => Ok(Some(vec![values[0]; n])),
        l if l == n => Ok(Some(values.to_vec())),
        l => Err(Error::InvalidArgument(format!(
            "--{name} has {l} values for {n} domains"
        ))),
    }
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    if a.domains.is_empty() {
        return Err(Error::InvalidArgument("--domains is empty".into()));
    }
    let n = a.domains.len();
    let mut configs = a
        .domains
        .iter()
        .map(|&id| DomainConfig::preset(id))
        .collect::<Result<Vec<_>>>()?;
    if let Some(v) = per_domain(&a.noise, n, "noise")? {
        configs.iter_mut().zip(v).for_each(|(c, x)| c.noise = x);
    }
    if let Some(v) = per_domain(&a.interval, n, "interval")? {
        configs.iter_mut().zip(v).for_each(|(c, x)| c.sample_interval = x);
    }
    if let Some(v) = per_domain(&a.nonlinearity, n, "nonlinearity")? {
        configs.iter_mut().zip(v).for_each(|(c, x)| c.nonlinearity_c = x);
    }
    if let Some(p) = a.noise_param {
        let p = match p {
            NoiseParamArg::Std => NoiseParam::StdDev,
            NoiseParamArg::Variance => NoiseParam::Variance,
        };
        configs.iter_mut().for_each(|c| c.noise_param = p);
    }
    for c in &configs {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let structures = sample_structures(a.vars, a.lag, a.density, a.weight_scale, &mut rng)?;
    let series = generate_domains(&structures, &configs, a.length, a.perturb, &mut rng)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut domains = Vec::with_capacity(n);
    for (cfg, s) in configs.into_iter().zip(&series) {
        let file = format!("domain_{}.csv", cfg.domain_id);
        write_series_csv(&a.out.join(&file), s)?;
        emit(out, &a.out.join(&file).display().to_string());
        domains.push(ManifestDomain { config: cfg, file });
    }
    let gt = GroundTruth::from_structures(&structures)?;
    write_json(&a.out.join("ground_truth.json"), &gt)?;
    let manifest = Manifest {
        vars: a.vars,
        lag: a.lag,
        density: a.density,
        length: a.length,
        seed: a.seed,
        weight_scale: a.weight_scale,
        perturb: a.perturb,
        ground_truth: "ground_truth.json".into(),
        domains,
    };
    write_json(&a.out.join(Manifest::FILE), &manifest)?;
    emit(out, &a.out.join(Manifest::FILE).display().to_string());
    Ok(())
}

fn experiment_from_args(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut exp: Option<ExperimentConfig> = a.config.as_deref().map(read_json).transpose()?;
    let flag_source = match (&a.data, &a.source_csv, &a.target_csv) {
        (Some(dir), None, None) => Some(DataSource::Manifest {
            dir: dir.clone(),
            source: a.source.unwrap_or(1),
            target: a.target.unwrap_or(2),
        }),
        (None, Some(s), Some(t)) => Some(DataSource::Csv {
            source: s.clone(),
            target: t.clone(),
            source_domain: a.source.unwrap_or(1),
            target_domain: a.target.unwrap_or(2),
        }),
        (None, None, None) => None,
        _ => {
            return Err(Error::InvalidArgument(
                "give either --data or both --source-csv and --target-csv".into(),
            ))
        }
    };
    let mut exp = match (exp.take(), flag_source) {
        (Some(mut e), src) => {
            if let Some(src) = src {
                e.data = src;
            }
            e
        }
        (None, Some(src)) => ExperimentConfig {
            train: TrainConfig::default(),
            data: src,
            out: a
                .out
                .clone()
                .ok_or_else(|| Error::InvalidArgument("--out is required without --config".into()))?,
            task: None,
        },
        (None, None) => {
            return Err(Error::InvalidArgument(
                "no data source: use --config, --data or --source-csv/--target-csv".into(),
            ))
        }
    };
    if let Some(o) = &a.out {
        exp.out = o.clone();
    }
    if let Some(t) = &a.task {
        exp.task = Some(t.clone());
    }
    let t = &mut exp.train;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag.clone() { t.$field = v; })*
        };
    }
    set!(mode => mode, seed => seed, epochs => epochs, batch_size => batch_size,
        lr => learning_rate, max_lag => max_lag, window => window, horizon => horizon,
        target_var => target_var, gamma => gamma, delta => delta, lambda => lambda,
        labeled_fraction => labeled_fraction, stride => stride, n_predict => n_predict);
    if a.max_steps_per_epoch.is_some() {
        t.max_steps_per_epoch = a.max_steps_per_epoch;
    }
    exp.validate()?;
    Ok(exp)
}

/// Trains per `exp`, writing the run directory. Returns the best checkpoint.
pub fn run_experiment(exp: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Checkpoint> {
    exp.validate()?;
    let (src_id, tgt_id) = exp.data.domain_ids();
    let (src_series, tgt_series, gt) = exp.data.load()?;
    let spec = exp.train.window_spec();
    let source = prepare_domain(&src_series, src_id, &spec)?;
    let target = if src_id == tgt_id {
        source.clone()
    } else {
        prepare_domain(&tgt_series, tgt_id, &spec)?
    };
    fs::create_dir_all(&exp.out).map_err(|e| Error::io(&exp.out, e))?;
    write_json(&exp.out.join("experiment.json"), exp)?;
    let data = TrainData {
        source: source.train,
        target: target.train,
        target_val: target.val,
    };
    let outcome = train(&data, &exp.train, Some(&exp.out), log)?;
    let best = outcome.best;

    // AUPRC is undefined without a single true edge.
    let gt = gt.filter(|g| g.flat_adjacency().contains(&true));
    let mut report = evaluate(&best.model, &target.test, gt.as_ref(), exp.train.target_var, worker_threads())?;
    report.task = Some(exp.task_label());
    report.seed = Some(exp.train.seed);
    write_json(&exp.out.join("test_report.json"), &report)?;
    for l in report.lines() {
        log(&format!("test {l}"));
    }
    if exp.train.mode != Mode::Baseline {
        export_structures(&best.model, &target.test, &exp.out.join("structures"), 0.5)?;
    }
    Ok(best)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let exp = experiment_from_args(a)?;
    run_experiment(&exp, &mut |l| emit(out, l))?;
    Ok(())
}

/// Loads one domain's series from a manifest directory or a CSV file.
pub fn load_series(data: &Path, domain: usize) -> Result<Series> {
    if data.is_dir() {
        let m = Manifest::load(data)?;
        read_series_csv(&data.join(&m.domain(domain)?.file))
    } else {
        read_series_csv(data)
    }
}

/// Windows `domain` of `data` the way the checkpoint was trained.
pub fn checkpoint_splits(ck: &Checkpoint, data: &Path, domain: usize) -> Result<DomainSplits> {
    let series = load_series(data, domain)?;
    let spec = ck.train_config.window_spec();
    match ck.stats_for(domain) {
        Some(stats) => prepare_with_stats(&series, domain, &spec, stats.clone()),
        None => prepare_domain(&series, domain, &spec),
    }
}

fn pick(splits: DomainSplits, split: SplitArg) -> crate::data::Dataset {
    match split {
        SplitArg::Train => splits.train,
        SplitArg::Val => splits.val,
        SplitArg::Test => splits.test,
    }
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck: Checkpoint = read_json(&a.model)?;
    let domain = a.domain.unwrap_or(ck.target_domain);
    let gt: Option<GroundTruth> = a.ground_truth.as_deref().map(read_json).transpose()?;
    let test = pick(checkpoint_splits(&ck, &a.data, domain)?, a.split);
    let mut report = evaluate(&ck.model, &test, gt.as_ref(), ck.train_config.target_var, worker_threads())?;
    report.task = Some(format!("{}->{}", ck.source_domain, ck.target_domain));
    report.seed = Some(ck.train_config.seed);
    for l in report.lines() {
        emit(out, &l);
    }
    let path = a.out.clone().unwrap_or_else(|| {
        a.model
            .parent()
            .map(|p| p.join("eval.json"))
            .unwrap_or_else(|| PathBuf::from("eval.json"))
    });
    write_json(&path, &report)
}

fn cmd_export_structure(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let ck: Checkpoint = read_json(&a.model)?;
    let domain = a.domain.unwrap_or(ck.target_domain);
    let ds = pick(checkpoint_splits(&ck, &a.data, domain)?, a.split);
    let (_, paths) = export_structures(&ck.model, &ds, &a.out, a.threshold)?;
    for p in paths {
        emit(out, &p.display().to_string());
    }
    Ok(())
}

#[cfg(test)]
mod tests;
