//! Python bindings: data generation, training, checkpoints, forecasting and
//! structure inference.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gca::cli::{self, DataSource, ExperimentConfig};
use gca::data::io::{read_json, write_json};
use gca::data::{generate_domains, sample_structures, DomainConfig, GroundTruth};
use gca::metrics::{self, evaluate, worker_threads};
use gca::model::{encode_with, forecast, ForecastMode, Sampling};
use gca::trainer::{self, Checkpoint};

create_exception!(gca_py, GcaError, PyException);

fn err(e: gca::Error) -> PyErr {
    GcaError::new_err(e.to_string())
}

fn flatten(rows: &[Vec<f64>], vars: usize) -> PyResult<Vec<f64>> {
    if rows.iter().any(|r| r.len() != vars) {
        return Err(GcaError::new_err(format!("every row must have {vars} values")));
    }
    Ok(rows.concat())
}

fn rows(flat: &[f64], vars: usize) -> Vec<Vec<f64>> {
    flat.chunks(vars).map(<[f64]>::to_vec).collect()
}

/// Training hyperparameters. Unset fields keep their defaults.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| GcaError::new_err(e.to_string()))?,
            None => trainer::TrainConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    #[setter]
    fn set_learning_rate(&mut self, v: f64) {
        self.inner.learning_rate = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }

    #[getter]
    fn max_lag(&self) -> usize {
        self.inner.max_lag
    }

    #[setter]
    fn set_max_lag(&mut self, v: usize) {
        self.inner.max_lag = v;
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    #[setter]
    fn set_window(&mut self, v: usize) {
        self.inner.window = v;
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[setter]
    fn set_horizon(&mut self, v: usize) {
        self.inner.horizon = v;
    }

    #[getter]
    fn max_steps_per_epoch(&self) -> Option<usize> {
        self.inner.max_steps_per_epoch
    }

    #[setter]
    fn set_max_steps_per_epoch(&mut self, v: Option<usize>) {
        self.inner.max_steps_per_epoch = v;
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.to_json())
    }
}

/// A trained checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_json(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_json(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn val_mse(&self) -> f64 {
        self.inner.val_mse
    }

    #[getter]
    fn vars(&self) -> usize {
        self.inner.model.config().vars
    }

    #[getter]
    fn max_lag(&self) -> usize {
        self.inner.model.config().max_lag
    }

    #[getter]
    fn source_domain(&self) -> usize {
        self.inner.source_domain
    }

    #[getter]
    fn target_domain(&self) -> usize {
        self.inner.target_domain
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.model.parameter_count()
    }

    /// Hard-structure rollout of `horizon` steps from a normalized history
    /// given as a list of rows.
    #[pyo3(signature = (history, horizon, domain=None))]
    fn forecast(&self, history: Vec<Vec<f64>>, horizon: usize, domain: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let m = &self.inner.model;
        let vars = m.config().vars;
        let flat = flatten(&history, vars)?;
        let d = domain.unwrap_or(self.inner.target_domain);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forecast(&flat, horizon, d, m, ForecastMode::Hard, 1.0, &mut rng).map_err(err)?;
        Ok(rows(&out, vars))
    }

    /// Posterior edge probabilities `[lag][target][source]` for one history.
    #[pyo3(signature = (history, domain=None))]
    fn structure(&self, history: Vec<Vec<f64>>, domain: Option<usize>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let m = &self.inner.model;
        let vars = m.config().vars;
        let flat = flatten(&history, vars)?;
        let d = domain.unwrap_or(self.inner.target_domain);
        let g = encode_with(&flat, d, m, Sampling::Expected).map_err(err)?;
        Ok((1..=g.max_lag).map(|j| rows(&g.lag_probabilities(j), vars)).collect())
    }

    /// Metrics on the test split of `domain` in a `generate` directory or
    /// CSV file.
    #[pyo3(signature = (data, ground_truth=None, domain=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        ground_truth: Option<PathBuf>,
        domain: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let d = domain.unwrap_or(self.inner.target_domain);
        let gt: Option<GroundTruth> = ground_truth.map(|p| read_json(&p)).transpose().map_err(err)?;
        let splits = cli::checkpoint_splits(&self.inner, &data, d).map_err(err)?;
        let r = evaluate(
            &self.inner.model,
            &splits.test,
            gt.as_ref(),
            self.inner.train_config.target_var,
            worker_threads(),
        )
        .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("mse", r.mse)?;
        out.set_item("mae", r.mae)?;
        out.set_item("mse_all", r.mse_all)?;
        out.set_item("mae_all", r.mae_all)?;
        out.set_item("n_windows", r.n_windows)?;
        if let Some(a) = r.auprc {
            out.set_item("auprc", a)?;
        }
        if let Some(a) = r.auprc_summary {
            out.set_item("auprc_summary", a)?;
        }
        Ok(out)
    }
}

/// Simulates domains sharing one random structure. Returns the series
/// (one list of rows per domain) and the ground truth as JSON.
#[pyfunction]
#[pyo3(signature = (vars=5, lag=2, density=0.3, length=2000, domains=vec![1, 2], seed=0))]
fn generate(
    vars: usize,
    lag: usize,
    density: f64,
    length: usize,
    domains: Vec<usize>,
    seed: u64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, String)> {
    let configs = domains
        .iter()
        .map(|&d| DomainConfig::preset(d))
        .collect::<gca::Result<Vec<_>>>()
        .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_structures(vars, lag, density, 1.0, &mut rng).map_err(err)?;
    let series = generate_domains(&s, &configs, length, false, &mut rng).map_err(err)?;
    let gt = GroundTruth::from_structures(&s).map_err(err)?;
    Ok((
        series.iter().map(|x| rows(x.values(), vars)).collect(),
        serde_json::to_string(&gt).expect("ground truth serializes"),
    ))
}

/// Trains on domains `source` and `target` of a `generate` directory and
/// writes the run directory `out`.
#[pyfunction]
#[pyo3(signature = (config, data, out, source=1, target=2))]
fn train(config: &PyTrainConfig, data: PathBuf, out: PathBuf, source: usize, target: usize) -> PyResult<PyModel> {
    let exp = ExperimentConfig {
        train: config.inner.clone(),
        data: DataSource::Manifest {
            dir: data,
            source,
            target,
        },
        out,
        task: None,
    };
    let best = cli::run_experiment(&exp, &mut |_| {}).map_err(err)?;
    Ok(PyModel { inner: best })
}

/// Runs the `gca` command line with `args` (without the program name).
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let mut full = vec!["gca".to_string()];
    full.extend(args);
    cli::run(full, &mut std::io::stdout(), &mut std::io::stderr())
}

/// KL divergence between Bernoulli(q) and Bernoulli(p0).
#[pyfunction]
fn bernoulli_kl(q: f64, p0: f64) -> f64 {
    gca::objectives::bernoulli_kl(q, p0)
}

/// Average precision of `scores` against binary labels.
#[pyfunction]
fn auprc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::auprc(&scores, &truth).map_err(err)
}

#[pymodule]
fn gca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GcaError", m.py().get_type::<GcaError>())?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(bernoulli_kl, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    Ok(())
}
