//! Forecast errors, structure-recovery AUPRC, evaluation reports and
//! structure export.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape};
use crate::data::io::write_json;
use crate::data::{Dataset, GroundTruth, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::model::network::{self, Batch, Sampling};
use crate::model::{ModelKind, ModelParams};

/// Windows per evaluation chunk; fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 128;

/// `(MSE, MAE)` over the entries of `preds`/`truths` (row-major, last axis
/// = variable) whose variable index is in `subset`.
pub fn forecast_metrics(
    preds: &[f64],
    truths: &[f64],
    vars: usize,
    subset: &[usize],
) -> Result<(f64, f64)> {
    if preds.len() != truths.len() || vars == 0 || preds.len() % vars != 0 {
        return Err(Error::Shape {
            op: "forecast_metrics",
            lhs: vec![preds.len()],
            rhs: vec![truths.len(), vars],
        });
    }
    if let Some(&bad) = subset.iter().find(|&&m| m >= vars) {
        return Err(Error::InvalidArgument(format!("variable {bad} out of range")));
    }
    let mut keep = vec![false; vars];
    subset.iter().for_each(|&m| keep[m] = true);
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if keep[i % vars] {
            let d = p - t;
            se += d * d;
            ae += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no entries selected".into()));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Average precision of `scores` against binary `truth`. Entries are ranked
/// by descending score; ties keep their index order.
pub fn auprc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Shape {
            op: "auprc",
            lhs: vec![scores.len()],
            rhs: vec![truth.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN edge score".into()));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("ground truth has no edges".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Worker count: `GCA_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("GCA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Hard-mode outputs for every window of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `N x tau x M` forecasts, row-major.
    pub forecasts: Vec<f64>,
    /// `N x tau x M` true values.
    pub truths: Vec<f64>,
    /// Mean posterior edge probability per `(lag, target, source)`;
    /// `None` for the baseline.
    pub edge_scores: Option<Vec<f64>>,
}

struct ChunkOut {
    forecasts: Vec<f64>,
    prob_sum: Option<Vec<f64>>,
}

fn infer_chunk(params: &ModelParams, windows: &[TimeSeriesWindow], horizon: usize) -> Result<ChunkOut> {
    let refs: Vec<&TimeSeriesWindow> = windows.iter().collect();
    let batch = Batch::from_windows(&refs)?;
    let domain = windows[0].domain_id;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let s = network::encode(&bound, &batch, domain, Sampling::Hard)?;
    let steps = network::rollout(&bound, &batch, &s.samples, domain, horizon)?;
    let (b, m) = (batch.size(), batch.vars());
    let mut forecasts = vec![0.0; b * horizon * m];
    for (step, v) in steps.iter().enumerate() {
        let vals = v.value().values();
        for w in 0..b {
            let dst = (w * horizon + step) * m;
            forecasts[dst..dst + m].copy_from_slice(&vals[w * m..(w + 1) * m]);
        }
    }
    let prob_sum = (!s.logits.is_empty()).then(|| {
        let mm = m * m;
        let mut acc = vec![0.0; s.logits.len() * mm];
        for (j, l) in s.logits.iter().enumerate() {
            for (e, &v) in l.value().values().iter().enumerate() {
                acc[j * mm + e % mm] += sigmoid(v);
            }
        }
        acc
    });
    Ok(ChunkOut {
        forecasts,
        prob_sum,
    })
}

/// Runs the model over every window in parallel chunks, reducing in index
/// order.
pub fn infer(params: &ModelParams, dataset: &Dataset, threads: usize) -> Result<Inference> {
    let c = params.config();
    if dataset.vars != c.vars {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![dataset.vars],
            rhs: vec![c.vars],
        });
    }
    if dataset.is_empty() {
        return Err(Error::Data("dataset has no windows".into()));
    }
    params.domain_index(dataset.domain_id)?;
    let horizon = dataset.horizon;
    let chunks: Vec<&[TimeSeriesWindow]> = dataset.windows.chunks(CHUNK).collect();
    let threads = threads.clamp(1, chunks.len());
    let mut results: Vec<Option<Result<ChunkOut>>> = (0..chunks.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let per = chunks.len().div_ceil(threads);
        for (slot, group) in results.chunks_mut(per).zip(chunks.chunks(per)) {
            scope.spawn(move || {
                for (out, ch) in slot.iter_mut().zip(group) {
                    *out = Some(infer_chunk(params, ch, horizon));
                }
            });
        }
    });
    let mut forecasts = Vec::with_capacity(dataset.len() * horizon * c.vars);
    let mut prob_sum: Option<Vec<f64>> = None;
    for r in results {
        let r = r.expect("every chunk evaluated")?;
        forecasts.extend(r.forecasts);
        if let Some(p) = r.prob_sum {
            match &mut prob_sum {
                Some(acc) => acc.iter_mut().zip(p).for_each(|(a, v)| *a += v),
                None => prob_sum = Some(p),
            }
        }
    }
    let n = dataset.len() as f64;
    let edge_scores = prob_sum.map(|mut p| {
        p.iter_mut().for_each(|v| *v /= n);
        p
    });
    let truths = dataset
        .windows
        .iter()
        .flat_map(|w| w.target.iter().copied())
        .collect();
    Ok(Inference {
        forecasts,
        truths,
        edge_scores,
    })
}

/// Lag-resolved and summary AUPRC of `scores` (`k x M x M`) against the
/// ground truth. Lags missing on either side count as edge-free.
pub fn structure_auprc(scores: &[f64], vars: usize, truth: &GroundTruth) -> Result<(f64, f64)> {
    let mm = vars * vars;
    if truth.vars != vars || mm == 0 || scores.len() % mm != 0 {
        return Err(Error::Shape {
            op: "structure_auprc",
            lhs: vec![scores.len() / mm.max(1), vars, vars],
            rhs: vec![truth.k, truth.vars, truth.vars],
        });
    }
    let k = (scores.len() / mm).max(truth.k);
    let mut s = scores.to_vec();
    s.resize(k * mm, 0.0);
    let mut t = truth.flat_adjacency();
    t.resize(k * mm, false);
    let lag = auprc(&s, &t)?;
    let summary_scores: Vec<f64> = (0..mm)
        .map(|e| (0..k).map(|j| s[j * mm + e]).sum::<f64>() / k as f64)
        .collect();
    let summary = auprc(&summary_scores, &truth.summary_adjacency())?;
    Ok((lag, summary))
}

/// Metrics for one model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub domain_id: usize,
    pub n_windows: usize,
    pub horizon: usize,
    pub target_var: usize,
    /// Designated-variable forecast errors.
    pub mse: f64,
    pub mae: f64,
    /// Errors over every variable.
    pub mse_all: f64,
    pub mae_all: f64,
    /// Lag-resolved AUPRC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    /// AUPRC of the lag-averaged scores against the summary graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc_summary: Option<f64>,
}

impl EvalReport {
    /// `metric=value` lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("mse={}", self.mse),
            format!("mae={}", self.mae),
            format!("mse_all={}", self.mse_all),
            format!("mae_all={}", self.mae_all),
        ];
        if let Some(a) = self.auprc {
            out.push(format!("auprc={a}"));
        }
        if let Some(a) = self.auprc_summary {
            out.push(format!("auprc_summary={a}"));
        }
        out.push(format!("n_windows={}", self.n_windows));
        out
    }
}

/// Hard-mode forecasts on every test window plus, with a ground truth,
/// AUPRC of the mean posterior edge probabilities.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    ground_truth: Option<&GroundTruth>,
    target_var: usize,
    threads: usize,
) -> Result<EvalReport> {
    let c = params.config();
    let inf = infer(params, test, threads)?;
    let all: Vec<usize> = (0..c.vars).collect();
    let (mse, mae) = forecast_metrics(&inf.forecasts, &inf.truths, c.vars, &[target_var])?;
    let (mse_all, mae_all) = forecast_metrics(&inf.forecasts, &inf.truths, c.vars, &all)?;
    let (auprc, auprc_summary) = match (ground_truth, &inf.edge_scores) {
        (Some(gt), Some(scores)) => {
            let (a, s) = structure_auprc(scores, c.vars, gt)?;
            (Some(a), Some(s))
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        task: None,
        seed: None,
        domain_id: test.domain_id,
        n_windows: test.len(),
        horizon: test.horizon,
        target_var,
        mse,
        mae,
        mse_all,
        mae_all,
        auprc,
        auprc_summary,
    })
}

/// Exported structure of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureExport {
    pub domain_id: usize,
    pub max_lag: usize,
    pub vars: usize,
    pub threshold: f64,
    /// `[lag][target][source]` mean posterior edge probabilities.
    pub lag_probabilities: Vec<Vec<Vec<f64>>>,
    /// Thresholded `lag_probabilities`.
    pub adjacency: Vec<Vec<Vec<u8>>>,
    /// `[target][source]` lag average of `lag_probabilities`.
    pub summary: Vec<Vec<f64>>,
}

impl StructureExport {
    pub fn from_scores(domain_id: usize, vars: usize, scores: &[f64], threshold: f64) -> Result<Self> {
        let mm = vars * vars;
        if mm == 0 || scores.is_empty() || scores.len() % mm != 0 {
            return Err(Error::Shape {
                op: "structure export",
                lhs: vec![scores.len()],
                rhs: vec![vars, vars],
            });
        }
        let k = scores.len() / mm;
        let matrix = |flat: &[f64]| -> Vec<Vec<f64>> { flat.chunks(vars).map(<[f64]>::to_vec).collect() };
        let lag_probabilities: Vec<Vec<Vec<f64>>> = scores.chunks(mm).map(matrix).collect();
        let adjacency = lag_probabilities
            .iter()
            .map(|lag| {
                lag.iter()
                    .map(|row| row.iter().map(|&p| u8::from(p >= threshold)).collect())
                    .collect()
            })
            .collect();
        let summary_flat: Vec<f64> = (0..mm)
            .map(|e| (0..k).map(|j| scores[j * mm + e]).sum::<f64>() / k as f64)
            .collect();
        Ok(Self {
            domain_id,
            max_lag: k,
            vars,
            threshold,
            lag_probabilities,
            adjacency,
            summary: matrix(&summary_flat),
        })
    }

    /// `k * M * M` probabilities, lag-major.
    pub fn flat_probabilities(&self) -> Vec<f64> {
        self.lag_probabilities.iter().flatten().flatten().copied().collect()
    }
}

fn write_matrix_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `structures.json`, `summary.csv` (`M x M`) and `lag_<j>.csv` for
/// each lag into `dir`, returning the written paths.
pub fn export_structures(
    params: &ModelParams,
    dataset: &Dataset,
    dir: &Path,
    threshold: f64,
) -> Result<(StructureExport, Vec<PathBuf>)> {
    if params.config().kind == ModelKind::Baseline {
        return Err(Error::InvalidArgument("the baseline model has no structures to export".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0,1), got {threshold}")));
    }
    let inf = infer(params, dataset, worker_threads())?;
    let scores = inf.edge_scores.expect("structured model yields scores");
    let export = StructureExport::from_scores(dataset.domain_id, params.config().vars, &scores, threshold)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = dir.join("structures.json");
    write_json(&json, &export)?;
    written.push(json);
    let summary = dir.join("summary.csv");
    write_matrix_csv(&summary, &export.summary)?;
    written.push(summary);
    for (j, lag) in export.lag_probabilities.iter().enumerate() {
        let p = dir.join(format!("lag_{}.csv", j + 1));
        write_matrix_csv(&p, lag)?;
        written.push(p);
    }
    Ok((export, written))
}

#[cfg(test)]
mod tests;
