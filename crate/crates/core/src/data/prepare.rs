use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::{
    split_dataset, window_dataset, zscore_normalize, Dataset, NormStats, Series, SplitRatios,
};
use crate::error::{Error, Result};

/// Windowing settings shared by every domain of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub ratios: SplitRatios,
}

/// Chronological train/validation/test windows of one domain, normalized
/// with statistics of the training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

/// Normalizes `series` with the mean/std of its first `ratios.train`
/// fraction of rows, windows it and splits the windows chronologically.
pub fn prepare_domain(series: &Series, domain_id: usize, spec: &WindowSpec) -> Result<DomainSplits> {
    let train_rows = (series.len() as f64 * spec.ratios.train).round() as usize;
    if train_rows < 2 {
        return Err(Error::Data(format!(
            "series of {} rows leaves no training rows",
            series.len()
        )));
    }
    let head = Series::new(series.vars(), series.values()[..train_rows * series.vars()].to_vec())?;
    let (_, stats) = zscore_normalize(&head)?;
    prepare_with_stats(series, domain_id, spec, stats)
}

/// As [`prepare_domain`] with given statistics.
pub fn prepare_with_stats(
    series: &Series,
    domain_id: usize,
    spec: &WindowSpec,
    stats: NormStats,
) -> Result<DomainSplits> {
    let normalized = stats.normalize(series)?;
    let mut all = window_dataset(&normalized, spec.history_len, spec.horizon, spec.stride, domain_id)?;
    all.stats = Some(stats.clone());
    // Chronological splitting never draws from the generator.
    let (train, val, test) = split_dataset(&all, spec.ratios, &mut ChaCha8Rng::seed_from_u64(0), true)?;
    Ok(DomainSplits {
        train,
        val,
        test,
        stats,
    })
}
