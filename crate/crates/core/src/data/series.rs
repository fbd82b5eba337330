use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::GroundTruth;
use crate::error::{Error, Result};

/// Multivariate series stored row-major (`len x vars`).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    vars: usize,
    values: Vec<f64>,
}

impl Series {
    pub fn new(vars: usize, values: Vec<f64>) -> Result<Self> {
        if vars == 0 || values.len() % vars != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of {vars} variables",
                values.len()
            )));
        }
        Ok(Self { vars, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let vars = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vars) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(vars, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.vars
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vars..(t + 1) * self.vars]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.values.iter().skip(m).step_by(self.vars).copied().collect()
    }

    pub(crate) fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.vars);
        self.values.extend_from_slice(row);
    }

    pub(crate) fn rows_from(&self, start: usize) -> Series {
        Series {
            vars: self.vars,
            values: self.values[start * self.vars..].to_vec(),
        }
    }
}

/// Keeps rows `0, interval, 2 * interval, ...`.
pub fn subsample_interval(series: &Series, interval: usize) -> Result<Series> {
    if interval == 0 {
        return Err(Error::InvalidArgument("sample interval must be >= 1".into()));
    }
    let values = (0..series.len())
        .step_by(interval)
        .flat_map(|t| series.row(t).iter().copied())
        .collect();
    Series::new(series.vars(), values)
}

/// Per-variable mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn denormalize(&self, series: &Series) -> Result<Series> {
        if series.vars() != self.mean.len() {
            return Err(Error::Data(format!(
                "stats cover {} variables, series has {}",
                self.mean.len(),
                series.vars()
            )));
        }
        let m = series.vars();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % m] + self.mean[i % m])
            .collect();
        Series::new(m, values)
    }

    pub fn normalize(&self, series: &Series) -> Result<Series> {
        if series.vars() != self.mean.len() {
            return Err(Error::Data(format!(
                "stats cover {} variables, series has {}",
                self.mean.len(),
                series.vars()
            )));
        }
        let m = series.vars();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % m]) / self.std[i % m])
            .collect();
        Series::new(m, values)
    }
}

/// Z-score normalisation per variable using the population std.
pub fn zscore_normalize(series: &Series) -> Result<(Series, NormStats)> {
    let n = series.len();
    if n == 0 {
        return Err(Error::Data("cannot normalise an empty series".into()));
    }
    let mut mean = Vec::with_capacity(series.vars());
    let mut std = Vec::with_capacity(series.vars());
    for m in 0..series.vars() {
        let col = series.column(m);
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd < 1e-8 {
            return Err(Error::Data(format!(
                "variable {m} is (near) constant: std {sd:e}"
            )));
        }
        mean.push(mu);
        std.push(sd);
    }
    let stats = NormStats { mean, std };
    let normalized = stats.normalize(series)?;
    Ok((normalized, stats))
}

/// Observed history `x` (T x M) and forecast target `y` (tau x M).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesWindow {
    pub history: Vec<f64>,
    pub target: Vec<f64>,
    pub vars: usize,
    /// Row of the source series where the history begins.
    pub start: usize,
    pub domain_id: usize,
}

impl TimeSeriesWindow {
    pub fn history_len(&self) -> usize {
        self.history.len() / self.vars
    }

    pub fn horizon(&self) -> usize {
        self.target.len() / self.vars
    }

    pub fn history_row(&self, t: usize) -> &[f64] {
        &self.history[t * self.vars..(t + 1) * self.vars]
    }

    pub fn target_row(&self, t: usize) -> &[f64] {
        &self.target[t * self.vars..(t + 1) * self.vars]
    }
}

/// A set of windows sharing `M`, `T` and `tau`, all from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<TimeSeriesWindow>,
    pub stats: Option<NormStats>,
    pub ground_truth: Option<GroundTruth>,
    pub domain_id: usize,
    pub vars: usize,
    pub history_len: usize,
    pub horizon: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Same metadata, different windows.
    pub fn with_windows(&self, windows: Vec<TimeSeriesWindow>) -> Dataset {
        Dataset {
            windows,
            stats: self.stats.clone(),
            ground_truth: self.ground_truth.clone(),
            domain_id: self.domain_id,
            vars: self.vars,
            history_len: self.history_len,
            horizon: self.horizon,
        }
    }
}

/// Cuts `series` into windows of `history_len + horizon` rows starting at
/// offsets `0, stride, 2 * stride, ...`.
pub fn window_dataset(
    series: &Series,
    history_len: usize,
    horizon: usize,
    stride: usize,
    domain_id: usize,
) -> Result<Dataset> {
    if history_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "history length, horizon and stride must be >= 1".into(),
        ));
    }
    let span = history_len + horizon;
    if series.len() < span {
        return Err(Error::Data(format!(
            "series of length {} is shorter than T + tau = {span}",
            series.len()
        )));
    }
    let m = series.vars();
    let count = (series.len() - span) / stride + 1;
    let windows = (0..count)
        .map(|w| {
            let start = w * stride;
            let block = &series.values()[start * m..(start + span) * m];
            TimeSeriesWindow {
                history: block[..history_len * m].to_vec(),
                target: block[history_len * m..].to_vec(),
                vars: m,
                start,
                domain_id,
            }
        })
        .collect();
    Ok(Dataset {
        windows,
        stats: None,
        ground_truth: None,
        domain_id,
        vars: m,
        history_len,
        horizon,
    })
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Disjoint train/val/test partition of the windows.
///
/// Chronological mode orders by window start so every training window
/// begins before every validation window, and so on. Otherwise windows are
/// shuffled with `rng` first.
pub fn split_dataset<R: Rng + ?Sized>(
    dataset: &Dataset,
    ratios: SplitRatios,
    rng: &mut R,
    chronological: bool,
) -> Result<(Dataset, Dataset, Dataset)> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {r:?}"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * r[0]).round() as usize;
    let n_val = (n as f64 * r[1]).round() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val > n {
        return Err(Error::Data(format!(
            "split of {n} windows with ratios {r:?} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if chronological {
        order.sort_by_key(|&i| dataset.windows[i].start);
    } else {
        order.shuffle(rng);
    }
    let take = |idx: &[usize]| {
        dataset.with_windows(idx.iter().map(|&i| dataset.windows[i].clone()).collect())
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(len: usize, vars: usize) -> Series {
        Series::new(vars, (0..len * vars).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn subsample_examples() {
        let s = ramp(6, 1);
        assert_eq!(subsample_interval(&s, 2).unwrap().values(), &[0.0, 2.0, 4.0]);
        assert_eq!(subsample_interval(&s, 1).unwrap(), s);
        let s7 = ramp(7, 1);
        assert_eq!(subsample_interval(&s7, 3).unwrap().values(), &[0.0, 3.0, 6.0]);
        assert!(subsample_interval(&s, 0).is_err());
    }

    #[test]
    fn zscore_hand_example() {
        let s = Series::new(1, vec![1.0, 2.0, 3.0]).unwrap();
        let (z, stats) = zscore_normalize(&s).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z.values()[0] + expect).abs() < 1e-12);
        assert!(z.values()[1].abs() < 1e-12);
        assert!((z.values()[2] - expect).abs() < 1e-12);
        assert!((expect - 1.2247).abs() < 1e-4);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zscore_rejects_constant_variable() {
        let s = Series::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]).unwrap();
        match zscore_normalize(&s) {
            Err(Error::Data(msg)) => assert!(msg.contains("variable 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn window_counts() {
        let s = ramp(100, 2);
        assert_eq!(window_dataset(&s, 30, 10, 1, 0).unwrap().len(), 61);
        assert_eq!(window_dataset(&ramp(40, 2), 30, 10, 1, 0).unwrap().len(), 1);
        assert_eq!(window_dataset(&s, 30, 10, 100, 0).unwrap().len(), 1);
        assert!(window_dataset(&ramp(39, 2), 30, 10, 1, 0).is_err());
        let d = window_dataset(&s, 30, 10, 3, 4).unwrap();
        assert_eq!(d.len(), (100 - 40) / 3 + 1);
        let w = &d.windows[2];
        assert_eq!(w.start, 6);
        assert_eq!(w.history_row(0), s.row(6));
        assert_eq!(w.target_row(0), s.row(36));
        assert_eq!(w.domain_id, 4);
    }

    #[test]
    fn chronological_split_sizes_and_order() {
        let d = window_dataset(&ramp(109, 1), 5, 5, 1, 0).unwrap();
        assert_eq!(d.len(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tr, va, te) = split_dataset(&d, SplitRatios::default(), &mut rng, true).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (60, 20, 20));
        let last_train = tr.windows.iter().map(|w| w.start).max().unwrap();
        let first_val = va.windows.iter().map(|w| w.start).min().unwrap();
        let last_val = va.windows.iter().map(|w| w.start).max().unwrap();
        let first_test = te.windows.iter().map(|w| w.start).min().unwrap();
        assert!(last_train < first_val && last_val < first_test);
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let d = window_dataset(&ramp(109, 1), 5, 5, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = 1e-12;
        let r = SplitRatios {
            train: 1.0,
            val: eps,
            test: eps,
        };
        assert!(split_dataset(&d, r, &mut rng, true).is_err());
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&d, bad, &mut rng, true).is_err());
    }

    #[test]
    fn shuffled_split_is_seed_deterministic_and_disjoint() {
        let d = window_dataset(&ramp(109, 1), 5, 5, 1, 0).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let (a, b, c) = split_dataset(&d, SplitRatios::default(), &mut rng, false).unwrap();
            let starts = |x: &Dataset| x.windows.iter().map(|w| w.start).collect::<Vec<_>>();
            (starts(&a), starts(&b), starts(&c))
        };
        let first = run();
        assert_eq!(first, run());
        let mut all: Vec<usize> = [first.0, first.1, first.2].concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn nested_subsampling_composes(len in 1usize..200, a in 1usize..6, b in 1usize..6) {
            let s = ramp(len, 2);
            let twice = subsample_interval(&subsample_interval(&s, a).unwrap(), b).unwrap();
            prop_assert_eq!(twice, subsample_interval(&s, a * b).unwrap());
        }

        #[test]
        fn zscore_moments_and_round_trip(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 5..60)
        ) {
            let s = Series::from_rows(&rows).unwrap();
            prop_assume!((0..3).all(|m| {
                let c = s.column(m);
                let mu = c.iter().sum::<f64>() / c.len() as f64;
                (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c.len() as f64).sqrt() > 1e-3
            }));
            let (z, stats) = zscore_normalize(&s).unwrap();
            for m in 0..3 {
                let c = z.column(m);
                let n = c.len() as f64;
                let mu = c.iter().sum::<f64>() / n;
                let sd = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mu.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
            let back = stats.denormalize(&z).unwrap();
            for (x, y) in back.values().iter().zip(s.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let (again, _) = zscore_normalize(&z).unwrap();
            for (x, y) in again.values().iter().zip(z.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
