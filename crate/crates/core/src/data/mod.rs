//! Synthetic multi-domain data, windowing, normalisation and splitting.

pub mod io;
mod prepare;
mod series;
mod synthetic;

pub use prepare::{prepare_domain, prepare_with_stats, DomainSplits, WindowSpec};
pub use series::{
    split_dataset, subsample_interval, window_dataset, zscore_normalize, Dataset, NormStats,
    Series, SplitRatios, TimeSeriesWindow,
};
pub use synthetic::{
    generate_domains, perturb_weights, sample_structures, simulate_domain, simulate_from,
    spectral_radius, stabilize, DomainConfig, GroundTruth, NoiseParam, WeightedLagStructure,
    BURN_IN, MAX_SPECTRAL_RADIUS, MIN_WEIGHT,
};
