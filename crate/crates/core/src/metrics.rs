//! Scores comparing generated paths with the historical series.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{reconstruct_values, NormalizedSeries};
use crate::error::{Error, Result};
use crate::generator::FsdeModel;
use crate::hurst::{burn_in_for, estimate_hurst};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_MAX_LAG: usize = 100;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

const FULL_STREAM: u64 = 0;
const FORECAST_STREAM: u64 = 1;

/// How per-bin histogram values are normalized in [`marginal_distance_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScale {
    /// Probability mass per bin; the distance lies in `[0, 1]`.
    #[default]
    Mass,
    /// Mass divided by bin width.
    Density,
}

/// Equal-width histogram of two samples over their pooled range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub historical: Vec<f64>,
    pub generated: Vec<f64>,
}

struct Binned {
    edges: Vec<f64>,
    historical: Vec<u64>,
    generated: Vec<u64>,
}

fn bin_counts(historical: &[f64], generated: &[f64], bins: usize) -> Result<Binned> {
    if bins < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {bins}")));
    }
    if historical.is_empty() || generated.is_empty() {
        return Err(Error::Domain("both samples must be nonempty".into()));
    }
    let (lo, hi) = historical
        .iter()
        .chain(generated)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain("samples must be finite".into()));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let counts = |xs: &[f64]| {
        let mut counts = vec![0u64; bins];
        for &x in xs {
            let i = if width > 0.0 {
                (((x - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[i] += 1;
        }
        counts
    };
    Ok(Binned {
        edges,
        historical: counts(historical),
        generated: counts(generated),
    })
}

pub fn histogram(historical: &[f64], generated: &[f64], bins: usize) -> Result<Histogram> {
    let b = bin_counts(historical, generated, bins)?;
    let masses = |c: &[u64], n: usize| c.iter().map(|&k| k as f64 / n as f64).collect();
    Ok(Histogram {
        historical: masses(&b.historical, historical.len()),
        generated: masses(&b.generated, generated.len()),
        edges: b.edges,
    })
}

/// Half the L1 distance between per-bin probability masses.
pub fn marginal_distance(historical: &[f64], generated: &[f64], bins: usize) -> Result<f64> {
    marginal_distance_with(historical, generated, bins, BinScale::Mass)
}

pub fn marginal_distance_with(
    historical: &[f64],
    generated: &[f64],
    bins: usize,
    scale: BinScale,
) -> Result<f64> {
    let b = bin_counts(historical, generated, bins)?;
    // exact in integers: sum |c_h n_g - c_g n_h| over 2 n_h n_g
    let (nh, ng) = (historical.len() as u128, generated.len() as u128);
    let num: u128 = b
        .historical
        .iter()
        .zip(&b.generated)
        .map(|(&h, &g)| (h as u128 * ng).abs_diff(g as u128 * nh))
        .sum();
    let mass = num as f64 / (2 * nh * ng) as f64;
    let width = b.edges[1] - b.edges[0];
    Ok(match scale {
        BinScale::Mass => mass,
        BinScale::Density if width > 0.0 => mass / width,
        BinScale::Density => 0.0,
    })
}

/// Sample autocorrelation of `|series|` at lags `1..=max_lag`.
pub fn acf_vector(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::Domain(format!(
            "series of length {} too short for lag {max_lag}",
            series.len()
        )));
    }
    let a: Vec<f64> = series.iter().map(|x| x.abs()).collect();
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if lo == hi {
        return Err(Error::Degenerate("absolute series is constant".into()));
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let d: Vec<f64> = a.iter().map(|x| x - mean).collect();
    let denom: f64 = d.iter().map(|x| x * x).sum();
    Ok((1..=max_lag)
        .map(|lag| d.iter().zip(&d[lag..]).map(|(x, y)| x * y).sum::<f64>() / denom)
        .collect())
}

/// `w_i = 2i / (S + 1)` for `i = 1..=S`; the weights average to one.
pub fn acf_weights(max_lag: usize) -> Vec<f64> {
    (1..=max_lag)
        .map(|i| 2.0 * i as f64 / (max_lag + 1) as f64)
        .collect()
}

/// Norm of the historical ACF minus the mean generated ACF, optionally
/// weighted lag by lag.
pub fn score_from_acfs(
    historical: &[f64],
    generated: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Domain("need at least one generated series".into()));
    }
    let s = historical.len();
    if let Some(g) = generated.iter().find(|g| g.len() != s) {
        return Err(Error::Dimension {
            expected: s,
            actual: g.len(),
        });
    }
    let m = generated.len() as f64;
    let mut total = 0.0;
    for i in 0..s {
        // mean of differences, so identical inputs give exactly zero
        let diff = generated.iter().map(|g| historical[i] - g[i]).sum::<f64>() / m;
        let w = weights.map_or(1.0, |w| w[i]);
        total += (w * diff).powi(2);
    }
    Ok(total.sqrt())
}

fn generated_acfs(generated: &[Vec<f64>], max_lag: usize) -> Result<Vec<Vec<f64>>> {
    generated
        .par_iter()
        .map(|g| acf_vector(g, max_lag))
        .collect()
}

pub fn acf_score(historical: &[f64], generated: &[Vec<f64>], max_lag: usize) -> Result<f64> {
    let h = acf_vector(historical, max_lag)?;
    score_from_acfs(&h, &generated_acfs(generated, max_lag)?, None)
}

pub fn wacf_score(historical: &[f64], generated: &[Vec<f64>], max_lag: usize) -> Result<f64> {
    let h = acf_vector(historical, max_lag)?;
    let w = acf_weights(max_lag);
    score_from_acfs(&h, &generated_acfs(generated, max_lag)?, Some(&w))
}

/// Coefficient of determination of `predicted` against `actual`.
pub fn r2_score(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: actual.len(),
            actual: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::Domain("no values to score".into()));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("actual values are constant".into()));
    }
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Anything that can produce normalized return paths.
pub trait PathGenerator: Sync {
    /// `m` paths of normalized returns between consecutive `timestamps`,
    /// each started from normalized level `z0` at `timestamps[0]`.
    fn sample_returns(
        &self,
        timestamps: &[f64],
        z0: f64,
        m: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Vec<Vec<f64>>>;
}

impl PathGenerator for FsdeModel {
    fn sample_returns(
        &self,
        timestamps: &[f64],
        z0: f64,
        m: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .sample_states(timestamps, z0, m, seed, stream)?
            .into_iter()
            .map(|z| z.windows(2).map(|w| w[1] - w[0]).collect())
            .collect())
    }
}

/// Returns the historical returns on every call.
#[derive(Debug, Clone)]
pub struct ReplayGenerator {
    timestamps: Vec<f64>,
    returns: Vec<f64>,
}

impl ReplayGenerator {
    pub fn new(series: &NormalizedSeries) -> Self {
        Self {
            timestamps: series.timestamps.clone(),
            returns: series.returns.clone(),
        }
    }
}

impl PathGenerator for ReplayGenerator {
    fn sample_returns(
        &self,
        timestamps: &[f64],
        _z0: f64,
        m: usize,
        _seed: u64,
        _stream: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let start = self
            .timestamps
            .iter()
            .position(|&t| t == timestamps[0])
            .filter(|s| self.timestamps[*s..].starts_with(timestamps))
            .ok_or_else(|| Error::Domain("replay only covers the historical timestamps".into()))?;
        let r = self.returns[start..start + timestamps.len() - 1].to_vec();
        Ok(vec![r; m])
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub paths: usize,
    pub bins: usize,
    /// Defaults to `min(100, T - 2)`.
    pub max_lag: Option<usize>,
    pub test_fraction: f64,
    pub bin_scale: BinScale,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            paths: 64,
            bins: DEFAULT_BINS,
            max_lag: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            bin_scale: BinScale::Mass,
            seed: 0,
        }
    }
}

/// Mean and standard deviation of the per-path Hurst estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hurst: HurstSummary,
    pub marginal: f64,
    pub acf: f64,
    pub wacf: f64,
    pub r2: f64,
    /// Hurst estimate of the historical returns.
    pub original_hurst: f64,
    pub max_lag: usize,
    pub bins: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "hurst_mean,hurst_std,marginal,acf,wacf,r2";

    pub fn csv_row(&self) -> String {
        use crate::dataio::fmt_f64;
        [
            self.hurst.mean,
            self.hurst.std,
            self.marginal,
            self.acf,
            self.wacf,
            self.r2,
        ]
        .map(fmt_f64)
        .join(",")
    }
}

/// Lag-by-lag historical and mean generated ACF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlogram {
    pub lags: Vec<usize>,
    pub historical: Vec<f64>,
    pub generated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub histogram: Histogram,
    pub correlogram: Correlogram,
}

fn hurst_of(returns: &[f64]) -> Result<f64> {
    Ok(estimate_hurst(returns, burn_in_for(returns.len()))?.hurst)
}

/// Scores `generator` against `series`.
pub fn evaluate(
    series: &NormalizedSeries,
    generator: &dyn PathGenerator,
    config: &EvalConfig,
) -> Result<Evaluation> {
    let t_len = series.returns.len();
    if config.paths < 1 {
        return Err(Error::Config("need at least one evaluation path".into()));
    }
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {}",
            config.test_fraction
        )));
    }
    if t_len < 4 {
        return Err(Error::Domain(format!(
            "need at least 4 returns, got {t_len}"
        )));
    }
    let max_lag = config.max_lag.unwrap_or(DEFAULT_MAX_LAG.min(t_len - 2));
    let gen = generator.sample_returns(
        &series.timestamps,
        0.0,
        config.paths,
        config.seed,
        FULL_STREAM,
    )?;

    let hursts: Vec<f64> = gen.par_iter().map(|r| hurst_of(r)).collect::<Result<_>>()?;
    let m = hursts.len() as f64;
    let mean = hursts.iter().sum::<f64>() / m;
    let std = if hursts.len() > 1 {
        (hursts.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };

    let pooled: Vec<f64> = gen.iter().flatten().copied().collect();
    let histogram = histogram(&series.returns, &pooled, config.bins)?;
    let marginal = marginal_distance_with(&series.returns, &pooled, config.bins, config.bin_scale)?;

    let hist_acf = acf_vector(&series.returns, max_lag)?;
    let gen_acfs = generated_acfs(&gen, max_lag)?;
    let acf = score_from_acfs(&hist_acf, &gen_acfs, None)?;
    let wacf = score_from_acfs(&hist_acf, &gen_acfs, Some(&acf_weights(max_lag)))?;
    let gen_mean_acf = (0..max_lag)
        .map(|i| gen_acfs.iter().map(|g| g[i]).sum::<f64>() / gen_acfs.len() as f64)
        .collect();

    let r2 = forecast_r2(series, generator, config)?;

    Ok(Evaluation {
        report: MetricReport {
            hurst: HurstSummary { mean, std },
            marginal,
            acf,
            wacf,
            r2,
            original_hurst: hurst_of(&series.returns)?,
            max_lag,
            bins: config.bins,
        },
        histogram,
        correlogram: Correlogram {
            lags: (1..=max_lag).collect(),
            historical: hist_acf,
            generated: gen_mean_acf,
        },
    })
}

/// R² of the cross-path mean of level continuations over the held-out tail.
fn forecast_r2(
    series: &NormalizedSeries,
    generator: &dyn PathGenerator,
    config: &EvalConfig,
) -> Result<f64> {
    let n_obs = series.timestamps.len();
    let test = ((n_obs as f64 * config.test_fraction).round() as usize).clamp(2, n_obs - 2);
    let last_train = n_obs - 1 - test;
    let levels = reconstruct_values(&series.returns, &series.record, series.initial)?;
    let z: f64 = series.returns[..last_train].iter().sum();
    let ts = &series.timestamps[last_train..];
    let paths = generator.sample_returns(ts, z, config.paths, config.seed, FORECAST_STREAM)?;
    let mut mean = vec![0.0; test];
    for r in &paths {
        let x = reconstruct_values(r, &series.record, levels[last_train])?;
        for (acc, v) in mean.iter_mut().zip(&x[1..]) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= paths.len() as f64;
    }
    r2_score(&levels[last_train + 1..], &mean)
}
