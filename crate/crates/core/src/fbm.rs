//! Exact sampling of fractional Gaussian noise and fractional Brownian motion.
//!
//! Uniform grids use circulant embedding (Davies–Harte): the autocovariance
//! of the increments is embedded in a circulant matrix of size `2n` whose
//! eigenvalues come from one FFT, and each sample costs one more FFT.
//! Irregular grids factor the dense increment covariance by Cholesky.
//! Both factors are computed once per grid and reused for every draw.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::path::{check_increasing, SamplePath};
use crate::rng;

/// Relative tolerance used to decide that a grid is uniform.
const UNIFORM_RTOL: f64 = 1e-9;
/// Clipped negative eigenvalue mass, relative to the trace, tolerated silently.
const CLIP_RTOL: f64 = 1e-12;
/// Diagonal jitter, relative to the mean variance, added on a failed Cholesky.
const JITTER: f64 = 1e-12;

pub(crate) fn check_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("hurst index {hurst} outside (0, 1)")))
    }
}

/// Covariance of fractional Brownian motion, `E[B_s B_t]`.
pub fn fbm_covariance(hurst: f64, s: f64, t: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if !(s >= 0.0 && t >= 0.0) {
        return Err(Error::Domain(format!(
            "times must be nonnegative, got ({s}, {t})"
        )));
    }
    let h2 = 2.0 * hurst;
    Ok((t.abs().powf(h2) + s.abs().powf(h2) - (t - s).abs().powf(h2)) / 2.0)
}

/// Autocovariance at `lag` of fGn increments taken over steps of length `dt`.
pub fn fgn_autocovariance(hurst: f64, lag: usize, dt: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("step {dt} must be positive")));
    }
    Ok(dt.powf(2.0 * hurst) * unit_autocovariance(hurst, lag))
}

fn unit_autocovariance(hurst: f64, lag: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = lag as f64;
    ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2)) / 2.0
}

/// Covariance of the increments `B(t[i+1]) - B(t[i])` on an arbitrary grid.
pub fn increment_covariance(hurst: f64, grid: &[f64]) -> Result<DMatrix<f64>> {
    check_hurst(hurst)?;
    let n = grid.len().saturating_sub(1);
    let h2 = 2.0 * hurst;
    let p = |x: f64| x.abs().powf(h2);
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (a0, a1) = (grid[i], grid[i + 1]);
        let (b0, b1) = (grid[j], grid[j + 1]);
        (p(a1 - b0) + p(a0 - b1) - p(a1 - b1) - p(a0 - b0)) / 2.0
    }))
}

/// Hurst index plus the time grid a noise source lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct FbmSpec {
    hurst: f64,
    grid: Vec<f64>,
}

impl FbmSpec {
    pub fn new(hurst: f64, grid: Vec<f64>) -> Result<Self> {
        check_hurst(hurst)?;
        if grid.len() < 2 {
            return Err(Error::Domain("grid needs at least two points".into()));
        }
        if grid[0] != 0.0 {
            return Err(Error::Domain(format!(
                "grid must start at 0, got {}",
                grid[0]
            )));
        }
        check_increasing(&grid)?;
        Ok(Self { hurst, grid })
    }

    /// `n` steps of length `dt` starting at 0.
    pub fn uniform(hurst: f64, n: usize, dt: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("need at least one step".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("step {dt} must be positive")));
        }
        Self::new(hurst, (0..=n).map(|i| i as f64 * dt).collect())
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// The common step length if the grid is uniform.
    pub fn uniform_step(&self) -> Option<f64> {
        let n = self.steps();
        let dt = self.grid[n] / n as f64;
        self.grid
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= UNIFORM_RTOL * dt)
            .then_some(dt)
    }
}

/// Increments of one fBm draw, one per grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements {
    pub values: Vec<f64>,
    pub spec: FbmSpec,
    pub seed: u64,
}

impl NoiseIncrements {
    /// The discrete fBm path obtained by cumulative summation from 0.
    pub fn to_path(&self) -> SamplePath {
        let mut values = Vec::with_capacity(self.values.len() + 1);
        let mut acc = 0.0;
        values.push(acc);
        for dx in &self.values {
            acc += dx;
            values.push(acc);
        }
        SamplePath::new(self.spec.grid.clone(), values).expect("grid validated by FbmSpec")
    }
}

enum Factor {
    Circulant {
        /// `sqrt(max(lambda_k, 0) / N)` for the embedding of size `N = 2n`.
        weights: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    Dense(DMatrix<f64>),
}

/// Reusable exact sampler for the increments on one grid.
pub struct FbmSampler {
    spec: FbmSpec,
    factor: Factor,
    warning: Option<String>,
}

impl std::fmt::Debug for FbmSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbmSampler")
            .field("spec", &self.spec)
            .field("circulant", &self.is_circulant())
            .field("warning", &self.warning)
            .finish()
    }
}

impl FbmSampler {
    pub fn new(spec: FbmSpec) -> Result<Self> {
        if let Some(dt) = spec.uniform_step() {
            match circulant_weights(spec.hurst, spec.steps(), dt) {
                Embedding::Exact(weights) => {
                    let fft = FftPlanner::new().plan_fft_forward(weights.len());
                    return Ok(Self {
                        spec,
                        factor: Factor::Circulant { weights, fft },
                        warning: None,
                    });
                }
                Embedding::Indefinite { clipped, trace } => {
                    let warning = Some(format!(
                        "circulant embedding lost {clipped:.3e} of trace {trace:.3e}; \
                         fell back to Cholesky"
                    ));
                    let lower = cholesky(&spec)?;
                    return Ok(Self {
                        spec,
                        factor: Factor::Dense(lower),
                        warning,
                    });
                }
            }
        }
        let lower = cholesky(&spec)?;
        Ok(Self {
            spec,
            factor: Factor::Dense(lower),
            warning: None,
        })
    }

    pub fn spec(&self) -> &FbmSpec {
        &self.spec
    }

    pub fn is_circulant(&self) -> bool {
        matches!(self.factor, Factor::Circulant { .. })
    }

    /// Set when the sampler had to deviate from its preferred method.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// Draws one set of increments from `rng`.
    pub fn sample_increments<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.spec.steps();
        match &self.factor {
            Factor::Circulant { weights, fft } => {
                let mut buf: Vec<Complex64> = weights
                    .iter()
                    .map(|&w| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(w * re, w * im)
                    })
                    .collect();
                fft.process(&mut buf);
                buf[..n].iter().map(|c| c.re).collect()
            }
            Factor::Dense(lower) => {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                (0..n)
                    .map(|i| (0..=i).map(|j| lower[(i, j)] * z[j]).sum())
                    .collect()
            }
        }
    }

    /// Increments for the stream keyed by `seed`.
    pub fn sample(&self, seed: u64) -> NoiseIncrements {
        let mut r = rng::stream(seed, &[]);
        NoiseIncrements {
            values: self.sample_increments(&mut r),
            spec: self.spec.clone(),
            seed,
        }
    }

    /// The dense linear map from standard normals to increments.
    ///
    /// Rows index increments; columns index the underlying normal draws.
    /// `L * L^T` reproduces the increment covariance.
    pub fn factor_matrix(&self) -> DMatrix<f64> {
        let n = self.spec.steps();
        match &self.factor {
            Factor::Circulant { weights, .. } => {
                let big = weights.len();
                DMatrix::from_fn(n, 2 * big, |j, col| {
                    let k = col % big;
                    let angle = 2.0 * std::f64::consts::PI * ((j * k) % big) as f64 / big as f64;
                    let trig = if col < big { angle.cos() } else { angle.sin() };
                    weights[k] * trig
                })
            }
            Factor::Dense(lower) => lower.clone(),
        }
    }
}

enum Embedding {
    Exact(Vec<f64>),
    Indefinite { clipped: f64, trace: f64 },
}

fn circulant_weights(hurst: f64, n: usize, dt: f64) -> Embedding {
    let big = 2 * n;
    let scale = dt.powf(2.0 * hurst);
    let mut row: Vec<Complex64> = (0..big)
        .map(|k| {
            let lag = if k <= n { k } else { big - k };
            Complex64::new(scale * unit_autocovariance(hurst, lag), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(big).process(&mut row);
    let trace = big as f64 * scale;
    let clipped: f64 = row.iter().map(|c| (-c.re).max(0.0)).sum();
    if clipped > CLIP_RTOL * trace {
        return Embedding::Indefinite { clipped, trace };
    }
    Embedding::Exact(
        row.iter()
            .map(|c| (c.re.max(0.0) / big as f64).sqrt())
            .collect(),
    )
}

fn cholesky(spec: &FbmSpec) -> Result<DMatrix<f64>> {
    let cov = increment_covariance(spec.hurst, &spec.grid)?;
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let n = cov.nrows();
    let jitter = JITTER * cov.trace() / n as f64;
    let jittered = cov + DMatrix::identity(n, n) * jitter;
    jittered.cholesky().map(|c| c.l()).ok_or_else(|| {
        Error::Numerical("increment covariance not positive definite after jitter".into())
    })
}

/// `n` fGn increments with step `dt`, reproducible from `seed`.
pub fn sample_fgn_uniform(hurst: f64, n: usize, dt: f64, seed: u64) -> Result<NoiseIncrements> {
    let sampler = FbmSampler::new(FbmSpec::uniform(hurst, n, dt)?)?;
    Ok(sampler.sample(seed))
}

/// One fBm path on the spec's grid, starting at exactly 0.
pub fn sample_fbm(spec: FbmSpec, seed: u64) -> Result<SamplePath> {
    Ok(FbmSampler::new(spec)?.sample(seed).to_path())
}
