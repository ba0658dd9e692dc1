//! Explicit Euler scheme for SDEs driven by fractional Brownian motion.
//!
//! On a grid `t_0 < t_1 < ...` the recursion is
//! `x[i+1] = x[i] + b(x[i]) * (t[i+1] - t[i]) + s(x[i]) * dB[i]`
//! where `dB[i]` is the exact fBm increment over the same interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{check_hurst, FbmSampler, FbmSpec};
pub use crate::path::SamplePath;

/// Observation intervals are split into this many equal solver steps by default.
pub const DEFAULT_SUBSTEPS: usize = 4;

/// Euler solution of `dX = drift(X) dt + diffusion(X) dB` with the given increments.
pub fn euler_solve<B, S>(
    drift: B,
    diffusion: S,
    x0: f64,
    grid: &[f64],
    noise: &[f64],
) -> Result<SamplePath>
where
    B: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
{
    if grid.len() != noise.len() + 1 {
        return Err(Error::Dimension {
            expected: grid.len().saturating_sub(1),
            actual: noise.len(),
        });
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut x = x0;
    values.push(x);
    for (i, (w, db)) in grid.windows(2).zip(noise).enumerate() {
        x += drift(x) * (w[1] - w[0]) + diffusion(x) * db;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: i + 1,
                context: "euler step left the finite range".into(),
            });
        }
        values.push(x);
    }
    SamplePath::new(grid.to_vec(), values)
}

/// Splits each interval of `grid` into `substeps` equal pieces.
///
/// Observation `k` of the input sits at index `k * substeps` of the output.
pub fn refine_grid(grid: &[f64], substeps: usize) -> Vec<f64> {
    let substeps = substeps.max(1);
    let mut out = Vec::with_capacity((grid.len().saturating_sub(1)) * substeps + 1);
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        out.extend((0..substeps).map(|j| w[0] + j as f64 * h));
    }
    if let Some(&last) = grid.last() {
        out.push(last);
    }
    out
}

/// Sums consecutive blocks of `factor` fine increments.
pub fn aggregate_increments(fine: &[f64], factor: usize) -> Vec<f64> {
    fine.chunks(factor).map(|c| c.iter().sum()).collect()
}

/// Parameters of the fractional Ornstein–Uhlenbeck equation `dX = alpha X dt + beta dB^H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FouParams {
    pub alpha: f64,
    pub beta: f64,
    pub hurst: f64,
    pub x0: f64,
}

impl FouParams {
    /// Mean reversion and noise scale of the synthetic benchmark series.
    pub fn benchmark(hurst: f64) -> Self {
        Self {
            alpha: -0.05,
            beta: 0.1,
            hurst,
            x0: 0.0,
        }
    }
}

/// fOU path on `n` uniform steps over `[0, horizon]`.
pub fn generate_fou(params: FouParams, n: usize, horizon: f64, seed: u64) -> Result<SamplePath> {
    check_hurst(params.hurst)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon {horizon} must be positive")));
    }
    let spec = FbmSpec::uniform(params.hurst, n, horizon / n as f64)?;
    let noise = FbmSampler::new(spec)?.sample(seed);
    let FouParams { alpha, beta, .. } = params;
    euler_solve(
        |x| alpha * x,
        |_| beta,
        params.x0,
        noise.spec.grid(),
        &noise.values,
    )
}

/// Fine-grid points per coarse step used by [`convergence_order`].
pub const CONVERGENCE_REFINEMENT: usize = 64;

/// Observed order of strong convergence from a self-convergence study.
///
/// One fBm path is drawn on a grid `CONVERGENCE_REFINEMENT` times finer than
/// `coarse_n` steps. The Euler solution there is the reference; the solutions
/// on `coarse_n` and `2 * coarse_n` steps reuse the same noise summed over
/// coarse intervals. Each coarse solution is extended as a step function and
/// compared to the reference in the sup norm over the fine grid. The result is
/// `log2(err(n) / err(2n))`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_order<B, S>(
    drift: B,
    diffusion: S,
    x0: f64,
    hurst: f64,
    horizon: f64,
    coarse_n: usize,
    seed: u64,
) -> Result<f64>
where
    B: Fn(f64) -> f64 + Copy,
    S: Fn(f64) -> f64 + Copy,
{
    let (e1, e2) = convergence_errors(drift, diffusion, x0, hurst, horizon, coarse_n, seed)?;
    if !(e1 > 0.0 && e2 > 0.0) {
        return Err(Error::Degenerate("discretization error vanished".into()));
    }
    Ok((e1 / e2).log2())
}

/// Sup-norm errors of the `coarse_n` and `2 * coarse_n` step solutions.
#[allow(clippy::too_many_arguments)]
pub fn convergence_errors<B, S>(
    drift: B,
    diffusion: S,
    x0: f64,
    hurst: f64,
    horizon: f64,
    coarse_n: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    B: Fn(f64) -> f64 + Copy,
    S: Fn(f64) -> f64 + Copy,
{
    if coarse_n == 0 {
        return Err(Error::Domain("coarse grid needs at least one step".into()));
    }
    let fine_n = CONVERGENCE_REFINEMENT * coarse_n;
    let spec = FbmSpec::uniform(hurst, fine_n, horizon / fine_n as f64)?;
    let noise = FbmSampler::new(spec)?.sample(seed);
    let fine_grid = noise.spec.grid().to_vec();
    let reference = euler_solve(drift, diffusion, x0, &fine_grid, &noise.values)?;

    let sup_error = |n: usize| -> Result<f64> {
        let factor = fine_n / n;
        let grid: Vec<f64> = fine_grid.iter().step_by(factor).copied().collect();
        let coarse = euler_solve(
            drift,
            diffusion,
            x0,
            &grid,
            &aggregate_increments(&noise.values, factor),
        )?;
        Ok(reference
            .values()
            .iter()
            .enumerate()
            .map(|(i, r)| (coarse.values()[i / factor] - r).abs())
            .fold(0.0, f64::max))
    };
    Ok((sup_error(coarse_n)?, sup_error(2 * coarse_n)?))
}
