//! Maximum-likelihood training of the drift and diffusion networks.
//!
//! Every iteration simulates `M` paths over the observed timestamps, fits a
//! Gaussian to the `M` generated returns at each step, scores the observed
//! returns under those Gaussians, and backpropagates through the unrolled
//! Euler scheme before an Adam update.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{NormalizationRecord, NormalizedSeries};
use crate::error::{Error, Result};
use crate::generator::{
    backpropagate, backpropagate_taped, simulate, simulate_taped, FsdeModel, SimGrid,
};
use crate::hurst::{burn_in_for, estimate_hurst};
use crate::net::NetPair;
use crate::rng;

/// Lower bound on the per-step generated variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const EARLY_STOP_WINDOW: usize = 10;
const EARLY_STOP_TOL: f64 = 1e-6;
const INIT_STREAM: u64 = 0x1417;
/// Above this many stored floats per iteration, activations are recomputed
/// in the reverse pass instead of kept from the forward pass.
const TAPE_BUDGET: usize = 1 << 25;

fn default_widths() -> Vec<usize> {
    vec![20, 20]
}
fn default_paths() -> usize {
    64
}
fn default_substeps() -> usize {
    crate::solver::DEFAULT_SUBSTEPS
}
fn default_lr() -> f64 {
    0.04
}
fn default_steps() -> usize {
    100
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Hurst index of the driving noise; estimated from the data when absent.
    #[serde(default)]
    pub hurst: Option<f64>,
    #[serde(default = "default_widths")]
    pub drift_widths: Vec<usize>,
    #[serde(default = "default_widths")]
    pub diffusion_widths: Vec<usize>,
    /// Paths simulated per iteration.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Euler steps per observation interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Reuse the first iteration's noise in every iteration.
    #[serde(default)]
    pub fixed_noise: bool,
    /// Stop once the loss improves by less than 1e-6 over 10 iterations.
    #[serde(default)]
    pub early_stop: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hurst: None,
            drift_widths: default_widths(),
            diffusion_widths: default_widths(),
            paths: default_paths(),
            substeps: default_substeps(),
            learning_rate: default_lr(),
            steps: default_steps(),
            seed: 0,
            fixed_noise: false,
            early_stop: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return Err(Error::Config(format!(
                "need at least 2 paths, got {}",
                self.paths
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("need at least 1 training step".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.substeps < 1 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if let Some(h) = self.hurst {
            crate::fbm::check_hurst(h).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Configured Hurst index, or the R/S estimate of `returns`.
    pub fn resolve_hurst(&self, returns: &[f64]) -> Result<f64> {
        match self.hurst {
            Some(h) => Ok(h),
            None => {
                let h = estimate_hurst(returns, burn_in_for(returns.len()))?.hurst;
                Ok(h.clamp(0.01, 0.99))
            }
        }
    }
}

/// Log-density of `N(mean, var)` at `x`.
pub fn gaussian_log_pdf(mean: f64, var: f64, x: f64) -> Result<f64> {
    if var.is_nan() || var <= 0.0 {
        return Err(Error::Domain(format!(
            "variance must be positive, got {var}"
        )));
    }
    Ok(-0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var))
}

/// Sample mean and variance (divisor `M - 1`, floored at [`VARIANCE_FLOOR`]).
pub fn per_step_density(samples: &[f64]) -> Result<(f64, f64)> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {m}")));
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok((mean, var.max(VARIANCE_FLOOR)))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: grads.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

struct SimPath {
    noise: Vec<f64>,
    states: Vec<f64>,
    tapes: Vec<f64>,
}

/// The likelihood objective for one observed series.
#[derive(Debug)]
pub struct Objective<'a> {
    grid: SimGrid,
    returns: &'a [f64],
    paths: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        timestamps: &[f64],
        returns: &'a [f64],
        hurst: f64,
        substeps: usize,
        paths: usize,
    ) -> Result<Self> {
        if timestamps.len() != returns.len() + 1 {
            return Err(Error::Dimension {
                expected: returns.len() + 1,
                actual: timestamps.len(),
            });
        }
        if paths < 2 {
            return Err(Error::Config(format!("need at least 2 paths, got {paths}")));
        }
        let grid = SimGrid::new(timestamps, hurst, substeps)?;
        Ok(Self {
            grid,
            returns,
            paths,
        })
    }

    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    fn simulate_all(
        &self,
        nets: &NetPair,
        seed: u64,
        key: u64,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        Ok(self
            .simulate_paths(nets, seed, key, false)?
            .into_iter()
            .map(|p| (p.noise, p.states))
            .collect())
    }

    fn simulate_paths(
        &self,
        nets: &NetPair,
        seed: u64,
        key: u64,
        keep_tapes: bool,
    ) -> Result<Vec<SimPath>> {
        (0..self.paths)
            .into_par_iter()
            .map(|i| {
                let noise = self.grid.noise(seed, &[key, i as u64]);
                let mut tapes = Vec::new();
                let states = if keep_tapes {
                    simulate_taped(nets, self.grid.dt(), &noise, 0.0, &mut tapes)?
                } else {
                    simulate(nets, self.grid.dt(), &noise, 0.0)?
                };
                Ok(SimPath {
                    noise,
                    states,
                    tapes,
                })
            })
            .collect()
    }

    fn generated_returns(&self, states: &[f64]) -> Vec<f64> {
        let s = self.grid.substeps();
        (0..self.returns.len())
            .map(|t| states[(t + 1) * s] - states[t * s])
            .collect()
    }

    /// Per-step `(mean, var)` of the generated returns.
    pub fn densities(&self, nets: &NetPair, seed: u64, key: u64) -> Result<Vec<(f64, f64)>> {
        let sims = self.simulate_all(nets, seed, key)?;
        let gen: Vec<Vec<f64>> = sims
            .iter()
            .map(|(_, s)| self.generated_returns(s))
            .collect();
        (0..self.returns.len())
            .map(|t| per_step_density(&gen.iter().map(|g| g[t]).collect::<Vec<_>>()))
            .collect()
    }

    /// Loss, with its parameter gradient when `want_grad` is set.
    pub fn evaluate(
        &self,
        nets: &NetPair,
        seed: u64,
        key: u64,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let stride = nets.drift.tape_len() + nets.diffusion.tape_len();
        let keep_tapes = want_grad && self.paths * self.grid.steps() * stride <= TAPE_BUDGET;
        let sims = self.simulate_paths(nets, seed, key, keep_tapes)?;
        let gen: Vec<Vec<f64>> = sims
            .iter()
            .map(|p| self.generated_returns(&p.states))
            .collect();
        let t_len = self.returns.len();
        let m = self.paths as f64;
        let mut loss = 0.0;
        // dL/dR_{i,t} = coef_mean[t] + coef_dev[t] * (R_{i,t} - mean_t)
        let mut coef_mean = vec![0.0; t_len];
        let mut coef_dev = vec![0.0; t_len];
        let mut means = vec![0.0; t_len];
        let mut column = vec![0.0; self.paths];
        for t in 0..t_len {
            for (c, g) in column.iter_mut().zip(&gen) {
                *c = g[t];
            }
            let (mean, var) = per_step_density(&column)?;
            let r = self.returns[t];
            loss -= gaussian_log_pdf(mean, var, r)?;
            means[t] = mean;
            let dl_dm = (r - mean) / var;
            coef_mean[t] = -dl_dm / m / t_len as f64;
            if var > VARIANCE_FLOOR {
                let dl_dv = -0.5 / var + 0.5 * (r - mean).powi(2) / (var * var);
                coef_dev[t] = -dl_dv * 2.0 / (m - 1.0) / t_len as f64;
            }
        }
        loss /= t_len as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                context: "loss is not finite".into(),
            });
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let s = self.grid.substeps();
        let per_path: Vec<Vec<f64>> = sims
            .par_iter()
            .zip(gen.par_iter())
            .map(|(p, g)| {
                let mut direct = vec![0.0; p.states.len()];
                for t in 0..t_len {
                    let d = coef_mean[t] + coef_dev[t] * (g[t] - means[t]);
                    direct[(t + 1) * s] += d;
                    direct[t * s] -= d;
                }
                let mut grad = vec![0.0; nets.param_count()];
                let dt = self.grid.dt();
                if keep_tapes {
                    backpropagate_taped(
                        nets, dt, &p.noise, &p.states, &p.tapes, &direct, &mut grad,
                    )?;
                } else {
                    backpropagate(nets, dt, &p.noise, &p.states, &direct, &mut grad)?;
                }
                Ok(grad)
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; nets.param_count()];
        for g in &per_path {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                context: format!("gradient component {i} is not finite"),
            });
        }
        Ok((loss, Some(grad)))
    }
}

/// Negative mean per-step Gaussian log-likelihood of `observed` under the
/// moments of `generated`, where `generated[i]` holds path `i`'s returns.
pub fn sample_loss(generated: &[Vec<f64>], observed: &[f64]) -> Result<f64> {
    let mut column = vec![0.0; generated.len()];
    let mut total = 0.0;
    for (t, &r) in observed.iter().enumerate() {
        for (c, g) in column.iter_mut().zip(generated) {
            *c = g[t];
        }
        let (mean, var) = per_step_density(&column)?;
        total -= gaussian_log_pdf(mean, var, r)?;
    }
    Ok(total / observed.len() as f64)
}

/// Loss of `nets` on the observed returns with noise drawn from `seed`.
pub fn mle_loss(
    nets: &NetPair,
    config: &GeneratorConfig,
    returns: &[f64],
    timestamps: &[f64],
    seed: u64,
) -> Result<f64> {
    let hurst = config.resolve_hurst(returns)?;
    let obj = Objective::new(timestamps, returns, hurst, config.substeps, config.paths)?;
    Ok(obj.evaluate(nets, seed, 0, false)?.0)
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Loss before each parameter update.
    pub losses: Vec<f64>,
    pub model: FsdeModel,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Trains freshly initialized networks on `series`.
pub fn train(config: &GeneratorConfig, series: &NormalizedSeries) -> Result<TrainingReport> {
    config.validate()?;
    let nets = NetPair::init(
        &config.drift_widths,
        &config.diffusion_widths,
        &mut rng::stream(config.seed, &[INIT_STREAM]),
    )?;
    train_from(config, series, nets, None)
}

/// Trains starting from `nets`; parameters with `frozen[i]` set never move.
pub fn train_from(
    config: &GeneratorConfig,
    series: &NormalizedSeries,
    mut nets: NetPair,
    frozen: Option<&[bool]>,
) -> Result<TrainingReport> {
    config.validate()?;
    let start = Instant::now();
    let hurst = config.resolve_hurst(&series.returns)?;
    let obj = Objective::new(
        &series.timestamps,
        &series.returns,
        hurst,
        config.substeps,
        config.paths,
    )?;
    let p = nets.param_count();
    if let Some(f) = frozen {
        if f.len() != p {
            return Err(Error::Dimension {
                expected: p,
                actual: f.len(),
            });
        }
    }
    let mut theta = nets.to_flat();
    let mut adam = AdamState::new(p);
    let mut losses = Vec::with_capacity(config.steps);
    for it in 0..config.steps {
        let key = if config.fixed_noise { 0 } else { it as u64 };
        let wrap = |e: Error| Error::Training {
            iteration: it,
            source: Box::new(e),
        };
        let (loss, grad) = obj.evaluate(&nets, config.seed, key, true).map_err(wrap)?;
        let mut grad = grad.expect("gradient requested");
        if let Some(f) = frozen {
            for (g, &fz) in grad.iter_mut().zip(f) {
                if fz {
                    *g = 0.0;
                }
            }
        }
        losses.push(loss);
        adam_step(&mut theta, &grad, &mut adam, config.learning_rate)?;
        nets.set_flat(&theta)?;
        if config.early_stop && losses.len() > EARLY_STOP_WINDOW {
            let earlier = losses[losses.len() - 1 - EARLY_STOP_WINDOW];
            if earlier - loss < EARLY_STOP_TOL {
                break;
            }
        }
    }
    Ok(TrainingReport {
        losses,
        model: FsdeModel::new(nets, hurst, config.substeps)?,
        seed: config.seed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// A trained model together with the data transform it was fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: FsdeModel,
    pub normalization: NormalizationRecord,
    /// First observed level.
    pub initial_value: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(report: &TrainingReport, series: &NormalizedSeries) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            model: report.model.clone(),
            normalization: series.record,
            initial_value: series.initial,
            seed: report.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}",
                c.format
            )));
        }
        FsdeModel::new(c.model.nets.clone(), c.model.hurst, c.model.substeps)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
