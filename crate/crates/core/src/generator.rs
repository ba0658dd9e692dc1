//! Neural fSDE path generation with pathwise gradients.
//!
//! The state is the cumulative normalized return `Z_t` (zero at the first
//! observation), simulated on the observation timestamps shifted to start at
//! zero. Each observation interval is split into `substeps` Euler steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{FbmSampler, FbmSpec};
use crate::net::{sensitivity_step, NetPair, Scratch, Sensitivity};
use crate::rng;
use crate::solver::refine_grid;

/// Drift and diffusion networks plus the fixed quantities needed to run them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsdeModel {
    pub nets: NetPair,
    pub hurst: f64,
    pub substeps: usize,
}

/// Fine simulation grid for a set of observation timestamps.
#[derive(Debug)]
pub struct SimGrid {
    fine: Vec<f64>,
    dt: Vec<f64>,
    substeps: usize,
    sampler: FbmSampler,
}

impl SimGrid {
    pub fn new(timestamps: &[f64], hurst: f64, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if timestamps.len() < 2 {
            return Err(Error::Domain("need at least two timestamps".into()));
        }
        crate::path::check_increasing(timestamps)?;
        let t0 = timestamps[0];
        let obs: Vec<f64> = timestamps.iter().map(|t| t - t0).collect();
        let fine = refine_grid(&obs, substeps);
        let dt = fine.windows(2).map(|w| w[1] - w[0]).collect();
        let sampler = FbmSampler::new(FbmSpec::new(hurst, fine.clone())?)?;
        Ok(Self {
            fine,
            dt,
            substeps,
            sampler,
        })
    }

    pub fn observations(&self) -> usize {
        (self.fine.len() - 1) / self.substeps + 1
    }

    pub fn steps(&self) -> usize {
        self.dt.len()
    }

    pub fn fine(&self) -> &[f64] {
        &self.fine
    }

    pub fn dt(&self) -> &[f64] {
        &self.dt
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn sampler(&self) -> &FbmSampler {
        &self.sampler
    }

    /// Noise increments for one path, drawn from the stream keyed by `key`.
    pub fn noise(&self, master: u64, key: &[u64]) -> Vec<f64> {
        self.sampler
            .sample_increments(&mut rng::stream(master, key))
    }

    /// Values of a fine path at the observation points.
    pub fn at_observations(&self, fine_path: &[f64]) -> Vec<f64> {
        fine_path.iter().step_by(self.substeps).copied().collect()
    }
}

/// Scratch buffers reused across Euler steps.
struct Buffers {
    drift_tape: Vec<f64>,
    diff_tape: Vec<f64>,
}

impl Buffers {
    fn new(nets: &NetPair) -> Self {
        Self {
            drift_tape: vec![0.0; nets.drift.tape_len()],
            diff_tape: vec![0.0; nets.diffusion.tape_len()],
        }
    }
}

/// Euler path of the network SDE on the fine grid.
pub fn simulate(nets: &NetPair, dt: &[f64], noise: &[f64], x0: f64) -> Result<Vec<f64>> {
    run(nets, dt, noise, x0, None)
}

/// [`simulate`], also recording both networks' activations at every step
/// into `tapes` for a later [`backpropagate_taped`].
pub fn simulate_taped(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    x0: f64,
    tapes: &mut Vec<f64>,
) -> Result<Vec<f64>> {
    run(nets, dt, noise, x0, Some(tapes))
}

fn tape_stride(nets: &NetPair) -> (usize, usize) {
    (nets.drift.tape_len(), nets.diffusion.tape_len())
}

fn run(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    x0: f64,
    mut tapes: Option<&mut Vec<f64>>,
) -> Result<Vec<f64>> {
    if noise.len() != dt.len() {
        return Err(Error::Dimension {
            expected: dt.len(),
            actual: noise.len(),
        });
    }
    let (ld, ls) = tape_stride(nets);
    let mut buf = Buffers::new(nets);
    if let Some(t) = tapes.as_deref_mut() {
        t.clear();
        t.reserve(dt.len() * (ld + ls));
    }
    let mut out = Vec::with_capacity(dt.len() + 1);
    let mut x = x0;
    out.push(x);
    for (k, (&h, &db)) in dt.iter().zip(noise).enumerate() {
        let b = nets.drift.eval_scalar(x, &mut buf.drift_tape);
        let s = nets.diffusion.eval_scalar(x, &mut buf.diff_tape);
        if let Some(t) = tapes.as_deref_mut() {
            t.extend_from_slice(&buf.drift_tape);
            t.extend_from_slice(&buf.diff_tape);
        }
        x += b * h + s * db;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: k + 1,
                context: "generated path overflowed".into(),
            });
        }
        out.push(x);
    }
    Ok(out)
}

/// Reverse pass through an Euler path.
///
/// `direct[k]` is the partial derivative of the objective with respect to the
/// state at fine index `k`. Adds the parameter gradient (drift then
/// diffusion) into `grad` and returns the derivative with respect to `x0`.
pub fn backpropagate(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    states: &[f64],
    direct: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    reverse(nets, dt, noise, states, direct, grad, None)
}

/// [`backpropagate`] replaying activations stored by [`simulate_taped`].
pub fn backpropagate_taped(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    states: &[f64],
    tapes: &[f64],
    direct: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let (ld, ls) = tape_stride(nets);
    if tapes.len() != dt.len() * (ld + ls) {
        return Err(Error::Dimension {
            expected: dt.len() * (ld + ls),
            actual: tapes.len(),
        });
    }
    reverse(nets, dt, noise, states, direct, grad, Some(tapes))
}

fn reverse(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    states: &[f64],
    direct: &[f64],
    grad: &mut [f64],
    tapes: Option<&[f64]>,
) -> Result<f64> {
    let steps = dt.len();
    if noise.len() != steps || states.len() != steps + 1 || direct.len() != steps + 1 {
        return Err(Error::Dimension {
            expected: steps + 1,
            actual: states.len().min(direct.len()),
        });
    }
    if grad.len() != nets.param_count() {
        return Err(Error::Dimension {
            expected: nets.param_count(),
            actual: grad.len(),
        });
    }
    let (ld, ls) = tape_stride(nets);
    let (gd, gs) = grad.split_at_mut(nets.drift_count());
    let mut buf = Buffers::new(nets);
    let mut scratch = Scratch::default();
    let (mut bx, mut sx) = ([0.0], [0.0]);
    let mut adj = direct[steps];
    for k in (0..steps).rev() {
        let mut next = direct[k] + adj;
        if adj != 0.0 {
            let (dtape, stape) = match tapes {
                Some(t) => t[k * (ld + ls)..(k + 1) * (ld + ls)].split_at(ld),
                None => {
                    nets.drift.forward_into(&[states[k]], &mut buf.drift_tape);
                    nets.diffusion
                        .forward_into(&[states[k]], &mut buf.diff_tape);
                    (&buf.drift_tape[..], &buf.diff_tape[..])
                }
            };
            nets.drift
                .backward_with(dtape, &[adj * dt[k]], gd, &mut bx, &mut scratch);
            nets.diffusion
                .backward_with(stape, &[adj * noise[k]], gs, &mut sx, &mut scratch);
            next += bx[0] + sx[0];
        }
        adj = next;
    }
    Ok(adj)
}

/// Terminal value and its parameter gradient by reverse mode.
pub fn terminal_gradient(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    x0: f64,
) -> Result<(f64, Vec<f64>)> {
    let states = simulate(nets, dt, noise, x0)?;
    let mut direct = vec![0.0; states.len()];
    direct[states.len() - 1] = 1.0;
    let mut grad = vec![0.0; nets.param_count()];
    backpropagate(nets, dt, noise, &states, &direct, &mut grad)?;
    Ok((states[states.len() - 1], grad))
}

/// Terminal parameter gradient by integrating the sensitivity equation forward.
pub fn terminal_sensitivity(
    nets: &NetPair,
    dt: &[f64],
    noise: &[f64],
    x0: f64,
) -> Result<Vec<f64>> {
    let states = simulate(nets, dt, noise, x0)?;
    let mut y = Sensitivity::zeros(nets);
    for (k, (&h, &db)) in dt.iter().zip(noise).enumerate() {
        y = sensitivity_step(nets, states[k], &y, h, db).map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite {
                step: k + 1,
                context,
            },
            other => other,
        })?;
    }
    Ok(y.values)
}

impl FsdeModel {
    pub fn new(nets: NetPair, hurst: f64, substeps: usize) -> Result<Self> {
        crate::fbm::check_hurst(hurst)?;
        if substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(Self {
            nets,
            hurst,
            substeps,
        })
    }

    pub fn grid(&self, timestamps: &[f64]) -> Result<SimGrid> {
        SimGrid::new(timestamps, self.hurst, self.substeps)
    }

    /// `m` state paths at the observation timestamps, each started at `z0`.
    ///
    /// Path `i` draws its noise from the stream keyed by `[stream_key, i]`.
    pub fn sample_states(
        &self,
        timestamps: &[f64],
        z0: f64,
        m: usize,
        seed: u64,
        stream_key: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let grid = self.grid(timestamps)?;
        (0..m)
            .into_par_iter()
            .map(|i| {
                let noise = grid.noise(seed, &[stream_key, i as u64]);
                let fine = simulate(&self.nets, grid.dt(), &noise, z0)?;
                Ok(grid.at_observations(&fine))
            })
            .collect()
    }
}
