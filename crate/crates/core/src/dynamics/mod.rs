//! Discretized Langevin dynamics: the ground-truth simulator that
//! produces training trajectories and conditional-distribution oracles.
//!
//! Integration uses BAOAB splitting (half-kick, half-drift, exact
//! Ornstein-Uhlenbeck velocity refresh, half-drift, half-kick), which
//! samples configurations accurately even at fairly large timesteps.

mod file;

pub use file::{read_trajectory, write_trajectory, TRAJECTORY_FORMAT_VERSION};

use crate::core::{RngStream, SystemSpec};
use crate::energy::{EnergyError, Potential};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("energy evaluation failed: {0}")]
    Energy(#[from] EnergyError),
    #[error("non-finite force on atom {atom}")]
    NonFiniteForce { atom: usize },
    #[error("energy {energy:e} exceeded blow-up threshold {threshold:e} at step {step}")]
    BlowUp { energy: f64, threshold: f64, step: usize },
    #[error("n_steps ({n_steps}) must be >= store_every ({store_every}) and store_every >= 1")]
    BadStepCounts { n_steps: usize, store_every: usize },
    #[error("trajectory io: {0}")]
    Io(String),
}

/// Integrator parameters. `dt * friction` above 0.5 is allowed but logged
/// as a warning; the OU update itself is exact for any value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinParams {
    pub dt: f64,
    pub friction: f64,
    pub temperature: f64,
}

impl LangevinParams {
    pub fn new(dt: f64, friction: f64, temperature: f64) -> Self {
        let p = LangevinParams { dt, friction, temperature };
        if dt * friction >= 1.0 {
            log::warn!("dt*friction = {} >= 1: integration may be inaccurate", dt * friction);
        } else if dt * friction > 0.5 {
            log::warn!("dt*friction = {} > 0.5: configurational sampling may degrade", dt * friction);
        }
        p
    }
}

/// Stored frames of one simulation, `spacing` integrator steps apart.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub frames: Vec<Array2<f64>>,
    pub spacing: usize,
    pub params: LangevinParams,
    pub system: Arc<SystemSpec>,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

/// One BAOAB step. Positions and velocities are updated in place; the
/// Gaussian kicks are drawn from `rng` row-major per atom and component.
pub fn langevin_step(
    positions: &mut Array2<f64>,
    velocities: &mut Array2<f64>,
    potential: &Potential,
    system: &SystemSpec,
    params: &LangevinParams,
    rng: &mut RngStream,
) -> Result<(), DynamicsError> {
    let noise = rng.normal_matrix(positions.nrows(), positions.ncols());
    langevin_step_with_noise(positions, velocities, potential, system, params, &noise)
}

/// BAOAB step with an externally supplied Gaussian noise matrix. Exposed
/// so deterministic replay (and the rotated-noise equivariance check) can
/// drive the integrator directly.
pub fn langevin_step_with_noise(
    positions: &mut Array2<f64>,
    velocities: &mut Array2<f64>,
    potential: &Potential,
    system: &SystemSpec,
    params: &LangevinParams,
    noise: &Array2<f64>,
) -> Result<(), DynamicsError> {
    let dt = params.dt;
    let half = 0.5 * dt;
    let decay = (-params.friction * dt).exp();
    let fluct = (params.temperature * (1.0 - decay * decay)).sqrt();

    let force = potential.force(system, positions)?;
    check_force(&force)?;
    for i in 0..positions.nrows() {
        let inv_m = 1.0 / system.masses[i];
        for c in 0..positions.ncols() {
            velocities[[i, c]] += half * force[[i, c]] * inv_m;
            positions[[i, c]] += half * velocities[[i, c]];
            velocities[[i, c]] =
                decay * velocities[[i, c]] + fluct * inv_m.sqrt() * noise[[i, c]];
            positions[[i, c]] += half * velocities[[i, c]];
        }
    }
    let force = potential.force(system, positions)?;
    check_force(&force)?;
    for i in 0..positions.nrows() {
        let inv_m = 1.0 / system.masses[i];
        for c in 0..positions.ncols() {
            velocities[[i, c]] += half * force[[i, c]] * inv_m;
        }
    }
    Ok(())
}

fn check_force(force: &Array2<f64>) -> Result<(), DynamicsError> {
    for (i, row) in force.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteForce { atom: i });
        }
    }
    Ok(())
}

/// Maxwell-Boltzmann velocities at the parameter temperature.
pub fn sample_velocities(
    system: &SystemSpec,
    temperature: f64,
    rng: &mut RngStream,
) -> Array2<f64> {
    let mut v = rng.normal_matrix(system.n_atoms, system.dimension);
    for (i, &m) in system.masses.iter().enumerate() {
        let s = (temperature / m).sqrt();
        for c in 0..system.dimension {
            v[[i, c]] *= s;
        }
    }
    v
}

/// Options for [`simulate`].
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub n_steps: usize,
    pub store_every: usize,
    /// Abort when the potential energy exceeds this value.
    pub blowup_threshold: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            n_steps: 1000,
            store_every: 100,
            blowup_threshold: 1e6,
        }
    }
}

/// Run `n_steps` of Langevin dynamics from `initial`, storing the initial
/// frame and every `store_every`-th frame after it. Velocities start from
/// the Maxwell-Boltzmann law.
pub fn simulate(
    system: &Arc<SystemSpec>,
    potential: &Potential,
    params: &LangevinParams,
    initial: &Array2<f64>,
    opts: &SimOptions,
    rng: &mut RngStream,
) -> Result<Trajectory, DynamicsError> {
    if opts.store_every == 0 || opts.n_steps < opts.store_every {
        return Err(DynamicsError::BadStepCounts {
            n_steps: opts.n_steps,
            store_every: opts.store_every,
        });
    }
    let mut positions = initial.clone();
    let mut velocities = sample_velocities(system, params.temperature, rng);
    let mut frames = Vec::with_capacity(opts.n_steps / opts.store_every + 1);
    frames.push(positions.clone());
    for step in 1..=opts.n_steps {
        langevin_step(&mut positions, &mut velocities, potential, system, params, rng)?;
        if step % opts.store_every == 0 {
            let u = potential.energy(system, &positions)?;
            if u > opts.blowup_threshold {
                return Err(DynamicsError::BlowUp {
                    energy: u,
                    threshold: opts.blowup_threshold,
                    step,
                });
            }
            frames.push(positions.clone());
        }
    }
    Ok(Trajectory {
        frames,
        spacing: opts.store_every,
        params: *params,
        system: system.clone(),
    })
}

/// Run `n_replicas` independent simulations of `horizon_steps` from the
/// same start and return only the final frames: the dynamics estimate of
/// the conditional distribution a fixed lag after `x_start`. Replicas run
/// in parallel, each on its own derived stream.
pub fn conditional_ensemble(
    system: &Arc<SystemSpec>,
    potential: &Potential,
    params: &LangevinParams,
    x_start: &Array2<f64>,
    horizon_steps: usize,
    n_replicas: usize,
    rng: &RngStream,
) -> Result<Vec<Array2<f64>>, DynamicsError> {
    if horizon_steps == 0 {
        return Ok(vec![x_start.clone(); n_replicas]);
    }
    let opts = SimOptions {
        n_steps: horizon_steps,
        store_every: horizon_steps,
        blowup_threshold: 1e6,
    };
    (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut replica_rng = rng.substream(r as u64);
            let traj = simulate(system, potential, params, x_start, &opts, &mut replica_rng)?;
            Ok(traj.frames.last().expect("at least the initial frame").clone())
        })
        .collect()
}
