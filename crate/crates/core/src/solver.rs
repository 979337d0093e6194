//! Fixed-step explicit integrators that record every stage on the tape, so
//! `backward()` differentiates the discretized trajectory exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub steps_per_unit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps_per_unit: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("state became non-finite at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },
    #[error("steps_per_unit must be positive")]
    NoSteps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl SolverConfig {
    /// Number of steps used to cover `[0, t_end]`.
    pub fn steps_for(&self, t_end: f64) -> Result<usize, SolverError> {
        if self.steps_per_unit == 0 {
            return Err(SolverError::NoSteps);
        }
        let raw = t_end * self.steps_per_unit as f64;
        Ok((raw - 1e-9).ceil().max(1.0) as usize)
    }
}

/// Integrates `ds/dt = field(t, s)` over `[0, t_end]`.
///
/// The state is a list of tape variables; `field` must return derivatives in
/// the same order and shapes.
pub fn integrate<F, E>(
    tape: &mut Tape,
    field: F,
    state0: &[Var],
    t_end: f64,
    cfg: &SolverConfig,
) -> Result<Vec<Var>, E>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>, E>,
    E: From<SolverError>,
{
    let steps = cfg.steps_for(t_end)?;
    integrate_fixed(tape, field, state0, 0.0, t_end, steps, cfg.method)
}

pub fn integrate_fixed<F, E>(
    tape: &mut Tape,
    mut field: F,
    state0: &[Var],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Vec<Var>, E>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>, E>,
    E: From<SolverError>,
{
    if steps == 0 {
        return Err(SolverError::NoSteps.into());
    }
    let dt = (t1 - t0) / steps as f64;
    let time = |k: usize| t0 + (t1 - t0) * k as f64 / steps as f64;
    let mut state = state0.to_vec();

    for k in 0..steps {
        let t = time(k);
        state = match method {
            Method::Euler => {
                let slope = field(tape, t, &state)?;
                axpy(tape, &state, dt, &slope)?
            }
            Method::Rk4 => {
                let half = dt / 2.0;
                let k1 = field(tape, t, &state)?;
                let s2 = axpy(tape, &state, half, &k1)?;
                let k2 = field(tape, t + half, &s2)?;
                let s3 = axpy(tape, &state, half, &k2)?;
                let k3 = field(tape, t + half, &s3)?;
                let s4 = axpy(tape, &state, dt, &k3)?;
                let k4 = field(tape, time(k + 1), &s4)?;
                let mut next = Vec::with_capacity(state.len());
                for i in 0..state.len() {
                    let two_k2 = tape.scale(k2[i], 2.0);
                    let two_k3 = tape.scale(k3[i], 2.0);
                    let mut acc = tape.add(k1[i], two_k2).map_err(SolverError::from)?;
                    acc = tape.add(acc, two_k3).map_err(SolverError::from)?;
                    acc = tape.add(acc, k4[i]).map_err(SolverError::from)?;
                    let scaled = tape.scale(acc, dt);
                    let incr = tape.div_scalar(scaled, 6.0);
                    next.push(tape.add(state[i], incr).map_err(SolverError::from)?);
                }
                next
            }
        };
        if state.iter().any(|v| !tape.value(*v).is_finite()) {
            return Err(SolverError::Divergence {
                step: k,
                t: time(k + 1),
            }
            .into());
        }
    }
    Ok(state)
}

fn axpy(tape: &mut Tape, base: &[Var], alpha: f64, dir: &[Var]) -> Result<Vec<Var>, SolverError> {
    assert_eq!(base.len(), dir.len(), "field returned wrong number of derivatives");
    base.iter()
        .zip(dir)
        .map(|(&b, &d)| {
            let scaled = tape.scale(d, alpha);
            tape.add(b, scaled).map_err(SolverError::from)
        })
        .collect()
}
