//! Time-indexed vehicle state sequences, the raw material of both stages.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A sampled trajectory: `T` states, optionally the `T−1` inputs that drove
/// the transitions (`inputs[t]` takes `states[t]` to `states[t+1]`), and
/// optional per-step exogenous features.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Option<Vec<DVector<f64>>>,
    /// Sampling interval in seconds.
    pub dt: f64,
    pub exogenous: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn new(
        states: Vec<DVector<f64>>,
        inputs: Option<Vec<DVector<f64>>>,
        dt: f64,
        exogenous: Option<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let traj = Self { states, inputs, dt, exogenous };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        if t < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 states, got {t}"
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        let n_x = self.states[0].len();
        if self.states.iter().any(|s| s.len() != n_x) {
            return Err(Error::InvalidArgument("inconsistent state dimensions".into()));
        }
        if let Some(inputs) = &self.inputs {
            if inputs.len() != t - 1 {
                return Err(Error::InvalidArgument(format!(
                    "inputs length {} != T−1 = {}",
                    inputs.len(),
                    t - 1
                )));
            }
            let n_u = inputs.first().map(|u| u.len()).unwrap_or(0);
            if inputs.iter().any(|u| u.len() != n_u) {
                return Err(Error::InvalidArgument("inconsistent input dimensions".into()));
            }
        }
        if let Some(exo) = &self.exogenous {
            if exo.len() != t {
                return Err(Error::InvalidArgument(format!(
                    "exogenous length {} != T = {t}",
                    exo.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.states[0].len()
    }
}
