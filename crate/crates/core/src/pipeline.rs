//! Composition of the deterministic flows into conditional and unconditional
//! periodic steady states.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian::CovMatrix4;
use crate::model::ModelConfig;
use crate::riccati::{
    backward_control_riccati, periodic_excess_noise, periodic_steady_state,
    stationary_control_gain, ExcessNoiseSeries, GainSchedule, Numerics, PeriodicSolution,
};

/// How the LQR gain is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainMode {
    /// Periodic gain from the backward Riccati flow with the modulated drift.
    #[default]
    Periodic,
    /// Constant gain from the period-averaged drift.
    Stationary,
}

pub fn control_gains(cfg: &ModelConfig, num: &Numerics, mode: GainMode) -> Result<GainSchedule> {
    match mode {
        GainMode::Periodic => backward_control_riccati(cfg, num),
        GainMode::Stationary => stationary_control_gain(cfg, num),
    }
}

/// Periodic conditional covariance, LQR gains and excess noise.
#[derive(Debug, Clone)]
pub struct UnconditionalState {
    pub conditional: PeriodicSolution,
    pub gains: GainSchedule,
    pub excess: ExcessNoiseSeries,
}

impl UnconditionalState {
    /// `(t, V_u)` samples over one period.
    pub fn unconditional_series(&self) -> Vec<(f64, CovMatrix4)> {
        self.excess
            .times
            .iter()
            .copied()
            .zip(self.excess.v_u.iter().copied())
            .collect()
    }
}

pub fn unconditional_steady_state(
    cfg: &ModelConfig,
    num: &Numerics,
    mode: GainMode,
) -> Result<UnconditionalState> {
    let conditional = periodic_steady_state(cfg, num)?;
    let gains = control_gains(cfg, num, mode)?;
    let excess = periodic_excess_noise(&conditional, &gains, cfg, num)?;
    Ok(UnconditionalState {
        conditional,
        gains,
        excess,
    })
}
