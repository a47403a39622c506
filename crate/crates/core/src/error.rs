use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dc bus voltage {v_dc} V is at or below the model floor of {floor} V")]
    NonPositiveVoltage { v_dc: f64, floor: f64 },

    #[error("dc bus voltage {v_dc} V is below the modulator floor of {floor} V")]
    VoltageFloor { v_dc: f64, floor: f64 },

    #[error("axis input gain is zero, the current loop cannot be controlled")]
    UncontrollableAxis,

    #[error("requested closed-loop pole {pole} rad/s is not in the open left half plane")]
    UnstableRequest { pole: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("simulation diverged at t = {t:.6} s (v_dc = {v_dc:.3} V)")]
    SimulationDiverged { t: f64, v_dc: f64 },

    #[error("load segment {segment} has no settled window")]
    SegmentTooShort { segment: usize },
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
