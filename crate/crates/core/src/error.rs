use thiserror::Error;

/// Errors raised by the simulator, the resonance scanner and the expansion builder.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Validation(String),

    #[error("degree mismatch: expected M = {expected}, found M = {found}")]
    Shape { expected: usize, found: usize },

    #[error("filter pair `{name}` rejected: {reason}")]
    Filter { name: String, reason: String },

    #[error("numerical blow-up at step {step}")]
    BlowUp { step: usize },

    #[error("velocity-singular step size: sinc(tau * omega_{j}) = {value:e}")]
    VelocitySingular { j: i64, value: f64 },

    #[error("resonant step size: vanishing denominator at j = {j}, k = [{k}]")]
    Resonant { j: i64, k: String },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
