use alloc::boxed::Box;
use alloc::string::String;

use crate::integrate::StepTape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unresolvable parameter path `{0}`")]
    UnknownPath(String),
    #[error("parameter `{slot}`: value {value} outside the domain of the {transform} transform")]
    TransformDomain {
        slot: String,
        value: f64,
        transform: &'static str,
    },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

impl ModelError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ModelError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error("integration exceeded {max_steps} steps at t = {t} (ODE too stiff for the tolerances)")]
    MaxStepsExceeded {
        max_steps: usize,
        t: f64,
        partial: Box<StepTape>,
    },
    #[error("non-finite state component {component} at t = {t}")]
    NonFiniteState { component: usize, t: f64 },
    #[error("non-finite gradient at outer step {outer_step}")]
    NonFiniteGradient { outer_step: usize },
    #[error("non-finite {what} component {index}")]
    NonFiniteInput { what: &'static str, index: usize },
    #[error("query time {t} outside tape span [{start}, {end}]")]
    OutsideTape { t: f64, start: f64, end: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
