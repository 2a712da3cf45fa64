//! Optional `task` block of a scenario: experiment settings that belong to
//! the scene file rather than the command line.

use diffcontact_core::integrate::{IntegratorConfig, Method};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        diffcontact_core::sensitivity::linspace(self.lo, self.hi, self.n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDoc {
    pub v0: f64,
    pub horizon: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorDoc {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

impl IntegratorDoc {
    pub fn to_config(&self) -> Option<IntegratorConfig> {
        let method = Method::parse(&self.method)?;
        let mut c = IntegratorConfig {
            method,
            ..Default::default()
        };
        if let Some(r) = self.rtol {
            c.rtol = r;
        }
        c.atol = self.atol.unwrap_or(c.rtol);
        c.fixed_h = self.h;
        Some(c)
    }
}

/// Gradient descent on the billiard shot force.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentDoc {
    pub start: [f64; 2],
    pub lr: f64,
    pub iters: usize,
}

/// Synthetic data and optimizer budget of a parameter fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDoc {
    pub tosses: usize,
    pub toss_steps: usize,
    pub adam_steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Initial values of the fitted parameter, in scene units.
    pub inits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorDoc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDoc {
    /// Outer steps of one rollout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorDoc>,
    /// Body pushed by the planar force actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuated_body: Option<usize>,
    /// Body whose distance to `target` is the loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_body: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<[f64; 3]>,
    /// Second force component of billiard sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_y: Option<Grid>,
    /// Scale from planner actions to applied force.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descent: Option<DescentDoc>,
    /// Compare unrolled and adjoint gradients along the force sweep.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub compare_adjoint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitDoc>,
}
