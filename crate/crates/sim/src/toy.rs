//! 1D point mass against a wall: penalty and ideal elastic contact.

use diffcontact_core::dynamics::ToyParams;
use diffcontact_core::optimize::Executor;
use diffcontact_core::sensitivity::{toy_sweep, GradientReport, ToyModel, ToySetup};
use diffcontact_core::SimError;
use serde::Serialize;

use crate::scenario::Scenario;

/// Toy setup from the scenario's `task.toy` block and contact defaults.
pub fn toy_setup(s: &Scenario) -> Result<ToySetup, SimError> {
    let toy = s
        .task
        .toy
        .ok_or_else(|| SimError::Config(format!("scenario `{}` has no task.toy", s.name)))?;
    let c = &s.scene.contact_defaults;
    Ok(ToySetup {
        v0: toy.v0,
        horizon: toy.horizon,
        target: toy.target,
        params: ToyParams {
            solref: c.solref,
            solimp: c.solimp,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySummary {
    pub model: String,
    pub h: f64,
    pub sign_flip_count: usize,
    pub sign_mismatch_count: usize,
    pub max_rel_error: f64,
}

/// One sweep per `(model, h)` pair, in the order given.
pub fn toy_runs<E: Executor>(
    setup: &ToySetup,
    models: &[ToyModel],
    steps: &[f64],
    grid: &[f64],
    exec: &E,
) -> Result<Vec<(ToyModel, f64, GradientReport)>, SimError> {
    let pairs: Vec<(ToyModel, f64)> = models.iter().flat_map(|&m| steps.iter().map(move |&h| (m, h))).collect();
    let reports = exec.map(pairs.len(), |i| toy_sweep(pairs[i].0, setup, pairs[i].1, grid));
    pairs
        .into_iter()
        .zip(reports)
        .map(|((m, h), r)| Ok((m, h, r?)))
        .collect()
}

pub fn summarize(model: ToyModel, h: f64, r: &GradientReport) -> ToySummary {
    ToySummary {
        model: model.name().into(),
        h,
        sign_flip_count: r.sign_flip_count,
        sign_mismatch_count: r.sign_mismatch_count,
        max_rel_error: r.max_rel_error(),
    }
}
