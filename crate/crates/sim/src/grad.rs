//! Gradient method selection shared by the experiment drivers.

use diffcontact_core::dynamics::RhsMode;
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::{ParamVector, Scene};
use diffcontact_core::sensitivity::{grad_adjoint, grad_fd, grad_unroll, rollout_loss, Gradients, Loss, Rollout};
use diffcontact_core::SimError;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    Unroll,
    Adjoint,
    Fd,
}

impl GradMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradMode::Unroll => "unroll",
            GradMode::Adjoint => "adjoint",
            GradMode::Fd => "fd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradSettings {
    pub mode: GradMode,
    pub cfd_grad: bool,
    pub adjoint_rtol: f64,
    pub fd_eps: f64,
    pub checkpoint_stride: usize,
}

impl Default for GradSettings {
    fn default() -> Self {
        GradSettings {
            mode: GradMode::Unroll,
            cfd_grad: false,
            adjoint_rtol: 1e-8,
            fd_eps: diffcontact_core::sensitivity::DEFAULT_FD_EPS,
            checkpoint_stride: diffcontact_core::sensitivity::DEFAULT_CHECKPOINT_STRIDE,
        }
    }
}

impl GradSettings {
    pub fn adjoint_config(&self) -> IntegratorConfig {
        IntegratorConfig::adaptive(Method::Rk54, self.adjoint_rtol, self.adjoint_rtol)
    }

    /// Loss and gradients by unrolling or the adjoint. `Fd` is handled by
    /// the caller, which knows the swept scalar.
    pub fn analytic<L: Loss>(
        &self,
        scene: &Scene,
        params: &ParamVector,
        rollout: &Rollout,
        loss: &L,
    ) -> Result<Gradients, SimError> {
        let mut r = rollout.clone();
        r.checkpoint_stride = self.checkpoint_stride;
        match self.mode {
            GradMode::Adjoint => grad_adjoint(scene, params, &r, loss, self.cfd_grad, &self.adjoint_config()),
            _ => grad_unroll(scene, params, &r, loss, self.cfd_grad),
        }
    }
}

/// Loss and derivative in one scalar `s`, where `build` maps `s` to a
/// rollout and parameters, and `pick` extracts the matching component of
/// the analytic gradients.
pub fn scalar_gradient<L, B, P>(
    settings: &GradSettings,
    scene: &Scene,
    s: f64,
    loss: &L,
    build: B,
    pick: P,
) -> Result<(f64, f64, usize), SimError>
where
    L: Loss,
    B: Fn(f64) -> Result<(Rollout, ParamVector), SimError>,
    P: Fn(&Gradients) -> f64,
{
    let (rollout, params) = build(s)?;
    match settings.mode {
        GradMode::Fd => {
            let mode = if settings.cfd_grad { RhsMode::StraightThrough } else { RhsMode::Vanilla };
            let (l, evals) = rollout_loss(scene, &params, &rollout, loss, mode)?;
            let g = grad_fd(
                |v| {
                    let (r, p) = build(v[0])?;
                    Ok(rollout_loss(scene, &p, &r, loss, mode)?.0)
                },
                &[s],
                settings.fd_eps,
            )?;
            Ok((l, g[0], evals))
        }
        _ => {
            let g = settings.analytic(scene, &params, &rollout, loss)?;
            Ok((g.loss, pick(&g), g.rhs_evals))
        }
    }
}
