//! Toss-distance gradient sweeps and the integrator Pareto study.

use std::time::Instant;

use diffcontact_core::dynamics::RhsMode;
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::{ParamVector, Scene, SystemState};
use diffcontact_core::optimize::Executor;
use diffcontact_core::sensitivity::{
    grad_fd, rel_error, rollout_loss, simulate, FinalComponent, GradientReport, Rollout, SweepPoint,
};
use diffcontact_core::SimError;
use serde::Serialize;

use crate::grad::{scalar_gradient, GradSettings};

/// Tolerance of the oracle integrations.
pub const ORACLE_TOL: f64 = 1e-10;
pub const PARETO_ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct TossSetup {
    pub scene: Scene,
    pub steps: usize,
}

impl TossSetup {
    pub fn new(scene: Scene, steps: usize) -> Self {
        TossSetup { scene, steps }
    }

    pub fn x0(&self, vx: f64) -> Vec<f64> {
        let layout = self.scene.layout();
        let mut x0 = self.scene.initial_state().to_flat(&layout);
        x0[layout.vel[0]] = vx;
        x0
    }

    /// Horizontal displacement of body 0 after the horizon.
    pub fn loss(&self) -> FinalComponent {
        let layout = self.scene.layout();
        FinalComponent {
            steps: self.steps,
            index: layout.pos[0],
            offset: self.scene.bodies[0].init.pos[0],
            weight: 1.0,
        }
    }

    pub fn rollout(&self, vx: f64, config: IntegratorConfig) -> Rollout {
        Rollout::passive(self.x0(vx), self.steps, config)
    }

    pub fn loss_at(&self, vx: f64, config: IntegratorConfig) -> Result<(f64, usize), SimError> {
        rollout_loss(&self.scene, &ParamVector::empty(), &self.rollout(vx, config), &self.loss(), RhsMode::Vanilla)
    }

    /// Central-difference oracle at tight tolerance.
    pub fn oracle(&self, vx: f64, tol: f64, fd_eps: f64) -> Result<(f64, f64), SimError> {
        let cfg = IntegratorConfig::adaptive(Method::Rk54, tol, tol);
        let l = self.loss_at(vx, cfg)?.0;
        let g = grad_fd(|v| Ok(self.loss_at(v[0], cfg)?.0), &[vx], fd_eps)?;
        Ok((l, g[0]))
    }

    /// Loss, `dL/dv_x` and forward rhs evaluations.
    pub fn gradient(&self, vx: f64, config: IntegratorConfig, settings: &GradSettings) -> Result<(f64, f64, usize), SimError> {
        let vel = self.scene.layout().vel[0];
        scalar_gradient(
            settings,
            &self.scene,
            vx,
            &self.loss(),
            |v| Ok((self.rollout(v, config), ParamVector::empty())),
            |g| g.x0[vel],
        )
    }

    /// Largest quaternion norm error along the trajectory.
    pub fn quat_drift(&self, vx: f64, config: IntegratorConfig) -> Result<f64, SimError> {
        let layout = self.scene.layout();
        let tr = simulate(&self.scene, &ParamVector::empty(), &self.rollout(vx, config), RhsMode::Vanilla)?;
        Ok(tr
            .states
            .iter()
            .map(|x| SystemState::from_flat(&layout, x, 0.0).quat_norm_error())
            .fold(0.0, f64::max))
    }
}

/// Analytic gradient against the oracle at every grid point.
pub fn toss_sweep<E: Executor>(
    setup: &TossSetup,
    grid: &[f64],
    config: IntegratorConfig,
    settings: &GradSettings,
    exec: &E,
) -> Result<GradientReport, SimError> {
    let points = exec.map(grid.len(), |i| -> Result<SweepPoint, SimError> {
        let vx = grid[i];
        let t = Instant::now();
        let (loss, grad, evals) = setup.gradient(vx, config, settings)?;
        let wall = t.elapsed().as_secs_f64();
        let (_, fd) = setup.oracle(vx, ORACLE_TOL, settings.fd_eps)?;
        Ok(SweepPoint {
            value: vx,
            loss,
            grad,
            fd_grad: fd,
            rhs_evals: evals,
            wall_time: wall,
        })
    });
    let points: Vec<SweepPoint> = points.into_iter().collect::<Result<_, _>>()?;
    Ok(GradientReport::from_points(&points))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParetoRow {
    pub integrator: String,
    /// Tolerance of adaptive methods, step of fixed-step ones.
    pub setting: f64,
    pub loss: f64,
    pub loss_error: f64,
    pub grad: f64,
    pub grad_error: f64,
    pub rhs_evals: usize,
    pub wall_time: f64,
}

pub fn default_pareto_configs() -> Vec<IntegratorConfig> {
    let mut out = Vec::new();
    for m in [Method::ExplicitEuler, Method::SemiImplicitEuler, Method::Rk4] {
        for h in [2e-3, 1e-3, 5e-4, 2e-4, 1e-4, 5e-5, 2e-5, 1e-5] {
            out.push(IntegratorConfig::fixed(m, h));
        }
    }
    for m in [Method::Bs32, Method::Rk54] {
        for tol in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9] {
            out.push(IntegratorConfig::adaptive(m, tol, tol));
        }
    }
    out
}

pub fn setting_of(c: &IntegratorConfig) -> f64 {
    if c.method.is_adaptive() {
        c.rtol
    } else {
        c.fixed_h.unwrap_or(f64::NAN)
    }
}

/// Loss and gradient error of each configuration against the tight oracle.
/// Failed configurations are reported with infinite errors.
pub fn pareto<E: Executor>(
    setup: &TossSetup,
    vx: f64,
    configs: &[IntegratorConfig],
    settings: &GradSettings,
    exec: &E,
) -> Result<Vec<ParetoRow>, SimError> {
    let (l_ref, g_ref) = setup.oracle(vx, PARETO_ORACLE_TOL, settings.fd_eps)?;
    Ok(exec.map(configs.len(), |i| {
        let c = configs[i];
        let t = Instant::now();
        let r = setup.gradient(vx, c, settings);
        let wall = t.elapsed().as_secs_f64();
        let (loss, grad, evals) = r.unwrap_or((f64::NAN, f64::NAN, 0));
        let err = |v: f64, r: f64| if v.is_finite() { rel_error(v, r) } else { f64::INFINITY };
        ParetoRow {
            integrator: c.method.name().into(),
            setting: setting_of(&c),
            loss,
            loss_error: err(loss, l_ref),
            grad,
            grad_error: err(grad, g_ref),
            rhs_evals: evals,
            wall_time: wall,
        }
    }))
}

/// Fewest rhs evaluations among rows of `pred` reaching `max_grad_error`.
pub fn cheapest(rows: &[ParetoRow], pred: impl Fn(&ParetoRow) -> bool, max_grad_error: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| pred(r) && r.grad_error <= max_grad_error)
        .map(|r| r.rhs_evals)
        .min()
}
