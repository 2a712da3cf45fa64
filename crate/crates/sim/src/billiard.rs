//! Billiard shots: a planar force on one ball during the first outer step,
//! scored by the distance of another ball to a target.

use diffcontact_core::dynamics::RhsMode;
use diffcontact_core::integrate::IntegratorConfig;
use diffcontact_core::model::{ParamVector, Scene, Shape};
use diffcontact_core::optimize::{adam_step, AdamHyper, AdamState, Executor};
use diffcontact_core::sensitivity::{
    frozen_reference, frozen_reference_loss, grad_fd, rollout_loss, simulate, ActionMap, GradientReport, Rollout,
    SweepPoint, TargetDistance,
};
use diffcontact_core::SimError;
use serde::Serialize;

use crate::grad::GradSettings;
use crate::scenario::Scenario;

/// Integration tolerance and relative central-difference step of the
/// straight-through oracle.
pub const CFD_ORACLE_TOL: f64 = 1e-10;
pub const CFD_ORACLE_FD_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct BilliardSetup {
    pub scene: Scene,
    pub steps: usize,
    pub config: IntegratorConfig,
    pub actuated: usize,
    pub target_body: usize,
    pub target: [f64; 3],
}

impl BilliardSetup {
    pub fn from_scenario(s: &Scenario) -> Result<Self, SimError> {
        let t = &s.task;
        let missing = |what: &str| SimError::Config(format!("scenario `{}` has no task.{what}", s.name));
        let config = match &t.integrator {
            Some(doc) => doc
                .to_config()
                .ok_or_else(|| SimError::Config(format!("unknown integrator `{}`", doc.method)))?,
            None => IntegratorConfig::default(),
        };
        let setup = BilliardSetup {
            scene: s.scene.clone(),
            steps: t.horizon_steps.ok_or_else(|| missing("horizon_steps"))?,
            config,
            actuated: t.actuated_body.ok_or_else(|| missing("actuated_body"))?,
            target_body: t.target_body.ok_or_else(|| missing("target_body"))?,
            target: t.target.ok_or_else(|| missing("target"))?,
        };
        let n = setup.scene.bodies.len();
        if setup.actuated >= n || setup.target_body >= n {
            return Err(SimError::Config(format!("task bodies out of range (scene has {n})")));
        }
        Ok(setup)
    }

    pub fn x0(&self) -> Vec<f64> {
        self.scene.initial_state().to_flat(&self.scene.layout())
    }

    pub fn action_map(&self) -> ActionMap {
        ActionMap::force_xy(self.actuated)
    }

    /// Force `f` held during the first outer step, nothing afterwards.
    pub fn rollout(&self, f: [f64; 2]) -> Rollout {
        let mut actions = vec![vec![0.0, 0.0]; self.steps];
        actions[0] = f.to_vec();
        Rollout::passive(self.x0(), self.steps, self.config).with_actions(self.action_map(), actions)
    }

    /// Squared planar distance to the target after the horizon.
    pub fn loss(&self) -> TargetDistance {
        self.distance_loss(self.steps, false)
    }

    pub fn distance_loss(&self, steps: usize, running: bool) -> TargetDistance {
        TargetDistance {
            steps,
            pos: self.scene.layout().pos[self.target_body],
            target: self.target,
            axes: 2,
            running,
            action_weight: 0.0,
        }
    }

    pub fn loss_at(&self, f: [f64; 2]) -> Result<f64, SimError> {
        Ok(rollout_loss(&self.scene, &ParamVector::empty(), &self.rollout(f), &self.loss(), RhsMode::Vanilla)?.0)
    }

    /// Loss and force gradient with the analytic method of `settings`.
    pub fn gradient(&self, f: [f64; 2], settings: &GradSettings) -> Result<(f64, [f64; 2]), SimError> {
        let (loss, g, _) = self.gradient_counted(f, settings)?;
        Ok((loss, g))
    }

    /// As [`gradient`](Self::gradient), plus forward rhs evaluations.
    pub fn gradient_counted(&self, f: [f64; 2], settings: &GradSettings) -> Result<(f64, [f64; 2], usize), SimError> {
        let g = settings.analytic(&self.scene, &ParamVector::empty(), &self.rollout(f), &self.loss())?;
        Ok((g.loss, [g.actions[0][0], g.actions[0][1]], g.rhs_evals))
    }

    /// Straight-through oracle: central differences of the loss of the CFD
    /// dynamics linearized around the vanilla trajectory of `f`.
    pub fn cfd_oracle(&self, f: [f64; 2], tol: f64, fd_eps: f64) -> Result<[f64; 2], SimError> {
        let mut r = self.rollout(f);
        r.config = IntegratorConfig::adaptive(diffcontact_core::integrate::Method::Rk54, tol, tol);
        let params = ParamVector::empty();
        let reference = frozen_reference(&self.scene, &params, &r)?;
        let loss = self.loss();
        let g = grad_fd(
            |v| {
                let mut rr = r.clone();
                rr.actions[0] = v.to_vec();
                frozen_reference_loss(&reference, &self.scene, &params, &rr, &loss)
            },
            &f,
            fd_eps,
        )?;
        Ok([g[0], g[1]])
    }

    /// Smallest sphere-sphere gap between the actuated and target bodies
    /// over the outer-step states.
    pub fn min_gap(&self, f: [f64; 2]) -> Result<f64, SimError> {
        let layout = self.scene.layout();
        let radius = |b: usize| {
            self.scene
                .primary_geom(b)
                .and_then(|g| match self.scene.geoms[g].shape {
                    Shape::Sphere { radius } => Some(radius),
                    _ => None,
                })
                .unwrap_or(0.0)
        };
        let reach = radius(self.actuated) + radius(self.target_body);
        let tr = simulate(&self.scene, &ParamVector::empty(), &self.rollout(f), RhsMode::Vanilla)?;
        let (pa, pb) = (layout.pos[self.actuated], layout.pos[self.target_body]);
        Ok(tr
            .states
            .iter()
            .map(|x| {
                let d2: f64 = (0..3).map(|i| (x[pa + i] - x[pb + i]).powi(2)).sum();
                d2.sqrt() - reach
            })
            .fold(f64::INFINITY, f64::min))
    }

    /// Steps compared and whether the straight-through forward path
    /// reproduces the vanilla states bit for bit.
    pub fn forward_invariant(&self, f: [f64; 2]) -> Result<(usize, bool), SimError> {
        let p = ParamVector::empty();
        let r = self.rollout(f);
        let a = simulate(&self.scene, &p, &r, RhsMode::Vanilla)?;
        let b = simulate(&self.scene, &p, &r, RhsMode::StraightThrough)?;
        let same = a.states.len() == b.states.len()
            && a.states.iter().zip(&b.states).all(|(x, y)| x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
        Ok((a.states.len() - 1, same))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShotRow {
    pub fx: f64,
    pub fy: f64,
    pub loss: f64,
    pub grad_x: f64,
    pub grad_y: f64,
    pub min_gap: f64,
}

/// Loss and gradient over the force grid `fx × fy`, row-major in `fy`.
pub fn shot_grid<E: Executor>(
    setup: &BilliardSetup,
    fx: &[f64],
    fy: &[f64],
    settings: &GradSettings,
    exec: &E,
) -> Result<Vec<ShotRow>, SimError> {
    let rows = exec.map(fx.len() * fy.len(), |i| -> Result<ShotRow, SimError> {
        let f = [fx[i / fy.len()], fy[i % fy.len()]];
        let (loss, g) = setup.gradient(f, settings)?;
        Ok(ShotRow {
            fx: f[0],
            fy: f[1],
            loss,
            grad_x: g[0],
            grad_y: g[1],
            min_gap: setup.min_gap(f)?,
        })
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescentRow {
    pub iter: usize,
    pub fx: f64,
    pub fy: f64,
    pub loss: f64,
    pub grad_x: f64,
    pub grad_y: f64,
}

/// Adam on the shot force. Row `i` holds the iterate before update `i`;
/// the last row is the final iterate with its loss only.
pub fn descend(
    setup: &BilliardSetup,
    start: [f64; 2],
    iters: usize,
    hyper: AdamHyper,
    settings: &GradSettings,
) -> Result<Vec<DescentRow>, SimError> {
    let mut f = start;
    let mut adam = AdamState::new(2, hyper);
    let mut out = Vec::with_capacity(iters + 1);
    for iter in 0..iters {
        let (loss, g) = setup.gradient(f, settings)?;
        out.push(DescentRow {
            iter,
            fx: f[0],
            fy: f[1],
            loss,
            grad_x: g[0],
            grad_y: g[1],
        });
        let (next, step) = adam_step(&adam, &g)?;
        adam = next;
        f = [f[0] + step[0], f[1] + step[1]];
    }
    out.push(DescentRow {
        iter: iters,
        fx: f[0],
        fy: f[1],
        loss: setup.loss_at(f)?,
        grad_x: f64::NAN,
        grad_y: f64::NAN,
    });
    Ok(out)
}

/// Gradient along the x force component against the straight-through
/// oracle, with the other component held at `fy`.
pub fn cfd_sweep<E: Executor>(
    setup: &BilliardSetup,
    grid: &[f64],
    fy: f64,
    settings: &GradSettings,
    exec: &E,
) -> Result<GradientReport, SimError> {
    let points = exec.map(grid.len(), |i| -> Result<SweepPoint, SimError> {
        let f = [grid[i], fy];
        let t = std::time::Instant::now();
        let (loss, g, evals) = setup.gradient_counted(f, settings)?;
        let wall = t.elapsed().as_secs_f64();
        let oracle = setup.cfd_oracle(f, CFD_ORACLE_TOL, CFD_ORACLE_FD_EPS)?;
        Ok(SweepPoint {
            value: f[0],
            loss,
            grad: g[0],
            fd_grad: oracle[0],
            rhs_evals: evals,
            wall_time: wall,
        })
    });
    let points: Vec<SweepPoint> = points.into_iter().collect::<Result<_, _>>()?;
    Ok(GradientReport::from_points(&points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    #[test]
    fn bundled_setup_is_consistent() {
        let s = bundled("billiard").unwrap();
        let b = BilliardSetup::from_scenario(&s).unwrap();
        assert_ne!(b.actuated, b.target_body);
        assert!(b.min_gap([0.0, 0.0]).unwrap() > 0.0);
        let r = b.rollout([3.0, -1.0]);
        assert_eq!(r.actions[0], vec![3.0, -1.0]);
        assert!(r.actions[1..].iter().all(|a| a == &vec![0.0, 0.0]));
    }

    #[test]
    fn missing_task_fields_are_config_errors() {
        let mut s = bundled("billiard").unwrap();
        s.task.target = None;
        assert!(matches!(BilliardSetup::from_scenario(&s), Err(SimError::Config(_))));
        let mut s = bundled("billiard").unwrap();
        s.task.actuated_body = Some(99);
        assert!(matches!(BilliardSetup::from_scenario(&s), Err(SimError::Config(_))));
    }
}
