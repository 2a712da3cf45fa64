//! Gradients of rollout losses with respect to the initial state, scene
//! parameters and per-step actions.
//!
//! Three routes are provided and cross-checked against each other:
//! [`grad_unroll`] differentiates the accepted integrator steps,
//! [`grad_adjoint`] integrates the continuous adjoint backwards, and
//! [`grad_fd`] takes central differences. All Jacobians come from forward-mode
//! duals through the same generic code the forward simulation runs.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::dynamics::{rhs_flat, toy_elastic_step, toy_penalty_step, RhsMode, SceneOde, ToyOde, ToyParams, ToyState, Wrench};
use crate::error::SimError;
use crate::integrate::{dense_eval, integrate, step_map, Dynamics, IntegratorConfig, Method, StepTape};
use crate::model::{apply_params, lift_with_params, ParamVector, Scene, StateLayout};
use crate::real::{Dual, Real, CHUNK, D8};

/// Default outer-step spacing of stored checkpoints.
pub const DEFAULT_CHECKPOINT_STRIDE: usize = 8;

/// Default relative step of [`grad_fd`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Relative step of the toy oracle. The continuous toy loss is close to
/// linear in `q0`, so a wide step costs no truncation error and averages out
/// the rounding left by the wall discontinuity.
pub const TOY_FD_EPS: f64 = 1e-3;

/// Denominator floor of [`rel_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-9;

/// Values of a vector function and its Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    pub primal: Vec<f64>,
    /// `tangents[i][j] = ∂out_i / ∂in_j`.
    pub tangents: Vec<Vec<f64>>,
}

impl DualBatch {
    /// Evaluates `f` at `x` with identity seeding, [`CHUNK`] input directions
    /// per call.
    pub fn jacobian<F>(x: &[f64], mut f: F) -> Self
    where
        F: FnMut(&[D8]) -> Vec<D8>,
    {
        let n = x.len();
        let mut primal = Vec::new();
        let mut tangents: Vec<Vec<f64>> = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + CHUNK).min(n);
            let seeded: Vec<D8> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| if (start..end).contains(&i) { Dual::seeded(v, i - start) } else { Dual::constant(v) })
                .collect();
            let out = f(&seeded);
            if start == 0 {
                primal = out.iter().map(|o| o.re).collect();
                tangents = vec![vec![0.0; n]; out.len()];
            }
            for (row, o) in tangents.iter_mut().zip(&out) {
                row[start..end].copy_from_slice(&o.eps[..end - start]);
            }
            start = end;
            if start >= n {
                break;
            }
        }
        DualBatch { primal, tangents }
    }

    pub fn n_inputs(&self) -> usize {
        self.tangents.first().map_or(0, |r| r.len())
    }

    /// Vector-Jacobian product `wᵀ J`.
    pub fn vjp(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_inputs()];
        for (&wi, row) in w.iter().zip(&self.tangents) {
            if wi != 0.0 {
                for (o, j) in out.iter_mut().zip(row) {
                    *o += wi * j;
                }
            }
        }
        out
    }
}

/// Value and gradient of a scalar function.
pub fn gradient<F>(x: &[f64], mut f: F) -> (f64, Vec<f64>)
where
    F: FnMut(&[D8]) -> D8,
{
    let b = DualBatch::jacobian(x, |z| vec![f(z)]);
    let grad = b.tangents.into_iter().next().unwrap_or_default();
    (b.primal[0], grad)
}

fn check_dim(x: &[f64], layout: &StateLayout) -> Result<(), SimError> {
    if x.len() != layout.dim() {
        return Err(SimError::Config(alloc::format!(
            "state has {} components, scene expects {}",
            x.len(),
            layout.dim()
        )));
    }
    Ok(())
}

fn lift_wrenches(w: &[Wrench<f64>]) -> Vec<Wrench<D8>> {
    w.iter().map(|w| w.map(D8::cst)).collect()
}

/// `∂F/∂x` of the selected rhs variant. Quaternion columns are raw partials
/// with respect to the four stored components.
pub fn jacobian_x(scene: &Scene, x: &[f64], applied: &[Wrench<f64>], mode: RhsMode) -> Result<DualBatch, SimError> {
    let layout = scene.layout();
    check_dim(x, &layout)?;
    let sc = scene.lift::<D8>();
    let ap = lift_wrenches(applied);
    Ok(DualBatch::jacobian(x, |z| {
        let mut out = vec![D8::zero(); z.len()];
        rhs_flat(&sc, &layout, z, &ap, mode, &mut out, None);
        out
    }))
}

/// `∂F/∂θ` over the unconstrained values of `params`.
pub fn jacobian_theta(
    scene: &Scene,
    params: &ParamVector,
    x: &[f64],
    applied: &[Wrench<f64>],
    mode: RhsMode,
) -> Result<DualBatch, SimError> {
    let layout = apply_params(scene, params)?.layout();
    check_dim(x, &layout)?;
    let xd: Vec<D8> = x.iter().map(|&v| D8::cst(v)).collect();
    let ap = lift_wrenches(applied);
    Ok(DualBatch::jacobian(&params.values, |th| {
        let sc = lift_with_params(scene, &params.layout, th);
        let mut out = vec![D8::zero(); xd.len()];
        rhs_flat(&sc, &layout, &xd, &ap, mode, &mut out, None);
        out
    }))
}

/// Maps a compact action vector onto per-body world wrenches.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionMap {
    /// `(body, component)` per action entry; components `0..3` are force,
    /// `3..6` torque.
    pub entries: Vec<(usize, usize)>,
    /// Wrench units per action unit.
    pub gain: f64,
}

impl Default for ActionMap {
    fn default() -> Self {
        ActionMap::new(Vec::new())
    }
}

impl ActionMap {
    pub fn new(entries: Vec<(usize, usize)>) -> Self {
        ActionMap { entries, gain: 1.0 }
    }

    /// Planar force on one body.
    pub fn force_xy(body: usize) -> Self {
        ActionMap::new(vec![(body, 0), (body, 1)])
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn wrenches<T: Real>(&self, n_bodies: usize, a: &[T]) -> Vec<Wrench<T>> {
        let mut w = vec![[T::zero(); 6]; n_bodies];
        for (&(b, c), &v) in self.entries.iter().zip(a) {
            w[b][c] += v * self.gain;
        }
        w
    }

    pub fn validate(&self, n_bodies: usize) -> Result<(), SimError> {
        if !self.gain.is_finite() {
            return Err(SimError::Config(alloc::format!("action gain {} is not finite", self.gain)));
        }
        match self.entries.iter().find(|&&(b, c)| b >= n_bodies || c >= 6) {
            Some((b, c)) => Err(SimError::Config(alloc::format!("action entry ({b}, {c}) out of range"))),
            None => Ok(()),
        }
    }
}

/// Everything a rollout needs besides the scene and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub x0: Vec<f64>,
    /// One action vector per outer step.
    pub actions: Vec<Vec<f64>>,
    pub action_map: ActionMap,
    pub config: IntegratorConfig,
    pub checkpoint_stride: usize,
}

impl Rollout {
    /// Rollout of `steps` outer steps without actions.
    pub fn passive(x0: Vec<f64>, steps: usize, config: IntegratorConfig) -> Self {
        Rollout {
            x0,
            actions: vec![Vec::new(); steps],
            action_map: ActionMap::default(),
            config,
            checkpoint_stride: DEFAULT_CHECKPOINT_STRIDE,
        }
    }

    pub fn with_actions(mut self, map: ActionMap, actions: Vec<Vec<f64>>) -> Self {
        self.action_map = map;
        self.actions = actions;
        self
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Scalar objective of a rollout, written generically so its gradient comes
/// from the same dual numbers as the dynamics.
pub trait Loss {
    /// Cost of the state at the end of outer step `k` (`k` counts from 1).
    fn state_cost<T: Real>(&self, k: usize, x: &[T]) -> T;

    /// Cost of the action held during outer step `k` (from 0).
    fn action_cost<T: Real>(&self, _k: usize, _a: &[T]) -> T {
        T::zero()
    }
}

/// `weight · (x[index] − offset)` after outer step `steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalComponent {
    pub steps: usize,
    pub index: usize,
    pub offset: f64,
    pub weight: f64,
}

impl Loss for FinalComponent {
    fn state_cost<T: Real>(&self, k: usize, x: &[T]) -> T {
        if k == self.steps {
            (x[self.index] - self.offset) * self.weight
        } else {
            T::zero()
        }
    }
}

/// Squared distance of a body position to `target` over the first `axes`
/// coordinates, at the final step or summed over all steps, plus
/// `action_weight · |a|²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetDistance {
    pub steps: usize,
    /// Offset of the body position in the flat state.
    pub pos: usize,
    pub target: [f64; 3],
    pub axes: usize,
    pub running: bool,
    pub action_weight: f64,
}

impl TargetDistance {
    pub fn distance(&self, x: &[f64]) -> f64 {
        libm::sqrt(self.squared(x))
    }

    fn squared<T: Real>(&self, x: &[T]) -> T {
        let mut s = T::zero();
        for i in 0..self.axes {
            let d = x[self.pos + i] - self.target[i];
            s += d * d;
        }
        s
    }
}

impl Loss for TargetDistance {
    fn state_cost<T: Real>(&self, k: usize, x: &[T]) -> T {
        if self.running || k == self.steps {
            self.squared(x)
        } else {
            T::zero()
        }
    }

    fn action_cost<T: Real>(&self, _k: usize, a: &[T]) -> T {
        let mut s = T::zero();
        for &v in a {
            s += v * v;
        }
        s * self.action_weight
    }
}

/// Loss value and gradients of one rollout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Gradients {
    pub loss: f64,
    pub x0: Vec<f64>,
    pub params: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    /// Forward rhs evaluations.
    pub rhs_evals: usize,
    /// Dual step or rhs Jacobian evaluations of the backward pass.
    pub backward_evals: usize,
}

/// Adjoint covectors at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub a_x: Vec<f64>,
    pub a_theta: Vec<f64>,
    pub a_action: Vec<f64>,
    pub t: f64,
}

impl AdjointState {
    fn to_flat(&self) -> Vec<f64> {
        let mut z = self.a_x.clone();
        z.extend_from_slice(&self.a_theta);
        z.extend_from_slice(&self.a_action);
        z
    }

    fn from_flat(z: &[f64], n: usize, p: usize, t: f64) -> Self {
        AdjointState {
            a_x: z[..n].to_vec(),
            a_theta: z[n..n + p].to_vec(),
            a_action: z[n + p..].to_vec(),
            t,
        }
    }
}

/// Forward rollout summary.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    /// States at outer-step boundaries, `steps + 1` entries.
    pub states: Vec<Vec<f64>>,
    pub rhs_evals: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub min_h: f64,
}

struct Forward {
    loss: f64,
    checkpoints: Vec<Vec<f64>>,
    hints: Vec<Option<f64>>,
    rhs_evals: usize,
}

struct Problem<'a> {
    scene: &'a Scene,
    params: &'a ParamVector,
    rollout: &'a Rollout,
    base: Scene,
    layout: StateLayout,
    forward_mode: RhsMode,
    jacobian_mode: RhsMode,
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl<'a> Problem<'a> {
    fn new(
        scene: &'a Scene,
        params: &'a ParamVector,
        rollout: &'a Rollout,
        forward_mode: RhsMode,
        jacobian_mode: RhsMode,
    ) -> Result<Self, SimError> {
        let base = apply_params(scene, params)?;
        base.validate()?;
        let layout = base.layout();
        check_dim(&rollout.x0, &layout)?;
        rollout.config.validate()?;
        rollout.action_map.validate(layout.n_bodies())?;
        let m = rollout.action_map.dim();
        if let Some(k) = rollout.actions.iter().position(|a| a.len() != m) {
            return Err(SimError::Config(alloc::format!("action {k} has {} entries, expected {m}", rollout.actions[k].len())));
        }
        Ok(Problem {
            scene,
            params,
            rollout,
            base,
            layout,
            forward_mode,
            jacobian_mode,
        })
    }

    fn grad_modes(cfd_grad: bool) -> RhsMode {
        if cfd_grad {
            RhsMode::StraightThrough
        } else {
            RhsMode::Vanilla
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.layout.dim(), self.params.len(), self.rollout.action_map.dim())
    }

    fn outer(&self, k: usize, x: &[f64], hint: Option<f64>, cfg: &IntegratorConfig) -> Result<StepTape, SimError> {
        let applied = self.rollout.action_map.wrenches(self.layout.n_bodies(), &self.rollout.actions[k]);
        let ode = SceneOde::new(&self.base, &self.layout, applied, self.forward_mode);
        let dt = self.base.outer_dt;
        integrate(&ode, k as f64 * dt, x, dt, cfg, hint)
    }

    fn stacked(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len() + self.params.len() + a.len());
        z.extend_from_slice(x);
        z.extend_from_slice(&self.params.values);
        z.extend_from_slice(a);
        z
    }

    /// Jacobian of one accepted inner step over `[state | params | action]`.
    fn step_jacobian(&self, t: f64, h: f64, x: &[f64], a: &[f64]) -> DualBatch {
        let (n, p, _) = self.dims();
        let method = self.rollout.config.method;
        DualBatch::jacobian(&self.stacked(x, a), |z| {
            let sc = lift_with_params(self.scene, &self.params.layout, &z[n..n + p]);
            let applied = self.rollout.action_map.wrenches(self.layout.n_bodies(), &z[n + p..]);
            let ode = SceneOde::new(&sc, &self.layout, applied, self.jacobian_mode);
            step_map(&ode, method, t, &z[..n], h)
        })
    }

    /// Jacobian of the rhs over `[state | params | action]`.
    fn rhs_jacobian(&self, x: &[f64], a: &[f64], mode: RhsMode) -> DualBatch {
        let (n, p, _) = self.dims();
        DualBatch::jacobian(&self.stacked(x, a), |z| {
            let sc = lift_with_params(self.scene, &self.params.layout, &z[n..n + p]);
            let applied = self.rollout.action_map.wrenches(self.layout.n_bodies(), &z[n + p..]);
            let mut out = vec![D8::zero(); n];
            rhs_flat(&sc, &self.layout, &z[..n], &applied, mode, &mut out, None);
            out
        })
    }

    fn forward<L: Loss>(&self, loss: &L, cfg: &IntegratorConfig) -> Result<Forward, SimError> {
        let stride = self.rollout.checkpoint_stride.max(1);
        let mut x = self.rollout.x0.clone();
        let mut hint = None;
        let mut fw = Forward {
            loss: 0.0,
            checkpoints: Vec::new(),
            hints: Vec::new(),
            rhs_evals: 0,
        };
        for k in 0..self.rollout.steps() {
            if k % stride == 0 {
                fw.checkpoints.push(x.clone());
            }
            fw.hints.push(hint);
            fw.loss += loss.action_cost::<f64>(k, &self.rollout.actions[k]);
            let tape = self.outer(k, &x, hint, cfg)?;
            fw.rhs_evals += tape.rhs_evals;
            hint = cfg.method.is_adaptive().then_some(tape.h_next);
            x = tape.end_state;
            fw.loss += loss.state_cost::<f64>(k + 1, &x);
        }
        Ok(fw)
    }

    /// Recomputes the tapes of checkpoint segment `s`; returns its first outer step.
    fn segment(&self, fw: &Forward, s: usize, cfg: &IntegratorConfig) -> Result<(usize, Vec<StepTape>), SimError> {
        let stride = self.rollout.checkpoint_stride.max(1);
        let start = s * stride;
        let end = (start + stride).min(self.rollout.steps());
        let mut x = fw.checkpoints[s].clone();
        let mut tapes = Vec::with_capacity(end - start);
        for k in start..end {
            let tape = self.outer(k, &x, fw.hints[k], cfg)?;
            x.clone_from(&tape.end_state);
            tapes.push(tape);
        }
        Ok((start, tapes))
    }

    fn finish(&self, fw: Forward, lam: Vec<f64>, g_theta: Vec<f64>, g_act: Vec<Vec<f64>>, backward: usize) -> Gradients {
        Gradients {
            loss: fw.loss,
            x0: lam,
            params: g_theta,
            actions: g_act,
            rhs_evals: fw.rhs_evals,
            backward_evals: backward,
        }
    }
}

/// Runs a rollout and returns the boundary states.
pub fn simulate(scene: &Scene, params: &ParamVector, rollout: &Rollout, mode: RhsMode) -> Result<Trajectory, SimError> {
    let pb = Problem::new(scene, params, rollout, mode, mode)?;
    let mut x = rollout.x0.clone();
    let mut hint = None;
    let mut tr = Trajectory {
        states: vec![x.clone()],
        min_h: f64::INFINITY,
        ..Default::default()
    };
    for k in 0..rollout.steps() {
        let tape = pb.outer(k, &x, hint, &rollout.config)?;
        tr.rhs_evals += tape.rhs_evals;
        tr.accepted += tape.accepted();
        tr.rejected += tape.rejected;
        tr.min_h = tr.min_h.min(tape.min_h);
        hint = rollout.config.method.is_adaptive().then_some(tape.h_next);
        x = tape.end_state;
        tr.states.push(x.clone());
    }
    Ok(tr)
}

/// Loss of a rollout and its forward rhs evaluation count.
pub fn rollout_loss<L: Loss>(
    scene: &Scene,
    params: &ParamVector,
    rollout: &Rollout,
    loss: &L,
    mode: RhsMode,
) -> Result<(f64, usize), SimError> {
    let pb = Problem::new(scene, params, rollout, mode, mode)?;
    let fw = pb.forward(loss, &rollout.config)?;
    Ok((fw.loss, fw.rhs_evals))
}

/// Reverse-mode gradient through every accepted inner step. Accepted step
/// sizes are constants of the backward pass; inner steps are recomputed from
/// checkpoints. With `cfd_grad` the step Jacobians come from the
/// straight-through rhs while the forward values stay vanilla.
pub fn grad_unroll<L: Loss>(
    scene: &Scene,
    params: &ParamVector,
    rollout: &Rollout,
    loss: &L,
    cfd_grad: bool,
) -> Result<Gradients, SimError> {
    let mode = Problem::grad_modes(cfd_grad);
    let pb = Problem::new(scene, params, rollout, mode, mode)?;
    let fw = pb.forward(loss, &rollout.config)?;
    let (n, p, m) = pb.dims();
    let mut lam = vec![0.0; n];
    let mut g_theta = vec![0.0; p];
    let mut g_act = vec![vec![0.0; m]; rollout.steps()];
    let mut backward = 0;
    for s in (0..fw.checkpoints.len()).rev() {
        let (start, tapes) = pb.segment(&fw, s, &rollout.config)?;
        for (i, tape) in tapes.iter().enumerate().rev() {
            let k = start + i;
            add_into(&mut lam, &gradient(&tape.end_state, |x| loss.state_cost(k + 1, x)).1);
            let a = &rollout.actions[k];
            let mut ga = gradient(a, |ad| loss.action_cost(k, ad)).1;
            for e in tape.entries.iter().rev() {
                let v = pb.step_jacobian(e.t, e.h, &e.state, a).vjp(&lam);
                backward += 1;
                lam.copy_from_slice(&v[..n]);
                add_into(&mut g_theta, &v[n..n + p]);
                add_into(&mut ga, &v[n + p..]);
            }
            if !(all_finite(&lam) && all_finite(&g_theta) && all_finite(&ga)) {
                return Err(SimError::NonFiniteGradient { outer_step: k });
            }
            g_act[k] = ga;
        }
    }
    Ok(pb.finish(fw, lam, g_theta, g_act, backward))
}

/// Augmented adjoint system of one outer step in reversed time `s = t_end − t`.
struct AdjointOde<'p, 'a> {
    pb: &'p Problem<'a>,
    tape: &'p StepTape,
    action: &'p [f64],
    quats: Vec<usize>,
    evals: Cell<usize>,
}

impl Dynamics<f64> for AdjointOde<'_, '_> {
    fn dim(&self) -> usize {
        let (n, p, m) = self.pb.dims();
        n + p + m
    }

    fn eval(&self, s: f64, z: &[f64], out: &mut [f64]) {
        self.evals.set(self.evals.get() + 1);
        let n = self.pb.layout.dim();
        match dense_eval(self.tape, self.tape.t_end - s, &self.quats) {
            Ok((x, _)) => {
                let v = self.pb.rhs_jacobian(&x, self.action, self.pb.jacobian_mode).vjp(&z[..n]);
                out.copy_from_slice(&v);
            }
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn quat_offsets(&self) -> &[usize] {
        &[]
    }
}

/// Continuous adjoint gradient. The forward state comes from dense output of
/// the recorded tapes; the adjoint is integrated over each accepted forward
/// step with `adjoint_config`, and state-cost gradients are added at each
/// outer boundary.
pub fn grad_adjoint<L: Loss>(
    scene: &Scene,
    params: &ParamVector,
    rollout: &Rollout,
    loss: &L,
    cfd_grad: bool,
    adjoint_config: &IntegratorConfig,
) -> Result<Gradients, SimError> {
    adjoint_config.validate()?;
    let mode = Problem::grad_modes(cfd_grad);
    let pb = Problem::new(scene, params, rollout, mode, mode)?;
    let mut cfg = rollout.config;
    cfg.dense = true;
    let fw = pb.forward(loss, &cfg)?;
    let (n, p, m) = pb.dims();
    let quats = pb.layout.quat_offsets();
    let mut adj = AdjointState {
        a_x: vec![0.0; n],
        a_theta: vec![0.0; p],
        a_action: vec![0.0; m],
        t: pb.base.outer_dt * rollout.steps() as f64,
    };
    let mut g_act = vec![vec![0.0; m]; rollout.steps()];
    let mut backward = 0;
    let mut hint = None;
    for s in (0..fw.checkpoints.len()).rev() {
        let (start, tapes) = pb.segment(&fw, s, &cfg)?;
        for (i, tape) in tapes.iter().enumerate().rev() {
            let k = start + i;
            add_into(&mut adj.a_x, &gradient(&tape.end_state, |x| loss.state_cost(k + 1, x)).1);
            let a = &rollout.actions[k];
            let ga = gradient(a, |ad| loss.action_cost(k, ad)).1;
            adj.a_action = vec![0.0; m];
            let ode = AdjointOde {
                pb: &pb,
                tape,
                action: a,
                quats: quats.clone(),
                evals: Cell::new(0),
            };
            // One adjoint solve per forward step keeps short contact events
            // from being stepped over.
            let mut z = adj.to_flat();
            for e in tape.entries.iter().rev() {
                let s0 = tape.t_end - (e.t + e.h);
                let out = integrate(&ode, s0, &z, e.h, adjoint_config, hint)?;
                hint = adjoint_config.method.is_adaptive().then_some(out.h_next);
                z = out.end_state;
            }
            backward += ode.evals.get();
            adj = AdjointState::from_flat(&z, n, p, tape.t_start);
            let mut g = ga;
            add_into(&mut g, &adj.a_action);
            if !(all_finite(&adj.a_x) && all_finite(&adj.a_theta) && all_finite(&g)) {
                return Err(SimError::NonFiniteGradient { outer_step: k });
            }
            g_act[k] = g;
        }
    }
    Ok(pb.finish(fw, adj.a_x, adj.a_theta, g_act, backward))
}

/// Central differences of `f` at `theta` with step `eps_rel · max(1, |θ_i|)`.
pub fn grad_fd<F>(mut f: F, theta: &[f64], eps_rel: f64) -> Result<Vec<f64>, SimError>
where
    F: FnMut(&[f64]) -> Result<f64, SimError>,
{
    if !(eps_rel > 0.0) {
        return Err(SimError::Config(alloc::format!("fd step must be positive, got {eps_rel}")));
    }
    let mut th = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let step = eps_rel * theta[i].abs().max(1.0);
        th[i] = theta[i] + step;
        let up = f(&th)?;
        th[i] = theta[i] - step;
        let down = f(&th)?;
        th[i] = theta[i];
        g.push((up - down) / (2.0 * step));
    }
    Ok(g)
}

/// Vanilla trajectory with dense tapes, the expansion point of the
/// straight-through oracle.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    tapes: Vec<StepTape>,
    base: Scene,
    actions: Vec<Vec<f64>>,
}

/// Records the reference trajectory for [`frozen_reference_loss`].
pub fn frozen_reference(scene: &Scene, params: &ParamVector, rollout: &Rollout) -> Result<FrozenReference, SimError> {
    let pb = Problem::new(scene, params, rollout, RhsMode::Vanilla, RhsMode::Vanilla)?;
    let mut cfg = rollout.config;
    cfg.dense = true;
    let mut x = rollout.x0.clone();
    let mut hint = None;
    let mut tapes = Vec::with_capacity(rollout.steps());
    for k in 0..rollout.steps() {
        let tape = pb.outer(k, &x, hint, &cfg)?;
        hint = cfg.method.is_adaptive().then_some(tape.h_next);
        x.clone_from(&tape.end_state);
        tapes.push(tape);
    }
    Ok(FrozenReference {
        tapes,
        base: pb.base,
        actions: rollout.actions.clone(),
    })
}

struct FrozenOde<'r> {
    reference: &'r FrozenReference,
    tape: &'r StepTape,
    perturbed: &'r Scene,
    layout: &'r StateLayout,
    applied_ref: Vec<Wrench<f64>>,
    applied: Vec<Wrench<f64>>,
    quats: Vec<usize>,
}

impl Dynamics<f64> for FrozenOde<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let Ok((xr, _)) = dense_eval(self.tape, t, &self.quats) else {
            out.fill(f64::NAN);
            return;
        };
        let n = x.len();
        let (mut f_ref, mut s_ref) = (vec![0.0; n], vec![0.0; n]);
        rhs_flat(&self.reference.base, self.layout, &xr, &self.applied_ref, RhsMode::Vanilla, &mut f_ref, None);
        rhs_flat(&self.reference.base, self.layout, &xr, &self.applied_ref, RhsMode::Cfd, &mut s_ref, None);
        rhs_flat(self.perturbed, self.layout, x, &self.applied, RhsMode::Cfd, out, None);
        for i in 0..n {
            out[i] += f_ref[i] - s_ref[i];
        }
    }

    fn quat_offsets(&self) -> &[usize] {
        &self.quats
    }
}

/// Loss of the first-order straight-through model around `reference`:
/// `ẋ = F(x̄) + F̃(x; θ, a) − F̃(x̄; θ₀, a₀)` with `x̄` the reference
/// trajectory. Its derivative at the reference equals the straight-through
/// gradient of the continuous dynamics, so central differences of this loss
/// are an oracle for CFD gradients.
pub fn frozen_reference_loss<L: Loss>(
    reference: &FrozenReference,
    scene: &Scene,
    params: &ParamVector,
    rollout: &Rollout,
    loss: &L,
) -> Result<f64, SimError> {
    let pb = Problem::new(scene, params, rollout, RhsMode::Cfd, RhsMode::Cfd)?;
    if rollout.steps() != reference.tapes.len() {
        return Err(SimError::Config(alloc::format!(
            "reference has {} steps, rollout {}",
            reference.tapes.len(),
            rollout.steps()
        )));
    }
    let nb = pb.layout.n_bodies();
    let quats = pb.layout.quat_offsets();
    let dt = pb.base.outer_dt;
    let mut x = rollout.x0.clone();
    let mut hint = None;
    let mut total = 0.0;
    for (k, tape) in reference.tapes.iter().enumerate() {
        let a = &rollout.actions[k];
        total += loss.action_cost::<f64>(k, a);
        let ode = FrozenOde {
            reference,
            tape,
            perturbed: &pb.base,
            layout: &pb.layout,
            applied_ref: rollout.action_map.wrenches(nb, &reference.actions[k]),
            applied: rollout.action_map.wrenches(nb, a),
            quats: quats.clone(),
        };
        let out = integrate(&ode, k as f64 * dt, &x, dt, &rollout.config, hint)?;
        hint = rollout.config.method.is_adaptive().then_some(out.h_next);
        x = out.end_state;
        total += loss.state_cost::<f64>(k + 1, &x);
    }
    Ok(total)
}

/// Relative error against an oracle, with the denominator floored at
/// [`REL_ERROR_FLOOR`].
pub fn rel_error(value: f64, oracle: f64) -> f64 {
    (value - oracle).abs() / oracle.abs().max(REL_ERROR_FLOOR)
}

/// Adjacent pairs where `analytic` changes sign while `oracle` does not.
pub fn sign_flips(analytic: &[f64], oracle: &[f64]) -> usize {
    (1..analytic.len().min(oracle.len()))
        .filter(|&i| analytic[i - 1] * analytic[i] < 0.0 && oracle[i - 1] * oracle[i] >= 0.0)
        .count()
}

/// Points where `analytic` and `oracle` have opposite signs.
pub fn sign_mismatches(analytic: &[f64], oracle: &[f64]) -> usize {
    analytic.iter().zip(oracle).filter(|(a, o)| **a * **o < 0.0).count()
}

/// One grid point of a gradient sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub loss: f64,
    pub grad: f64,
    pub fd_grad: f64,
    pub rhs_evals: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientReport {
    pub sweep_values: Vec<f64>,
    pub losses: Vec<f64>,
    pub analytic_grads: Vec<f64>,
    pub fd_grads: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub sign_flip_count: usize,
    /// Grid points where the analytic gradient points the wrong way.
    pub sign_mismatch_count: usize,
    pub rhs_eval_counts: Vec<usize>,
    pub wall_times: Vec<f64>,
}

impl GradientReport {
    pub fn from_points(points: &[SweepPoint]) -> Self {
        let analytic: Vec<f64> = points.iter().map(|p| p.grad).collect();
        let fd: Vec<f64> = points.iter().map(|p| p.fd_grad).collect();
        GradientReport {
            sweep_values: points.iter().map(|p| p.value).collect(),
            losses: points.iter().map(|p| p.loss).collect(),
            rel_errors: points.iter().map(|p| rel_error(p.grad, p.fd_grad)).collect(),
            sign_flip_count: sign_flips(&analytic, &fd),
            sign_mismatch_count: sign_mismatches(&analytic, &fd),
            analytic_grads: analytic,
            fd_grads: fd,
            rhs_eval_counts: points.iter().map(|p| p.rhs_evals).collect(),
            wall_times: points.iter().map(|p| p.wall_time).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sweep_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sweep_values.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// Evaluates `point` over `grid` in order.
pub fn gradient_sweep<F>(grid: &[f64], mut point: F) -> Result<GradientReport, SimError>
where
    F: FnMut(f64) -> Result<SweepPoint, SimError>,
{
    let points = grid.iter().map(|&v| point(v)).collect::<Result<Vec<_>, _>>()?;
    Ok(GradientReport::from_points(&points))
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyModel {
    Penalty,
    Elastic,
    ElasticToi,
}

impl ToyModel {
    pub const ALL: [ToyModel; 3] = [ToyModel::Penalty, ToyModel::Elastic, ToyModel::ElasticToi];

    pub fn name(&self) -> &'static str {
        match self {
            ToyModel::Penalty => "penalty",
            ToyModel::Elastic => "elastic",
            ToyModel::ElasticToi => "elastic-toi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Point mass launched at a wall from height `q0`; loss `|q(T) − target|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySetup {
    pub v0: f64,
    pub horizon: f64,
    pub target: f64,
    pub params: ToyParams,
}

impl Default for ToySetup {
    fn default() -> Self {
        ToySetup {
            v0: -1.0,
            horizon: 2.0,
            target: 1.0,
            params: ToyParams::default(),
        }
    }
}

/// Loss and `dL/dq0` of the discrete toy at step `h`, by dual numbers.
pub fn toy_loss_grad(model: ToyModel, setup: &ToySetup, q0: f64, h: f64) -> (f64, f64) {
    let steps = libm::round(setup.horizon / h).max(1.0) as usize;
    let mut s = ToyState {
        q: Dual::<1>::seeded(q0, 0),
        v: Dual::constant(setup.v0),
    };
    for _ in 0..steps {
        s = match model {
            ToyModel::Penalty => toy_penalty_step(s, h, &setup.params),
            ToyModel::Elastic => toy_elastic_step(s, h, false),
            ToyModel::ElasticToi => toy_elastic_step(s, h, true),
        };
    }
    let l = (s.q - setup.target).abs();
    (l.re, l.eps[0])
}

/// Reference loss and gradient of the continuous toy. The penalty model is
/// integrated at tolerance 1e-10 and differenced; the elastic models use
/// the closed-form reflection.
pub fn toy_oracle(model: ToyModel, setup: &ToySetup, q0: f64, eps_rel: f64) -> Result<(f64, f64), SimError> {
    match model {
        ToyModel::Penalty => {
            let ode = ToyOde(setup.params);
            let cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10);
            let f = |q: &[f64]| -> Result<f64, SimError> {
                let tape = integrate(&ode, 0.0, &[q[0], setup.v0], setup.horizon, &cfg, None)?;
                Ok((tape.end_state[0] - setup.target).abs())
            };
            let loss = f(&[q0])?;
            let g = grad_fd(f, &[q0], eps_rel)?;
            Ok((loss, g[0]))
        }
        ToyModel::Elastic | ToyModel::ElasticToi => {
            let free = q0 + setup.v0 * setup.horizon;
            let (q, dq) = if free < 0.0 && setup.v0 < 0.0 { (-free, -1.0) } else { (free, 1.0) };
            let d = q - setup.target;
            Ok((d.abs(), if d < 0.0 { -dq } else { dq }))
        }
    }
}

/// Toy gradient sweep over `q0` at step `h`.
pub fn toy_sweep(model: ToyModel, setup: &ToySetup, h: f64, grid: &[f64]) -> Result<GradientReport, SimError> {
    let steps = libm::round(setup.horizon / h).max(1.0) as usize;
    gradient_sweep(grid, |q0| {
        let (loss, grad) = toy_loss_grad(model, setup, q0, h);
        let (_, fd_grad) = toy_oracle(model, setup, q0, TOY_FD_EPS)?;
        Ok(SweepPoint {
            value: q0,
            loss,
            grad,
            fd_grad,
            rhs_evals: steps,
            wall_time: 0.0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::tests::ball_scene;
    use crate::dynamics::tests::point_mass_scene;
    use crate::model::{pack_params, BodyKind, ParamSlot, Transform};
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn slot(path: &str, transform: Transform) -> ParamSlot {
        ParamSlot {
            name: path.to_string(),
            path: path.to_string(),
            transform,
        }
    }

    fn fd_column(scene: &Scene, x: &[f64], j: usize, row: usize, mode: RhsMode) -> f64 {
        let e = 1e-6;
        let mut xp = x.to_vec();
        xp[j] += e;
        let up = crate::dynamics::rhs(scene, &xp, &[], mode).state_derivative[row];
        xp[j] -= 2.0 * e;
        let down = crate::dynamics::rhs(scene, &xp, &[], mode).state_derivative[row];
        (up - down) / (2.0 * e)
    }

    #[test]
    fn jacobian_free_flight() {
        let s = point_mass_scene(1.0);
        let x = s.initial_state().to_flat(&s.layout());
        let j = jacobian_x(&s, &x, &[], RhsMode::Vanilla).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let expect = if r < 3 && c == r + 3 { 1.0 } else { 0.0 };
                assert_eq!(j.tangents[r][c], expect);
            }
        }
    }

    #[test]
    fn jacobian_resting_contact_matches_fd() {
        let s = ball_scene(0.0493, 0.05);
        let l = s.layout();
        let x = s.initial_state().to_flat(&l);
        let j = jacobian_x(&s, &x, &[], RhsMode::Vanilla).unwrap();
        let az = l.vel[0] + 2;
        let pz = l.pos[0] + 2;
        let fd = fd_column(&s, &x, pz, az, RhsMode::Vanilla);
        assert!(j.tangents[az][pz] < 0.0);
        assert!(rel_error(j.tangents[az][pz], fd) < 1e-4, "{} vs {fd}", j.tangents[az][pz]);
    }

    #[test]
    fn straight_through_sees_distant_contact() {
        let mut s = ball_scene(0.1, 0.05);
        s.cfd.width = 0.2;
        let l = s.layout();
        let x = s.initial_state().to_flat(&l);
        let az = l.vel[0] + 2;
        let pz = l.pos[0] + 2;
        let van = jacobian_x(&s, &x, &[], RhsMode::Vanilla).unwrap();
        let st = jacobian_x(&s, &x, &[], RhsMode::StraightThrough).unwrap();
        assert_eq!(van.tangents[az][pz], 0.0);
        assert!(st.tangents[az][pz] != 0.0);
        assert_eq!(van.primal, st.primal);
    }

    #[test]
    fn jacobian_theta_examples() {
        let s = point_mass_scene(1.0);
        let x = s.initial_state().to_flat(&s.layout());
        let p = pack_params(&s, &[slot("bodies[0].mass", Transform::Softplus { sharpness: 1.0 })]).unwrap();
        let j = jacobian_theta(&s, &p, &x, &[], RhsMode::Vanilla).unwrap();
        assert!(j.tangents.iter().all(|r| r[0] == 0.0));

        let s = ball_scene(0.049, 0.05);
        let l = s.layout();
        let x = s.initial_state().to_flat(&l);
        let az = l.vel[0] + 2;
        for path in ["geoms[0].radius", "contact_defaults.solref[0]"] {
            let p = pack_params(&s, &[slot(path, Transform::Identity)]).unwrap();
            let j = jacobian_theta(&s, &p, &x, &[], RhsMode::Vanilla).unwrap();
            let f = |v: f64| {
                let sc = apply_params(&s, &p.with_values(vec![v])).unwrap();
                crate::dynamics::rhs(&sc, &x, &[], RhsMode::Vanilla).state_derivative[az]
            };
            let e = 1e-7 * p.values[0].abs().max(1e-3);
            let fd = (f(p.values[0] + e) - f(p.values[0] - e)) / (2.0 * e);
            assert!(rel_error(j.tangents[az][0], fd) < 1e-4, "{path}: {} vs {fd}", j.tangents[az][0]);
            if path.contains("radius") {
                assert!(j.tangents[az][0] > 0.0);
            }
        }
    }

    fn ballistic() -> (Scene, Rollout) {
        let mut s = point_mass_scene(1.0);
        s.bodies[0].init.vel = [1.0, 0.0, 2.0];
        s.outer_dt = 0.1;
        let x0 = s.initial_state().to_flat(&s.layout());
        let r = Rollout::passive(x0, 5, IntegratorConfig::adaptive(Method::Rk54, 1e-8, 1e-8));
        (s, r)
    }

    #[test]
    fn ballistic_unroll_and_adjoint() {
        let (s, r) = ballistic();
        let loss = FinalComponent {
            steps: 5,
            index: 2,
            offset: 0.0,
            weight: 1.0,
        };
        let p = ParamVector::empty();
        let g = grad_unroll(&s, &p, &r, &loss, false).unwrap();
        assert!((g.x0[5] - 0.5).abs() < 1e-12);
        assert!((g.x0[2] - 1.0).abs() < 1e-12);
        let adj_cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10);
        let a = grad_adjoint(&s, &p, &r, &loss, false, &adj_cfg).unwrap();
        assert_eq!(a.loss, g.loss);
        for (u, v) in g.x0.iter().zip(&a.x0) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_is_transposed_transition() {
        // For p' = v, v' = g: Φ(T)ᵀ maps (∇p, ∇v) to (∇p, T∇p + ∇v).
        let (s, r) = ballistic();
        struct Quadratic;
        impl Loss for Quadratic {
            fn state_cost<T: Real>(&self, k: usize, x: &[T]) -> T {
                if k == 5 {
                    x[0] * 2.0 + x[4] * 3.0
                } else {
                    T::zero()
                }
            }
        }
        let cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10);
        let a = grad_adjoint(&s, &ParamVector::empty(), &r, &Quadratic, false, &cfg).unwrap();
        let expect = [2.0, 0.0, 0.0, 2.0 * 0.5, 3.0, 0.0];
        for (u, v) in a.x0.iter().zip(expect) {
            assert!((u - v).abs() < 1e-9, "{:?}", a.x0);
        }
    }

    #[test]
    fn fd_of_quadratic() {
        let g = grad_fd(|t| Ok(t[0] * t[0]), &[3.0], DEFAULT_FD_EPS).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!(grad_fd(|t| Ok(t[0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn ballistic_fd() {
        let (s, r) = ballistic();
        let loss = FinalComponent {
            steps: 5,
            index: 2,
            offset: 0.0,
            weight: 1.0,
        };
        let p = ParamVector::empty();
        let g = grad_fd(
            |v| {
                let mut rr = r.clone();
                rr.x0[5] = v[0];
                Ok(rollout_loss(&s, &p, &rr, &loss, RhsMode::Vanilla)?.0)
            },
            &[r.x0[5]],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!((g[0] - 0.5).abs() < 1e-9);
    }

    fn bounce() -> (Scene, Rollout, ParamVector) {
        let mut s = ball_scene(0.08, 0.05);
        s.bodies[0].init.vel = [0.5, 0.0, -0.5];
        s.bodies[0].init.angvel = [0.0, 1.0, 0.0];
        s.outer_dt = 0.02;
        s.cfd.width = 0.05;
        s.cfd.softplus_beta = 160.0;
        let x0 = s.initial_state().to_flat(&s.layout());
        let slots = [slot("contact_defaults.solref[0]", Transform::Softplus { sharpness: 100.0 })];
        let p = pack_params(&s, &slots).unwrap();
        let r = Rollout::passive(x0, 12, IntegratorConfig::adaptive(Method::Rk54, 1e-8, 1e-8))
            .with_actions(ActionMap::force_xy(0), vec![vec![0.1, -0.2]; 12]);
        (s, r, p)
    }

    fn bounce_loss() -> TargetDistance {
        TargetDistance {
            steps: 12,
            pos: 0,
            target: [0.2, 0.1, 0.1],
            axes: 3,
            running: true,
            action_weight: 0.01,
        }
    }

    #[test]
    fn checkpoint_stride_does_not_change_gradients() {
        let (s, mut r, p) = bounce();
        let a = grad_unroll(&s, &p, &r, &bounce_loss(), false).unwrap();
        r.checkpoint_stride = 1;
        let b = grad_unroll(&s, &p, &r, &bounce_loss(), false).unwrap();
        r.checkpoint_stride = 100;
        let c = grad_unroll(&s, &p, &r, &bounce_loss(), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn unroll_matches_fd_through_contact() {
        let (s, r, p) = bounce();
        let loss = bounce_loss();
        let g = grad_unroll(&s, &p, &r, &loss, false).unwrap();
        let mut fine = r.clone();
        fine.config = IntegratorConfig::adaptive(Method::Rk54, 1e-11, 1e-11);
        let fd_p = grad_fd(|v| Ok(rollout_loss(&s, &p.with_values(v.to_vec()), &fine, &loss, RhsMode::Vanilla)?.0), &p.values, 1e-5).unwrap();
        let fd_a = grad_fd(
            |v| {
                let mut rr = fine.clone();
                rr.actions[3] = v.to_vec();
                Ok(rollout_loss(&s, &p, &rr, &loss, RhsMode::Vanilla)?.0)
            },
            &r.actions[3],
            1e-5,
        )
        .unwrap();
        assert!(rel_error(g.params[0], fd_p[0]) < 1e-3, "{} vs {}", g.params[0], fd_p[0]);
        for (u, v) in g.actions[3].iter().zip(&fd_a) {
            assert!(rel_error(*u, *v) < 1e-3, "{u} vs {v}");
        }
        let adj_cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10);
        let a = grad_adjoint(&s, &p, &r, &loss, false, &adj_cfg).unwrap();
        assert!(rel_error(a.params[0], g.params[0]) < 1e-3, "{} vs {}", a.params[0], g.params[0]);
        assert!(rel_error(a.actions[3][0], g.actions[3][0]) < 1e-3);
    }

    #[test]
    fn straight_through_keeps_forward_values() {
        let (s, r, p) = bounce();
        let loss = bounce_loss();
        let van = rollout_loss(&s, &p, &r, &loss, RhsMode::Vanilla).unwrap();
        let st = rollout_loss(&s, &p, &r, &loss, RhsMode::StraightThrough).unwrap();
        assert_eq!(van.0.to_bits(), st.0.to_bits());
        assert_eq!(van.1, st.1);
        let a = simulate(&s, &p, &r, RhsMode::Vanilla).unwrap();
        let b = simulate(&s, &p, &r, RhsMode::StraightThrough).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn frozen_reference_oracle_matches_straight_through() {
        let mut s = ball_scene(0.08, 0.05);
        s.gravity = [0.0; 3];
        s.bodies[0].kind = BodyKind::PointMass;
        s.bodies[0].init.vel = [0.3, 0.0, 0.0];
        s.outer_dt = 0.02;
        s.cfd.width = 0.1;
        s.cfd.softplus_beta = 80.0;
        let x0 = s.initial_state().to_flat(&s.layout());
        let p = ParamVector::empty();
        let cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10);
        let r = Rollout::passive(x0, 10, cfg).with_actions(ActionMap::new(vec![(0, 2)]), vec![vec![0.0]; 10]);
        let loss = FinalComponent {
            steps: 10,
            index: 2,
            offset: 0.0,
            weight: 1.0,
        };
        let g = grad_adjoint(&s, &p, &r, &loss, true, &cfg).unwrap();
        let reference = frozen_reference(&s, &p, &r).unwrap();
        let fd = grad_fd(
            |v| {
                let mut rr = r.clone();
                rr.actions[0] = v.to_vec();
                frozen_reference_loss(&reference, &s, &p, &rr, &loss)
            },
            &[0.0],
            1e-5,
        )
        .unwrap();
        assert!(g.actions[0][0] != 0.0);
        assert!(rel_error(g.actions[0][0], fd[0]) < 1e-3, "{} vs {}", g.actions[0][0], fd[0]);
        let v = grad_unroll(&s, &p, &r, &loss, false).unwrap();
        assert!((v.actions[0][0] - 0.02 * 0.02 * 9.5).abs() < 1e-9);
    }

    #[test]
    fn sign_counting() {
        assert_eq!(sign_flips(&[1.0, -1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]), 2);
        assert_eq!(sign_flips(&[1.0, -1.0], &[1.0, -1.0]), 0);
        assert_eq!(sign_flips(&[0.0, -1.0], &[1.0, 1.0]), 0);
        assert_eq!(sign_mismatches(&[1.0, -1.0, 0.0], &[-1.0, -1.0, 1.0]), 1);
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn toy_elastic_toi_is_exact() {
        let setup = ToySetup::default();
        for h in [1e-2, 1e-3] {
            for q0 in [0.55, 0.8, 1.3] {
                let (l, g) = toy_loss_grad(ToyModel::ElasticToi, &setup, q0, h);
                let (lo, go) = toy_oracle(ToyModel::ElasticToi, &setup, q0, DEFAULT_FD_EPS).unwrap();
                assert!((g - go).abs() < 1e-6 && (l - lo).abs() < 1e-6);
                let (_, g_plain) = toy_loss_grad(ToyModel::Elastic, &setup, q0, h);
                assert_eq!(g_plain, -go);
            }
        }
    }

    #[test]
    fn toy_penalty_small_step_agrees() {
        let setup = ToySetup::default();
        let rep = toy_sweep(ToyModel::Penalty, &setup, 1e-4, &linspace(0.6, 1.4, 5)).unwrap();
        assert_eq!(rep.sign_flip_count, 0);
        assert!(rep.max_rel_error() < 3e-2);
        let coarse = toy_sweep(ToyModel::Penalty, &setup, 1e-2, &linspace(0.5, 1.5, 40)).unwrap();
        assert!(coarse.sign_flip_count >= 5);
    }

    proptest! {
        #[test]
        fn dual_exact_on_quartics(c in prop::array::uniform5(-3.0f64..3.0), x in -2.0f64..2.0) {
            let (v, g) = gradient(&[x], |z| {
                let t = z[0];
                t * t * t * t * c[4] + t * t * t * c[3] + t * t * c[2] + t * c[1] + c[0]
            });
            let pv = x * x * x * x * c[4] + x * x * x * c[3] + x * x * c[2] + x * c[1] + c[0];
            let pd = 4.0 * c[4] * x * x * x + 3.0 * c[3] * x * x + 2.0 * c[2] * x + c[1];
            prop_assert_eq!(v, pv);
            prop_assert!((g[0] - pd).abs() <= 1e-12 * (1.0 + pd.abs()));
        }

        #[test]
        fn jacobian_chunking_is_consistent(x in prop::collection::vec(-2.0f64..2.0, 1..20)) {
            let f = |z: &[D8]| -> Vec<D8> {
                (0..z.len()).map(|i| z[i] * z[(i + 1) % z.len()] + z[i].sin()).collect()
            };
            let b = DualBatch::jacobian(&x, f);
            let n = x.len();
            for i in 0..n {
                for j in 0..n {
                    let mut e = 0.0;
                    if j == i { e += x[(i + 1) % n] + libm::cos(x[i]); }
                    if j == (i + 1) % n { e += x[i]; }
                    prop_assert!((b.tangents[i][j] - e).abs() < 1e-12);
                }
            }
        }
    }
}
