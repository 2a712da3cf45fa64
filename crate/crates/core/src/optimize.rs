//! Adam, gradient clipping, gradient and sampling planners, the receding
//! horizon loop and parameter fitting on state segments.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::SimError;
use crate::integrate::IntegratorConfig;
use crate::math::Quat;
use crate::model::{ParamVector, Scene, StateLayout};
use crate::real::Real;
use crate::sensitivity::{grad_unroll, rollout_loss, simulate, ActionMap, Loss, Rollout, DEFAULT_CHECKPOINT_STRIDE};
use crate::dynamics::RhsMode;

/// Runs independent jobs, possibly in parallel. Results come back in index order.
pub trait Executor {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Runs every job on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.01,
            b1: 0.5,
            b2: 0.9,
            eps: 1e-6,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u32,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(dim: usize, hyper: AdamHyper) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step_count: 0,
            hyper,
        }
    }
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<(), SimError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(SimError::NonFiniteInput { what, index }),
        None => Ok(()),
    }
}

/// Bias-corrected Adam. Returns the new state and the update to add.
pub fn adam_step(state: &AdamState, grad: &[f64]) -> Result<(AdamState, Vec<f64>), SimError> {
    if grad.len() != state.m.len() {
        return Err(SimError::Config(alloc::format!(
            "gradient has {} entries, optimizer state {}",
            grad.len(),
            state.m.len()
        )));
    }
    check_finite("gradient", grad)?;
    let AdamHyper { lr, b1, b2, eps } = state.hyper;
    let t = state.step_count + 1;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let mut next = state.clone();
    next.step_count = t;
    let mut update = Vec::with_capacity(grad.len());
    for (i, &g) in grad.iter().enumerate() {
        next.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        next.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = next.m[i] / c1;
        let v_hat = next.v[i] / c2;
        update.push(-lr * m_hat / (libm::sqrt(v_hat) + eps));
    }
    Ok((next, update))
}

/// Rescales `grad` to global norm `max_norm` when it is longer.
pub fn clip_grad(grad: &[f64], max_norm: f64) -> Vec<f64> {
    debug_assert!(max_norm > 0.0);
    let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter().map(|g| g * s).collect()
    } else {
        grad.to_vec()
    }
}

fn flatten(a: &[Vec<f64>]) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(like.len());
    let mut i = 0;
    for row in like {
        out.push(flat[i..i + row.len()].to_vec());
        i += row.len();
    }
    out
}

/// An action sequence with the best iterate seen while refining it.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// One action vector per outer step.
    pub actions: Vec<Vec<f64>>,
    pub horizon_steps: usize,
    pub best_cost: f64,
    pub best_actions: Vec<Vec<f64>>,
    /// Running best cost after each evaluated iterate.
    pub best_trace: Vec<f64>,
}

impl Plan {
    pub fn new(actions: Vec<Vec<f64>>) -> Self {
        Plan {
            horizon_steps: actions.len(),
            best_cost: f64::INFINITY,
            best_actions: actions.clone(),
            actions,
            best_trace: Vec::new(),
        }
    }

    pub fn constant(horizon: usize, action: Vec<f64>) -> Self {
        Plan::new(vec![action; horizon])
    }

    fn record(&mut self, actions: &[Vec<f64>], cost: f64) {
        if cost < self.best_cost {
            self.best_cost = cost;
            self.best_actions = actions.to_vec();
        }
        self.best_trace.push(self.best_cost);
    }

    /// Drops the first `n` actions and pads with the last one.
    pub fn shifted(&self, n: usize) -> Plan {
        let src = &self.best_actions;
        let last = src.last().cloned().unwrap_or_default();
        let mut actions: Vec<Vec<f64>> = src.iter().skip(n).cloned().collect();
        actions.resize(src.len(), last);
        Plan::new(actions)
    }
}

/// Scene, integrator, actuation and objective of a planning problem.
pub struct PlanProblem<'a, L> {
    pub scene: &'a Scene,
    pub params: &'a ParamVector,
    pub action_map: ActionMap,
    pub config: IntegratorConfig,
    pub loss: L,
}

impl<L: Loss> PlanProblem<'_, L> {
    pub fn rollout(&self, x0: &[f64], actions: &[Vec<f64>]) -> Rollout {
        Rollout {
            x0: x0.to_vec(),
            actions: actions.to_vec(),
            action_map: self.action_map.clone(),
            config: self.config,
            checkpoint_stride: DEFAULT_CHECKPOINT_STRIDE,
        }
    }

    /// Forward cost under the unmodified dynamics.
    pub fn cost(&self, x0: &[f64], actions: &[Vec<f64>]) -> Result<f64, SimError> {
        let r = self.rollout(x0, actions);
        Ok(rollout_loss(self.scene, self.params, &r, &self.loss, RhsMode::Vanilla)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientPlannerConfig {
    pub iters: usize,
    pub adam: AdamHyper,
    pub clip_norm: f64,
    pub cfd_grad: bool,
}

impl Default for GradientPlannerConfig {
    fn default() -> Self {
        GradientPlannerConfig {
            iters: 32,
            adam: AdamHyper::with_lr(0.01),
            clip_norm: 1.0,
            cfd_grad: false,
        }
    }
}

/// Refines `plan` with clipped Adam steps on the unrolled action gradient.
/// A failed rollout ends the refinement; the best iterate so far is kept.
pub fn plan_gradient<L: Loss>(
    problem: &PlanProblem<'_, L>,
    x0: &[f64],
    plan: Plan,
    config: &GradientPlannerConfig,
) -> Plan {
    let mut plan = plan;
    let mut adam = AdamState::new(plan.actions.iter().map(Vec::len).sum(), config.adam);
    let mut actions = plan.actions.clone();
    for _ in 0..config.iters {
        let r = problem.rollout(x0, &actions);
        let g = match grad_unroll(problem.scene, problem.params, &r, &problem.loss, config.cfd_grad) {
            Ok(g) => g,
            Err(_) => break,
        };
        plan.record(&actions, g.loss);
        let grad = clip_grad(&flatten(&g.actions), config.clip_norm);
        let Ok((next, update)) = adam_step(&adam, &grad) else {
            break;
        };
        adam = next;
        let mut flat = flatten(&actions);
        for (a, u) in flat.iter_mut().zip(&update) {
            *a += u;
        }
        actions = unflatten(&flat, &actions);
    }
    if let Ok(c) = problem.cost(x0, &actions) {
        plan.record(&actions, c);
    }
    plan.actions = plan.best_actions.clone();
    plan
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPlannerConfig {
    pub samples: usize,
    pub sigma: f64,
}

impl Default for SamplingPlannerConfig {
    fn default() -> Self {
        SamplingPlannerConfig {
            samples: 256,
            sigma: 0.3,
        }
    }
}

/// Brown noise of shape `steps × dim`: per dimension the running sum of unit
/// white noise, divided by `√(k + 1)` so each step has unit variance.
pub fn brown_noise(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; steps];
    for j in 0..dim {
        let mut acc = 0.0;
        for (k, row) in out.iter_mut().enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            acc += w;
            row[j] = acc / libm::sqrt((k + 1) as f64);
        }
    }
    out
}

/// Predictive sampling: evaluates the plan and `samples − 1` brown-noise
/// perturbations of it and keeps the cheapest.
pub fn plan_sampling<L: Loss + Sync, E: Executor>(
    problem: &PlanProblem<'_, L>,
    x0: &[f64],
    plan: Plan,
    config: &SamplingPlannerConfig,
    rng: &mut ChaCha8Rng,
    exec: &E,
) -> Plan {
    let mut plan = plan;
    let base = plan.actions.clone();
    let dim = base.first().map_or(0, Vec::len);
    let k = config.samples.max(1);
    let mut candidates = vec![base.clone()];
    for _ in 1..k {
        let noise = brown_noise(rng, base.len(), dim);
        candidates.push(
            base.iter()
                .zip(&noise)
                .map(|(a, n)| a.iter().zip(n).map(|(a, n)| a + config.sigma * n).collect())
                .collect(),
        );
    }
    let costs = exec.map(candidates.len(), |i| problem.cost(x0, &candidates[i]).unwrap_or(f64::INFINITY));
    for (c, cost) in candidates.iter().zip(costs) {
        if cost < plan.best_cost {
            plan.best_cost = cost;
            plan.best_actions = c.clone();
        }
    }
    plan.best_trace.push(plan.best_cost);
    plan.actions = plan.best_actions.clone();
    plan
}

/// A planner used inside [`mpc_loop`].
pub trait Planner<L> {
    fn plan(&mut self, problem: &PlanProblem<'_, L>, x0: &[f64], plan: Plan) -> Plan;
}

/// Leaves the plan untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoopPlanner;

impl<L: Loss> Planner<L> for NoopPlanner {
    fn plan(&mut self, _problem: &PlanProblem<'_, L>, _x0: &[f64], plan: Plan) -> Plan {
        plan
    }
}

pub struct GradientPlanner(pub GradientPlannerConfig);

impl<L: Loss> Planner<L> for GradientPlanner {
    fn plan(&mut self, problem: &PlanProblem<'_, L>, x0: &[f64], plan: Plan) -> Plan {
        plan_gradient(problem, x0, plan, &self.0)
    }
}

pub struct SamplingPlanner<E> {
    pub config: SamplingPlannerConfig,
    pub rng: ChaCha8Rng,
    pub exec: E,
}

impl<E: Executor> SamplingPlanner<E> {
    pub fn new(config: SamplingPlannerConfig, seed: u64, exec: E) -> Self {
        SamplingPlanner {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            exec,
        }
    }
}

impl<L: Loss + Sync, E: Executor> Planner<L> for SamplingPlanner<E> {
    fn plan(&mut self, problem: &PlanProblem<'_, L>, x0: &[f64], plan: Plan) -> Plan {
        plan_sampling(problem, x0, plan, &self.config, &mut self.rng, &self.exec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcConfig {
    pub total_steps: usize,
    pub execute_steps: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            total_steps: 256,
            execute_steps: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MpcResult {
    /// States at every executed outer-step boundary.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// `step_cost` of each state after the first.
    pub step_costs: Vec<f64>,
    /// Running best cost of every planning round.
    pub plan_traces: Vec<Vec<f64>>,
}

/// Plans, executes `execute_steps` actions, shifts the plan and replans
/// until `total_steps` outer steps have run.
pub fn mpc_loop<L: Loss, P: Planner<L>>(
    problem: &PlanProblem<'_, L>,
    x0: &[f64],
    initial: Plan,
    planner: &mut P,
    config: &MpcConfig,
    step_cost: &dyn Fn(&[f64]) -> f64,
) -> Result<MpcResult, SimError> {
    if config.execute_steps == 0 || config.execute_steps > initial.horizon_steps {
        return Err(SimError::Config(alloc::format!(
            "execute_steps {} must lie in 1..={}",
            config.execute_steps,
            initial.horizon_steps
        )));
    }
    let mut out = MpcResult {
        states: vec![x0.to_vec()],
        ..Default::default()
    };
    let mut x = x0.to_vec();
    let mut plan = initial;
    let mut done = 0;
    while done < config.total_steps {
        plan = planner.plan(problem, &x, plan);
        out.plan_traces.push(plan.best_trace.clone());
        let n = config.execute_steps.min(config.total_steps - done);
        let chunk = plan.best_actions[..n].to_vec();
        let r = problem.rollout(&x, &chunk);
        let tr = simulate(problem.scene, problem.params, &r, RhsMode::Vanilla)?;
        for s in &tr.states[1..] {
            out.step_costs.push(step_cost(s));
            out.states.push(s.clone());
        }
        out.actions.extend(chunk);
        x = tr.states[n].clone();
        done += n;
        plan = plan.shifted(n);
    }
    Ok(out)
}

/// Mean squared error between predicted and recorded states over
/// positions, velocities and rotation-matrix entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMse {
    pub layout: StateLayout,
    /// Recorded states after outer steps 1..=n.
    pub targets: Vec<Vec<f64>>,
}

impl SegmentMse {
    fn features<T: Real>(&self, x: &[T]) -> Vec<T> {
        let l = &self.layout;
        let mut f = Vec::new();
        for b in 0..l.n_bodies() {
            f.extend_from_slice(&x[l.pos[b]..l.pos[b] + 3]);
            if let Some(q) = l.quat[b] {
                f.extend_from_slice(&Quat::from_slice(&x[q..q + 4]).to_matrix());
            }
            f.extend_from_slice(&x[l.vel[b]..l.vel[b] + 3]);
            if let Some(w) = l.angvel[b] {
                f.extend_from_slice(&x[w..w + 3]);
            }
        }
        f
    }
}

impl Loss for SegmentMse {
    fn state_cost<T: Real>(&self, k: usize, x: &[T]) -> T {
        let Some(target) = k.checked_sub(1).and_then(|i| self.targets.get(i)) else {
            return T::zero();
        };
        let pred = self.features(x);
        let truth = self.features(&target.iter().map(|&v| T::cst(v)).collect::<Vec<_>>());
        let mut s = T::zero();
        for (p, t) in pred.iter().zip(&truth) {
            let d = *p - *t;
            s += d * d;
        }
        s / (pred.len() * self.targets.len()) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub adam: AdamHyper,
    /// Segments per optimizer step; all of them when larger than the dataset.
    pub batch: usize,
    pub cfd_grad: bool,
    pub integrator: IntegratorConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 500,
            adam: AdamHyper::with_lr(0.01),
            batch: 64,
            cfd_grad: false,
            integrator: IntegratorConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FitResult {
    /// Scene-space parameter values before every step and after the last.
    pub param_trace: Vec<Vec<f64>>,
    /// Batch loss at every step.
    pub loss_trace: Vec<f64>,
    /// Optimizer steps whose batch gradient failed and were skipped.
    pub failed_steps: usize,
    pub final_params: Vec<f64>,
}

/// Splits a recorded trajectory into overlapping windows of `len` states.
pub fn segments(states: &[Vec<f64>], len: usize) -> Vec<Vec<Vec<f64>>> {
    if len == 0 || states.len() < len {
        return Vec::new();
    }
    (0..=states.len() - len).map(|i| states[i..i + len].to_vec()).collect()
}

fn segment_grad(
    scene: &Scene,
    params: &ParamVector,
    seg: &[Vec<f64>],
    config: &FitConfig,
) -> Result<(f64, Vec<f64>), SimError> {
    let loss = SegmentMse {
        layout: scene.layout(),
        targets: seg[1..].to_vec(),
    };
    let rollout = Rollout::passive(seg[0].clone(), seg.len() - 1, config.integrator);
    let g = grad_unroll(scene, params, &rollout, &loss, config.cfd_grad)?;
    Ok((g.loss, g.params))
}

/// Segment loss and parameter gradient averaged over `batch`.
pub fn batch_loss_grad<E: Executor>(
    scene: &Scene,
    params: &ParamVector,
    dataset: &[Vec<Vec<f64>>],
    batch: &[usize],
    config: &FitConfig,
    exec: &E,
) -> Result<(f64, Vec<f64>), SimError> {
    let results = exec.map(batch.len(), |i| segment_grad(scene, params, &dataset[batch[i]], config));
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = batch.len().max(1) as f64;
    Ok((loss / n, grad.iter().map(|g| g / n).collect()))
}

/// Fits `params` to recorded segments with Adam on the unrolled segment MSE.
pub fn fit_params<E: Executor>(
    scene: &Scene,
    dataset: &[Vec<Vec<f64>>],
    params: &ParamVector,
    config: &FitConfig,
    exec: &E,
) -> Result<FitResult, SimError> {
    let n = scene.layout().dim();
    if dataset.is_empty() {
        return Err(SimError::Config("empty dataset".into()));
    }
    for (i, seg) in dataset.iter().enumerate() {
        if seg.len() < 2 || seg.iter().any(|s| s.len() != n) {
            return Err(SimError::Config(alloc::format!(
                "segment {i} does not match the scene state dimension {n}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = params.clone();
    let mut adam = AdamState::new(p.len(), config.adam);
    let mut out = FitResult::default();
    for _ in 0..config.steps {
        out.param_trace.push(p.scene_values());
        let batch: Vec<usize> = if config.batch >= dataset.len() {
            (0..dataset.len()).collect()
        } else {
            (0..config.batch).map(|_| rng.random_range(0..dataset.len())).collect()
        };
        let (loss, grad) = match batch_loss_grad(scene, &p, dataset, &batch, config, exec) {
            Ok(v) => v,
            Err(SimError::Model(e)) => return Err(SimError::Model(e)),
            Err(_) => {
                out.failed_steps += 1;
                out.loss_trace.push(f64::NAN);
                continue;
            }
        };
        out.loss_trace.push(loss);
        let (next, update) = adam_step(&adam, &grad)?;
        adam = next;
        let values = p.values.iter().zip(&update).map(|(v, u)| v + u).collect();
        p = p.with_values(values);
    }
    out.param_trace.push(p.scene_values());
    out.final_params = p.scene_values();
    Ok(out)
}
