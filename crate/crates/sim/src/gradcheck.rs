//! Battery of derivative and invariant checks against independent oracles.
//!
//! Jacobians from dual numbers are compared with central differences on
//! random configurations. A configuration counts as smooth when central
//! differences at two step sizes agree; non-smooth draws (contact set or
//! active-set changes inside the stencil) are redrawn.

use diffcontact_core::collision::detect;
use diffcontact_core::dynamics::{body_frames, contact_response, rhs_flat, RhsMode, Wrench};
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::{ParamVector, Scene, Shape, StateLayout, SystemState};
use diffcontact_core::real::{Real, D8};
use diffcontact_core::sensitivity::{grad_adjoint, grad_unroll, simulate, DualBatch, FinalComponent, Rollout};
use diffcontact_core::SimError;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random configurations per Jacobian check.
    pub configs: usize,
    pub jacobian_tol: f64,
    pub energy_tol: f64,
    pub quat_tol: f64,
    pub adjoint_tol: f64,
    /// Outer steps of the rollout checks on scenarios without a task
    /// horizon.
    pub rollout_steps: usize,
    /// Corrupts one entry of the dual rhs Jacobian (negative control).
    pub perturb_jacobian: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            configs: 100,
            jacobian_tol: 1e-4,
            energy_tol: 1e-8,
            quat_tol: 1e-9,
            adjoint_tol: 1e-3,
            rollout_steps: 50,
            perturb_jacobian: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst_error: f64,
    pub tolerance: f64,
    pub samples: usize,
    /// Where the worst error occurred.
    pub location: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tool_version: String,
    pub seed: u64,
    pub passed: bool,
    pub config: GradcheckConfig,
    pub checks: Vec<CheckResult>,
}

/// Jacobian disagreement: normwise relative error and the largest entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianError {
    pub rel: f64,
    pub row: usize,
    pub col: usize,
}

/// Normwise (Frobenius) relative error of `ad` against `fd`.
pub fn jacobian_error(ad: &[Vec<f64>], fd: &[Vec<f64>]) -> JacobianError {
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut worst = (0.0, 0, 0);
    for (i, (ra, rf)) in ad.iter().zip(fd).enumerate() {
        for (j, (a, f)) in ra.iter().zip(rf).enumerate() {
            let d = a - f;
            diff2 += d * d;
            ref2 += f * f;
            if d.abs() > worst.0 || d.is_nan() {
                worst = (d.abs(), i, j);
            }
        }
    }
    let rel = if ad.len() != fd.len() || ad.iter().zip(fd).any(|(a, f)| a.len() != f.len()) {
        f64::INFINITY
    } else if diff2 == 0.0 {
        0.0
    } else {
        (diff2 / ref2.max(1e-24)).sqrt()
    };
    JacobianError {
        rel,
        row: worst.1,
        col: worst.2,
    }
}

/// Central-difference Jacobian with steps `rel_step · max(1, |x_j|)`.
/// `None` when the output length changes inside the stencil.
pub fn fd_jacobian(x: &[f64], rel_step: f64, f: &dyn Fn(&[f64]) -> Vec<f64>) -> Option<Vec<Vec<f64>>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        if up.len() != m || dn.len() != m {
            return None;
        }
        for i in 0..m {
            jac[i][j] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    Some(jac)
}

const FD_STEP: f64 = 1e-6;
/// Agreement required between the two difference steps for a draw to
/// count as smooth.
const SMOOTH_TOL: f64 = 1e-6;
const MAX_DRAWS: usize = 200;

/// Smooth-configuration FD Jacobian, or `None` if the draw is rejected.
fn smooth_fd(x: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>) -> Option<Vec<Vec<f64>>> {
    let a = fd_jacobian(x, FD_STEP, f)?;
    let b = fd_jacobian(x, FD_STEP / 4.0, f)?;
    let ok = a.iter().flatten().chain(b.iter().flatten()).all(|v| v.is_finite());
    (ok && jacobian_error(&a, &b).rel <= SMOOTH_TOL).then_some(a)
}

fn extent(scene: &Scene, b: usize) -> f64 {
    scene
        .primary_geom(b)
        .map(|g| match &scene.geoms[g].shape {
            Shape::Sphere { radius } => *radius,
            Shape::Corners { points, scale } => {
                scale * points.iter().map(|p| p.iter().map(|c| c * c).sum::<f64>().sqrt()).fold(0.0, f64::max)
            }
            Shape::Plane { .. } => 0.05,
        })
        .unwrap_or(0.05)
}

/// Random state around the scene's initial state: bodies near or into
/// the floor, other bodies often within reach of body 0.
pub fn random_state(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let layout = scene.layout();
    let mut x = scene.initial_state().to_flat(&layout);
    for b in 0..scene.bodies.len() {
        let p = layout.pos[b];
        let s = extent(scene, b);
        x[p] += rng.random_range(-0.05..0.05);
        x[p + 1] += rng.random_range(-0.05..0.05);
        x[p + 2] = rng.random_range(-0.3 * s..1.5 * s);
        if b > 0 && rng.random_bool(0.5) {
            let reach = s + extent(scene, 0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = reach * rng.random_range(0.6..1.3);
            x[p] = x[layout.pos[0]] + d * angle.cos();
            x[p + 1] = x[layout.pos[0] + 1] + d * angle.sin();
            x[p + 2] = x[layout.pos[0] + 2] + rng.random_range(-0.2 * s..0.2 * s);
        }
        if let Some(q) = layout.quat[b] {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-3);
            for i in 0..4 {
                x[q + i] = v[i] / n;
            }
        }
        let v = layout.vel[b];
        for i in 0..3 {
            x[v + i] = rng.random_range(-1.0..1.0);
        }
        if let Some(w) = layout.angvel[b] {
            for i in 0..3 {
                x[w + i] = rng.random_range(-5.0..5.0);
            }
        }
    }
    x
}

fn collision_outputs<T: Real>(scene: &Scene<T>, layout: &StateLayout, x: &[T], margin: f64) -> Vec<T> {
    detect(scene, layout, x, margin)
        .iter()
        .flat_map(|c| {
            let mut v = vec![c.r];
            v.extend(c.normal.to_array());
            v.extend(c.pos.to_array());
            v
        })
        .collect()
}

fn contact_outputs<T: Real>(scene: &Scene<T>, layout: &StateLayout, x: &[T], cfd_mode: bool) -> Vec<T> {
    let no_wrench: Vec<Wrench<T>> = Vec::new();
    let frames = body_frames(scene, layout, x, &no_wrench);
    let (_, forces) = contact_response(scene, layout, x, &frames, cfd_mode);
    let mut out = forces.normal.clone();
    out.extend(forces.friction.iter().flatten().copied());
    for (f, t) in &forces.wrench {
        out.extend(f.to_array());
        out.extend(t.to_array());
    }
    out
}

fn rhs_outputs<T: Real>(scene: &Scene<T>, layout: &StateLayout, x: &[T], mode: RhsMode) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let no_wrench: Vec<Wrench<T>> = Vec::new();
    rhs_flat(scene, layout, x, &no_wrench, mode, &mut out, None);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Collision(bool),
    Contact(bool),
    Rhs(RhsMode),
}

impl Target {
    fn name(&self) -> String {
        let cfd = |c: bool| if c { "cfd" } else { "vanilla" };
        match self {
            Target::Collision(c) => format!("collision_jacobian[{}]", cfd(*c)),
            Target::Contact(c) => format!("contact_jacobian[{}]", cfd(*c)),
            Target::Rhs(RhsMode::Vanilla) => "rhs_jacobian[vanilla]".into(),
            Target::Rhs(RhsMode::Cfd) => "rhs_jacobian[cfd]".into(),
            Target::Rhs(RhsMode::StraightThrough) => "rhs_jacobian[straight-through]".into(),
        }
    }

    fn eval<T: Real>(&self, scene: &Scene<T>, layout: &StateLayout, x: &[T]) -> Vec<T> {
        match *self {
            Target::Collision(c) => collision_outputs(scene, layout, x, if c { scene.cfd.width.re() } else { 0.0 }),
            Target::Contact(c) => contact_outputs(scene, layout, x, c),
            Target::Rhs(m) => rhs_outputs(scene, layout, x, m),
        }
    }
}

/// Dual-number Jacobian against central differences over `configs`
/// smooth random draws, cycling through `scenes`.
fn jacobian_check(target: Target, scenes: &[&Scenario], cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = (0.0, String::from("-"));
    let mut samples = 0;
    let mut rejected = 0;
    for k in 0..cfg.configs {
        let sc = scenes[k % scenes.len()];
        let scene = &sc.scene;
        let layout = scene.layout();
        let lifted = scene.lift::<D8>();
        let f = |z: &[f64]| target.eval(scene, &layout, z);
        for _ in 0..MAX_DRAWS {
            let x = random_state(scene, rng);
            let Some(fd) = smooth_fd(&x, &f) else {
                rejected += 1;
                continue;
            };
            let mut ad = DualBatch::jacobian(&x, |z| target.eval(&lifted, &layout, z)).tangents;
            if cfg.perturb_jacobian && matches!(target, Target::Rhs(_)) {
                let (r, c) = (layout.vel[0] + 2, layout.pos[0] + 2);
                let scale: f64 = fd.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
                ad[r][c] += 1e-2 * scale.max(1.0);
            }
            let e = jacobian_error(&ad, &fd);
            samples += 1;
            if !(e.rel <= worst.0) {
                worst = (
                    e.rel,
                    format!("scenario {}, config {k}, d out[{}] / d x[{}]", sc.name, e.row, e.col),
                );
            }
            break;
        }
    }
    let passed = samples == cfg.configs && worst.0 <= cfg.jacobian_tol;
    let mut location = worst.1;
    if samples < cfg.configs {
        location = format!("only {samples} of {} smooth draws ({rejected} rejected)", cfg.configs);
    }
    CheckResult {
        name: target.name(),
        passed,
        worst_error: worst.0,
        tolerance: cfg.jacobian_tol,
        samples,
        location,
    }
}

/// Kinetic plus potential energy of all bodies.
pub fn total_energy(scene: &Scene, x: &[f64]) -> f64 {
    let layout = scene.layout();
    let mut e = 0.0;
    for (b, body) in scene.bodies.iter().enumerate() {
        let v = &x[layout.vel[b]..layout.vel[b] + 3];
        let p = &x[layout.pos[b]..layout.pos[b] + 3];
        e += 0.5 * body.mass * v.iter().map(|c| c * c).sum::<f64>();
        e -= body.mass * (0..3).map(|i| scene.gravity[i] * p[i]).sum::<f64>();
        if let Some(w) = layout.angvel[b] {
            let inertia = scene.inertia(b);
            e += 0.5 * (0..3).map(|i| inertia[i] * x[w + i] * x[w + i]).sum::<f64>();
        }
    }
    e
}

fn without_static_geoms(scene: &Scene) -> Scene {
    let mut s = scene.clone();
    s.geoms.retain(|g| g.body.is_some());
    s
}

fn tight() -> IntegratorConfig {
    IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10)
}

/// Relative energy drift of a contact-free flight from the initial state.
fn energy_check(scenes: &[&Scenario], cfg: &GradcheckConfig) -> Result<CheckResult, SimError> {
    let mut worst = (0.0, String::from("-"));
    for sc in scenes {
        let scene = without_static_geoms(&sc.scene);
        let x0 = scene.initial_state().to_flat(&scene.layout());
        let tr = simulate(&scene, &ParamVector::empty(), &Rollout::passive(x0, cfg.rollout_steps, tight()), RhsMode::Vanilla)?;
        let energies: Vec<f64> = tr.states.iter().map(|x| total_energy(&scene, x)).collect();
        let scale = energies.iter().fold(1e-12, |m, e| m.max(e.abs()));
        for (i, e) in energies.iter().enumerate() {
            let d = (e - energies[0]).abs() / scale;
            if !(d <= worst.0) {
                worst = (d, format!("scenario {}, step {i}", sc.name));
            }
        }
    }
    Ok(CheckResult {
        name: "ballistic_energy_drift".into(),
        passed: worst.0 <= cfg.energy_tol,
        worst_error: worst.0,
        tolerance: cfg.energy_tol,
        samples: scenes.len(),
        location: worst.1,
    })
}

fn horizon(sc: &Scenario, cfg: &GradcheckConfig) -> usize {
    sc.task.horizon_steps.unwrap_or(cfg.rollout_steps)
}

fn scene_config(sc: &Scenario) -> IntegratorConfig {
    sc.task.integrator.as_ref().and_then(|d| d.to_config()).unwrap_or_default()
}

/// Quaternion norms along a contact-rich rollout of every scenario.
fn quat_check(scenes: &[&Scenario], cfg: &GradcheckConfig) -> Result<CheckResult, SimError> {
    let mut worst = (0.0, String::from("-"));
    let mut samples = 0;
    for sc in scenes {
        let layout = sc.scene.layout();
        if layout.quat.iter().all(Option::is_none) {
            continue;
        }
        let x0 = sc.scene.initial_state().to_flat(&layout);
        let r = Rollout::passive(x0, horizon(sc, cfg), scene_config(sc));
        let tr = simulate(&sc.scene, &ParamVector::empty(), &r, RhsMode::Vanilla)?;
        for (i, x) in tr.states.iter().enumerate() {
            let e = SystemState::from_flat(&layout, x, 0.0).quat_norm_error();
            samples += 1;
            if !(e <= worst.0) {
                worst = (e, format!("scenario {}, step {i}", sc.name));
            }
        }
    }
    Ok(CheckResult {
        name: "quaternion_norm".into(),
        passed: worst.0 <= cfg.quat_tol,
        worst_error: worst.0,
        tolerance: cfg.quat_tol,
        samples,
        location: worst.1,
    })
}

/// Removes the component along each unit quaternion: renormalization makes
/// it invisible to the unrolled gradient.
fn tangent_part(layout: &StateLayout, x: &[f64], mut g: Vec<f64>) -> Vec<f64> {
    for q in layout.quat.iter().flatten() {
        let dot: f64 = (0..4).map(|i| g[q + i] * x[q + i]).sum();
        for i in 0..4 {
            g[q + i] -= dot * x[q + i];
        }
    }
    g
}

/// Initial-state gradient of the final x position of body 0 by unrolling
/// and by the adjoint, both at tolerance 1e-8.
fn adjoint_check(scenes: &[&Scenario], cfg: &GradcheckConfig) -> Result<CheckResult, SimError> {
    let mut worst = (0.0, String::from("-"));
    let c = IntegratorConfig::adaptive(Method::Rk54, 1e-8, 1e-8);
    for sc in scenes {
        let layout = sc.scene.layout();
        let x0 = sc.scene.initial_state().to_flat(&layout);
        let steps = horizon(sc, cfg);
        let r = Rollout::passive(x0, steps, c);
        let loss = FinalComponent {
            steps,
            index: layout.pos[0],
            offset: 0.0,
            weight: 1.0,
        };
        let p = ParamVector::empty();
        let u = grad_unroll(&sc.scene, &p, &r, &loss, false)?;
        let a = grad_adjoint(&sc.scene, &p, &r, &loss, false, &c)?;
        let (ga, gu) = (tangent_part(&layout, &r.x0, a.x0), tangent_part(&layout, &r.x0, u.x0));
        let e = jacobian_error(&[ga], &[gu]);
        if !(e.rel <= worst.0) {
            worst = (e.rel, format!("scenario {}, d loss / d x0[{}]", sc.name, e.col));
        }
    }
    Ok(CheckResult {
        name: "unroll_vs_adjoint".into(),
        passed: worst.0 <= cfg.adjoint_tol,
        worst_error: worst.0,
        tolerance: cfg.adjoint_tol,
        samples: scenes.len(),
        location: worst.1,
    })
}

/// Straight-through value lanes equal the vanilla rollout bitwise, and its
/// tangents equal those of the CFD dynamics bitwise.
fn straight_through_check(scenes: &[&Scenario], cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult, SimError> {
    let mut bad = 0usize;
    let mut location = String::from("-");
    let mut samples = 0;
    for sc in scenes {
        let layout = sc.scene.layout();
        let x0 = random_state(&sc.scene, rng);
        let r = Rollout::passive(x0.clone(), cfg.rollout_steps, scene_config(sc));
        let p = ParamVector::empty();
        let a = simulate(&sc.scene, &p, &r, RhsMode::Vanilla)?;
        let b = simulate(&sc.scene, &p, &r, RhsMode::StraightThrough)?;
        samples += 1;
        let same = a.states.len() == b.states.len()
            && a.states.iter().flatten().zip(b.states.iter().flatten()).all(|(u, v)| u.to_bits() == v.to_bits());
        if !same {
            bad += 1;
            location = format!("scenario {}, forward states", sc.name);
        }
        let lifted = sc.scene.lift::<D8>();
        let st = DualBatch::jacobian(&x0, |z| rhs_outputs(&lifted, &layout, z, RhsMode::StraightThrough));
        let cfd = DualBatch::jacobian(&x0, |z| rhs_outputs(&lifted, &layout, z, RhsMode::Cfd));
        samples += 1;
        if st.tangents != cfd.tangents {
            bad += 1;
            location = format!("scenario {}, rhs tangents", sc.name);
        }
    }
    Ok(CheckResult {
        name: "straight_through_invariance".into(),
        passed: bad == 0,
        worst_error: bad as f64,
        tolerance: 0.0,
        samples,
        location,
    })
}

/// Runs every check on `scenes`.
pub fn run(scenes: &[Scenario], cfg: &GradcheckConfig) -> Result<GradcheckReport, SimError> {
    let all: Vec<&Scenario> = scenes.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for target in [
        Target::Collision(false),
        Target::Collision(true),
        Target::Contact(false),
        Target::Contact(true),
        Target::Rhs(RhsMode::Vanilla),
        Target::Rhs(RhsMode::Cfd),
    ] {
        checks.push(jacobian_check(target, &all, cfg, &mut rng));
    }
    checks.push(energy_check(&all, cfg)?);
    checks.push(quat_check(&all, cfg)?);
    checks.push(adjoint_check(&all, cfg)?);
    checks.push(straight_through_check(&all, cfg, &mut rng)?);
    Ok(GradcheckReport {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        passed: checks.iter().all(|c| c.passed),
        config: *cfg,
        checks,
    })
}
