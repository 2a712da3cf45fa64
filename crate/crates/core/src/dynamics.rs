//! ODE right-hand side for free rigid bodies with soft contact, and the 1D
//! toy models.

use alloc::vec;
use alloc::vec::Vec;

use crate::collision::{detect, ContactPoint};
use crate::contact::{contact_forces, impedance, ContactForceResult, reference_acceleration, regularizer, BodyFrame};
use crate::integrate::Dynamics;
use crate::math::{Quat, Vec3};
use crate::model::{Scene, Solimp, Solref, StateLayout};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhsMode {
    Vanilla,
    /// Contacts from distance active in the forward value.
    Cfd,
    /// Vanilla value, derivatives of the [`RhsMode::Cfd`] dynamics.
    StraightThrough,
}

/// Per-body world-frame wrench `[force; torque]`.
pub type Wrench<T> = [T; 6];

/// `(signed distance, normal force)` per detected contact.
pub type ContactDiag = Vec<(f64, f64)>;

/// Kinematic and free-motion quantities of every body.
pub fn body_frames<T: Real>(scene: &Scene<T>, layout: &StateLayout, x: &[T], applied: &[Wrench<T>]) -> Vec<BodyFrame<T>> {
    let nb = scene.bodies.len();
    let g = Vec3::<f64>::from_f64(scene.gravity).lift::<T>();
    let mut frames = Vec::with_capacity(nb);
    for b in 0..nb {
        let body = &scene.bodies[b];
        let inv_mass = body.mass.recip();
        let pos = Vec3::from_slice(&x[layout.pos[b]..]);
        let vel = Vec3::from_slice(&x[layout.vel[b]..]);
        let w = applied.get(b);
        let force = w.map(|w| Vec3::new(w[0], w[1], w[2])).unwrap_or(Vec3::zero());
        let acc_free = g + force.scale(inv_mass);
        let frame = match (layout.quat[b], layout.angvel[b]) {
            (Some(qo), Some(wo)) => {
                let q = Quat::from_slice(&x[qo..]);
                let omega = Vec3::from_slice(&x[wo..]);
                let inertia = Vec3::from_slice(&scene.inertia(b));
                let inv_inertia = Vec3::new(inertia.x.recip(), inertia.y.recip(), inertia.z.recip());
                let torque = w.map(|w| q.inv_rotate(Vec3::new(w[3], w[4], w[5]))).unwrap_or(Vec3::zero());
                let gyro = omega.cross(inertia.hadamard(omega));
                BodyFrame {
                    inv_mass,
                    inv_inertia: Some(inv_inertia),
                    com: pos,
                    quat: Some(q),
                    vel,
                    omega,
                    acc_free,
                    alpha_free: (torque - gyro).hadamard(inv_inertia),
                }
            }
            _ => BodyFrame {
                inv_mass,
                inv_inertia: None,
                com: pos,
                quat: None,
                vel,
                omega: Vec3::zero(),
                acc_free,
                alpha_free: Vec3::zero(),
            },
        };
        frames.push(frame);
    }

    frames
}

/// Detected contacts and their forces at state `x`, with contacts from
/// distance when `cfd_mode` is set.
pub fn contact_response<T: Real>(
    scene: &Scene<T>,
    layout: &StateLayout,
    x: &[T],
    frames: &[BodyFrame<T>],
    cfd_mode: bool,
) -> (Vec<ContactPoint<T>>, ContactForceResult<T>) {
    let margin = if cfd_mode { scene.cfd.width.re() } else { 0.0 };
    let contacts = detect(scene, layout, x, margin);
    let forces = contact_forces(frames, &contacts, &scene.cfd, cfd_mode);
    (contacts, forces)
}

fn eval_once<T: Real>(
    scene: &Scene<T>,
    layout: &StateLayout,
    x: &[T],
    applied: &[Wrench<T>],
    cfd_mode: bool,
    out: &mut [T],
    diag: Option<&mut ContactDiag>,
) {
    let frames = body_frames(scene, layout, x, applied);
    let (contacts, forces) = contact_response(scene, layout, x, &frames, cfd_mode);
    if let Some(diag) = diag {
        diag.clear();
        diag.extend(contacts.iter().zip(&forces.normal).map(|(c, f)| (c.r.re(), f.re())));
    }

    for (b, f) in frames.iter().enumerate() {
        let (cf, ct) = forces.wrench[b];
        let acc = f.acc_free + cf.scale(f.inv_mass);
        let vo = layout.vel[b];
        out[layout.pos[b]..layout.pos[b] + 3].copy_from_slice(&f.vel.to_array());
        out[vo..vo + 3].copy_from_slice(&acc.to_array());
        if let (Some(qo), Some(wo), Some(q), Some(ii)) = (layout.quat[b], layout.angvel[b], f.quat, f.inv_inertia) {
            out[qo..qo + 4].copy_from_slice(&q.rate(f.omega).to_array());
            let alpha = f.alpha_free + ct.hadamard(ii);
            out[wo..wo + 3].copy_from_slice(&alpha.to_array());
        }
    }
}

/// Evaluates `ẋ = F(x)` into `out`.
///
/// In [`RhsMode::StraightThrough`] the value lane is computed by the vanilla
/// path alone, so it is bit-identical to [`RhsMode::Vanilla`]; the CFD path
/// only runs when `T` carries tangents.
pub fn rhs_flat<T: Real>(
    scene: &Scene<T>,
    layout: &StateLayout,
    x: &[T],
    applied: &[Wrench<T>],
    mode: RhsMode,
    out: &mut [T],
    diag: Option<&mut ContactDiag>,
) {
    match mode {
        RhsMode::Vanilla => eval_once(scene, layout, x, applied, false, out, diag),
        RhsMode::Cfd => eval_once(scene, layout, x, applied, true, out, diag),
        RhsMode::StraightThrough => {
            eval_once(scene, layout, x, applied, false, out, diag);
            if T::HAS_TANGENTS {
                let mut surrogate = vec![T::zero(); out.len()];
                eval_once(scene, layout, x, applied, true, &mut surrogate, None);
                for (o, s) in out.iter_mut().zip(surrogate) {
                    *o = o.with_tangents_of(s);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RhsOutput {
    pub state_derivative: Vec<f64>,
    pub contacts: ContactDiag,
}

pub fn rhs(scene: &Scene, x: &[f64], applied: &[Wrench<f64>], mode: RhsMode) -> RhsOutput {
    let layout = scene.layout();
    let mut out = vec![0.0; layout.dim()];
    let mut contacts = Vec::new();
    rhs_flat(scene, &layout, x, applied, mode, &mut out, Some(&mut contacts));
    RhsOutput {
        state_derivative: out,
        contacts,
    }
}

pub fn rhs_straight_through(scene: &Scene, x: &[f64], applied: &[Wrench<f64>]) -> RhsOutput {
    rhs(scene, x, applied, RhsMode::StraightThrough)
}

/// A scene with held wrenches, viewed as an ODE for the integrators.
pub struct SceneOde<'a, T> {
    pub scene: &'a Scene<T>,
    pub layout: &'a StateLayout,
    pub applied: Vec<Wrench<T>>,
    pub mode: RhsMode,
    quats: Vec<usize>,
}

impl<'a, T: Real> SceneOde<'a, T> {
    pub fn new(scene: &'a Scene<T>, layout: &'a StateLayout, applied: Vec<Wrench<T>>, mode: RhsMode) -> Self {
        SceneOde {
            scene,
            layout,
            applied,
            mode,
            quats: layout.quat_offsets(),
        }
    }
}

impl<T: Real> Dynamics<T> for SceneOde<'_, T> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn eval(&self, _t: f64, x: &[T], out: &mut [T]) {
        rhs_flat(self.scene, self.layout, x, &self.applied, self.mode, out, None);
    }
    fn quat_offsets(&self) -> &[usize] {
        &self.quats
    }
    fn n_positions(&self) -> Option<usize> {
        Some(self.layout.nq)
    }
    fn kinematics(&self, x: &[T], out: &mut [T]) {
        let l = self.layout;
        for b in 0..l.n_bodies() {
            let (po, vo) = (l.pos[b], l.vel[b]);
            out[po..po + 3].copy_from_slice(&x[vo..vo + 3]);
            if let (Some(qo), Some(wo)) = (l.quat[b], l.angvel[b]) {
                let q = Quat::from_slice(&x[qo..]);
                out[qo..qo + 4].copy_from_slice(&q.rate(Vec3::from_slice(&x[wo..])).to_array());
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyState<T = f64> {
    pub q: T,
    pub v: T,
}

/// Contact parameters of the 1D penalty toy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyParams {
    pub solref: Solref,
    pub solimp: Solimp,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            solref: Solref {
                time_const: 0.05,
                damping_ratio: 1.0,
            },
            solimp: Solimp {
                d0: 0.0,
                dwidth: 0.95,
                width: 0.01,
                midpoint: 0.5,
                power: 2.0,
            },
        }
    }
}

/// Wall force on the unit point mass; zero unless `q < 0`.
pub fn toy_force<T: Real>(q: T, v: T, p: &ToyParams) -> T {
    if q.re() >= 0.0 {
        return T::zero();
    }
    let solimp = Solimp {
        d0: T::cst(p.solimp.d0),
        dwidth: T::cst(p.solimp.dwidth),
        width: T::cst(p.solimp.width),
        midpoint: T::cst(p.solimp.midpoint),
        power: T::cst(p.solimp.power),
    };
    let solref = Solref {
        time_const: T::cst(p.solref.time_const),
        damping_ratio: T::cst(p.solref.damping_ratio),
    };
    let d = impedance(q, &solimp, None);
    let aref = reference_acceleration(q, v, &solref, solimp.dwidth, d, false, T::one());
    let reg = regularizer(d, T::one());
    (aref / (reg + 1.0)).relu()
}

/// Semi-implicit Euler step of the penalty toy.
pub fn toy_penalty_step<T: Real>(s: ToyState<T>, h: f64, p: &ToyParams) -> ToyState<T> {
    let v = s.v + toy_force(s.q, s.v, p) * h;
    ToyState { q: s.q + v * h, v }
}

/// Ideal elastic wall at `q = 0`, optionally with time-of-impact correction.
pub fn toy_elastic_step<T: Real>(s: ToyState<T>, h: f64, toi: bool) -> ToyState<T> {
    let q = s.q + s.v * h;
    if q.re() < 0.0 && s.v.re() < 0.0 {
        if toi {
            ToyState { q: -q, v: -s.v }
        } else {
            ToyState { q, v: -s.v }
        }
    } else {
        ToyState { q, v: s.v }
    }
}

/// Continuous penalty toy `[q, v]' = [v, f(q, v)]`.
pub struct ToyOde(pub ToyParams);

impl<T: Real> Dynamics<T> for ToyOde {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[T], out: &mut [T]) {
        out[0] = x[1];
        out[1] = toy_force(x[0], x[1], &self.0);
    }
    fn quat_offsets(&self) -> &[usize] {
        &[]
    }
    fn n_positions(&self) -> Option<usize> {
        Some(1)
    }
    fn kinematics(&self, x: &[T], out: &mut [T]) {
        out[0] = x[1];
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::collision::tests::ball_scene;
    use crate::model::*;
    use crate::real::{Dual, D8};
    use proptest::prelude::*;

    pub(crate) fn point_mass_scene(z: f64) -> Scene {
        let mut s = ball_scene(z, 0.1);
        s.bodies[0].kind = BodyKind::PointMass;
        s
    }

    #[test]
    fn free_fall_point_mass() {
        let s = point_mass_scene(1.0);
        let mut x = s.initial_state().to_flat(&s.layout());
        x[3] = 0.5;
        let out = rhs(&s, &x, &[], RhsMode::Vanilla);
        assert_eq!(out.state_derivative, vec![0.5, 0.0, 0.0, 0.0, 0.0, -9.81]);
        assert!(out.contacts.is_empty());
    }

    #[test]
    fn resting_point_mass_on_plane() {
        // Penetration 0.01 at width 0.02 sits on the spline midpoint, so d = 0.5.
        let mut s = point_mass_scene(0.1 - 0.01);
        s.contact_defaults.solref = Solref {
            time_const: 0.02,
            damping_ratio: 1.0,
        };
        s.contact_defaults.solimp = Solimp {
            d0: 0.05,
            dwidth: 0.95,
            width: 0.02,
            midpoint: 0.5,
            power: 2.0,
        };
        let x = s.initial_state().to_flat(&s.layout());
        let out = rhs(&s, &x, &[], RhsMode::Vanilla);
        let aref = 0.5 * 0.01 / (0.95f64.powi(2) * 0.0004);
        let f = (aref + 9.81) / (1.0 + 1.0);
        assert!((out.state_derivative[5] - (-9.81 + f)).abs() < 1e-9);
        assert!((out.contacts[0].1 - f).abs() < 1e-9);
    }

    #[test]
    fn symmetric_body_keeps_spin() {
        let mut s = ball_scene(5.0, 0.1);
        s.bodies[0].init.angvel = [1.0, -2.0, 0.5];
        let x = s.initial_state().to_flat(&s.layout());
        let out = rhs(&s, &x, &[], RhsMode::Vanilla);
        assert_eq!(&out.state_derivative[10..13], &[0.0, 0.0, 0.0]);
        let q = &x[3..7];
        let qd = &out.state_derivative[3..7];
        let dot: f64 = q.iter().zip(qd).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn straight_through_value_is_vanilla() {
        let mut s = ball_scene(0.15, 0.1);
        s.cfd.enabled = true;
        s.cfd.width = 0.2;
        s.cfd.softplus_beta = 40.0;
        let x = s.initial_state().to_flat(&s.layout());
        let van = rhs(&s, &x, &[], RhsMode::Vanilla).state_derivative;
        let st = rhs_straight_through(&s, &x, &[]).state_derivative;
        assert_eq!(van, st);
        let cfd = rhs(&s, &x, &[], RhsMode::Cfd).state_derivative;
        assert!(cfd[9] > van[9], "CFD pushes the hovering ball up");

        // Tangents of the straight-through path are those of the CFD path.
        let sd = s.lift::<D8>();
        let layout = s.layout();
        let xd: Vec<D8> = x.iter().enumerate().map(|(i, &v)| if i == 2 { Dual::seeded(v, 0) } else { Dual::cst(v) }).collect();
        let mut a = vec![D8::cst(0.0); 13];
        let mut b = vec![D8::cst(0.0); 13];
        rhs_flat(&sd, &layout, &xd, &[], RhsMode::StraightThrough, &mut a, None);
        rhs_flat(&sd, &layout, &xd, &[], RhsMode::Cfd, &mut b, None);
        assert!(a[9].eps[0] < 0.0);
        assert_eq!(a[9].eps, b[9].eps);
        assert_eq!(a[9].re, van[9]);
    }

    #[test]
    fn toy_free_flight_and_repulsion() {
        let p = ToyParams::default();
        let s = toy_penalty_step(ToyState { q: 1.0, v: -1.0 }, 0.01, &p);
        assert_eq!(s, ToyState { q: 1.0 - 0.01, v: -1.0 });
        let s = toy_penalty_step(ToyState { q: -0.001, v: 0.0 }, 0.01, &p);
        assert!(s.v > 0.0);
    }

    #[test]
    fn toy_elastic_examples() {
        let s = toy_elastic_step(ToyState { q: 0.5, v: -1.0 }, 0.25, false);
        assert_eq!(s, ToyState { q: 0.25, v: -1.0 });
        let s = toy_elastic_step(ToyState { q: 0.1, v: -1.0 }, 0.25, true);
        assert!((s.q - 0.15).abs() < 1e-15 && s.v == 1.0);
    }

    proptest! {
        #[test]
        fn rhs_translation_equivariant(dx in -3.0f64..3.0, dy in -3.0f64..3.0, z in 0.02f64..0.2, ang in 0.0f64..3.0) {
            let mut s = crate::model::tests::cube_scene();
            s.bodies[0].init.pos = [0.1, -0.2, z];
            s.bodies[0].init.quat = Quat::from_axis_angle([0.3, 1.0, -0.2], ang).to_array();
            s.bodies[0].init.vel = [0.4, 0.1, -0.3];
            s.bodies[0].init.angvel = [1.0, 0.0, -2.0];
            let x = s.initial_state().to_flat(&s.layout());
            let mut y = x.clone();
            y[0] += dx;
            y[1] += dy;
            let a = rhs(&s, &x, &[], RhsMode::Vanilla).state_derivative;
            let b = rhs(&s, &y, &[], RhsMode::Vanilla).state_derivative;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
            }
        }

        #[test]
        fn quaternion_rate_orthogonal(ang in 0.0f64..6.0, w in prop::array::uniform3(-5.0f64..5.0), z in -0.02f64..0.2) {
            let mut s = crate::model::tests::cube_scene();
            s.bodies[0].init.pos = [0.0, 0.0, z];
            s.bodies[0].init.quat = Quat::from_axis_angle([1.0, -0.4, 0.7], ang).to_array();
            s.bodies[0].init.angvel = w;
            let x = s.initial_state().to_flat(&s.layout());
            let d = rhs(&s, &x, &[], RhsMode::Vanilla).state_derivative;
            let dot: f64 = (3..7).map(|i| x[i] * d[i]).sum();
            prop_assert!(dot.abs() < 1e-10);
        }
    }
}
