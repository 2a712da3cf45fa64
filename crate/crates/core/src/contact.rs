//! Soft contact forces: impedance, reference acceleration, regularized normal
//! force solve and smooth friction.

use alloc::vec;
use alloc::vec::Vec;

use crate::collision::ContactPoint;
use crate::math::{Quat, Vec3};
use crate::model::{CfdParams, Solimp, Solref};
use crate::real::{softplus, Real};

/// Impedance clamp keeping the regularizer finite.
pub const D_MIN: f64 = 1e-4;
pub const D_MAX: f64 = 1.0 - 1e-4;

/// Projected Gauss–Seidel sweeps.
pub const PGS_SWEEPS: usize = 20;

fn spline<T: Real>(x: T, mid: T, power: T) -> T {
    if x.re() <= mid.re() {
        x.pow(power) / mid.pow(power - 1.0)
    } else {
        T::one() - (T::one() - x).pow(power) / (T::one() - mid).pow(power - 1.0)
    }
}

fn clamp_d<T: Real>(d: T) -> T {
    d.max(T::cst(D_MIN)).min(T::cst(D_MAX))
}

/// Impedance `d(r)`. Positive distances use the extension in `cfd` when given.
pub fn impedance<T: Real>(r: T, solimp: &Solimp<T>, cfd: Option<&CfdParams<T>>) -> T {
    match cfd {
        Some(c) if r.re() > 0.0 => {
            let x = (r / c.width).min(T::one());
            let y = spline(x, c.midpoint, c.power);
            clamp_d(c.d_0 + y * (c.d_c - c.d_0))
        }
        _ => {
            let x = (-r / solimp.width).min(T::one()).max(T::zero());
            let y = spline(x, solimp.midpoint, solimp.power);
            clamp_d(solimp.d0 + y * (solimp.dwidth - solimp.d0))
        }
    }
}

/// Spring-damper reference acceleration. With `softened` the distance enters
/// through a smooth minimum with zero of sharpness `beta`.
pub fn reference_acceleration<T: Real>(
    r: T,
    v_n: T,
    solref: &Solref<T>,
    dwidth: T,
    d: T,
    softened: bool,
    beta: T,
) -> T {
    let tc = solref.time_const;
    let phi = solref.damping_ratio;
    let r_eff = if softened { -softplus(-beta * r) / beta } else { r };
    let damping = T::cst(2.0) / (dwidth * tc);
    let stiffness = d / (dwidth * dwidth * tc * tc * phi * phi);
    -damping * v_n - stiffness * r_eff
}

pub fn regularizer<T: Real>(d: T, a_ii: T) -> T {
    (T::one() - d) / d * a_ii
}

/// Per-body quantities the contact solve needs.
#[derive(Clone, Copy, Debug)]
pub struct BodyFrame<T> {
    pub inv_mass: T,
    /// Inverse principal inertia, `None` for point masses.
    pub inv_inertia: Option<Vec3<T>>,
    pub com: Vec3<T>,
    pub quat: Option<Quat<T>>,
    pub vel: Vec3<T>,
    /// Body-frame angular velocity.
    pub omega: Vec3<T>,
    /// Unconstrained linear acceleration (world frame).
    pub acc_free: Vec3<T>,
    /// Unconstrained angular acceleration (body frame).
    pub alpha_free: Vec3<T>,
}

impl<T: Real> BodyFrame<T> {
    /// Jacobian block mapping this body's twist to speed along `dir` at `point`.
    fn jac_block(&self, point: Vec3<T>, dir: Vec3<T>) -> (Vec3<T>, Vec3<T>) {
        match self.quat {
            Some(q) => (dir, q.inv_rotate((point - self.com).cross(dir))),
            None => (dir, Vec3::zero()),
        }
    }

    fn point_velocity(&self, point: Vec3<T>) -> Vec3<T> {
        match self.quat {
            Some(q) => self.vel + q.rotate(self.omega).cross(point - self.com),
            None => self.vel,
        }
    }

    /// `J M⁻¹ Jᵀ` contribution of two blocks of this body.
    fn metric(&self, a: &(Vec3<T>, Vec3<T>), b: &(Vec3<T>, Vec3<T>)) -> T {
        let lin = a.0.dot(b.0) * self.inv_mass;
        match self.inv_inertia {
            Some(ii) => lin + a.1.hadamard(ii).dot(b.1),
            None => lin,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConstraintRow<T> {
    /// `(body, ±1, linear block, angular block)` for each dynamic body of the pair.
    pub blocks: Vec<(usize, f64, Vec3<T>, Vec3<T>)>,
    pub r: T,
    pub v_n: T,
    pub a0: T,
    pub aref: T,
    pub a_ii: T,
    pub reg: T,
    pub d: T,
}

/// Builds one normal row per contact.
pub fn build_rows<T: Real>(
    bodies: &[BodyFrame<T>],
    contacts: &[ContactPoint<T>],
    cfd: &CfdParams<T>,
    cfd_mode: bool,
) -> Vec<ConstraintRow<T>> {
    contacts
        .iter()
        .map(|c| {
            let mut blocks = Vec::with_capacity(2);
            for (body, sign) in [(c.body_a, 1.0), (c.body_b, -1.0)] {
                if let Some(b) = body {
                    let (lin, ang) = bodies[b].jac_block(c.pos, c.normal);
                    blocks.push((b, sign, lin, ang));
                }
            }
            let (mut v_n, mut a0, mut a_ii) = (T::zero(), T::zero(), T::zero());
            for (b, sign, lin, ang) in &blocks {
                let f = &bodies[*b];
                v_n += (lin.dot(f.vel) + ang.dot(f.omega)) * *sign;
                a0 += (lin.dot(f.acc_free) + ang.dot(f.alpha_free)) * *sign;
                a_ii += f.metric(&(*lin, *ang), &(*lin, *ang));
            }
            let p = &c.params;
            let d = impedance(c.r, &p.solimp, cfd_mode.then_some(cfd));
            let aref = reference_acceleration(c.r, v_n, &p.solref, p.solimp.dwidth, d, cfd_mode, cfd.softplus_beta);
            ConstraintRow {
                blocks,
                r: c.r,
                v_n,
                a0,
                aref,
                a_ii,
                reg: regularizer(d, a_ii),
                d,
            }
        })
        .collect()
}

/// Off-diagonal coupling `J_i M⁻¹ J_jᵀ` between two rows.
pub fn coupling<T: Real>(bodies: &[BodyFrame<T>], a: &ConstraintRow<T>, b: &ConstraintRow<T>) -> T {
    let mut s = T::zero();
    for (ba, sa, la, aa) in &a.blocks {
        for (bb, sb, lb, ab) in &b.blocks {
            if ba == bb {
                s += bodies[*ba].metric(&(*la, *aa), &(*lb, *ab)) * (sa * sb);
            }
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct ContactForceResult<T> {
    pub normal: Vec<T>,
    /// Friction force components along the contact tangents.
    pub friction: Vec<[T; 2]>,
    /// Per-body world-frame force and body-frame torque.
    pub wrench: Vec<(Vec3<T>, Vec3<T>)>,
    pub kkt_residual: f64,
}

/// Solves `min_{f >= 0} ½ fᵀ(A + diag R)f − fᵀ(aref − a0)` by projected Gauss–Seidel.
pub fn solve_normal<T: Real>(a: &[Vec<T>], reg: &[T], b: &[T]) -> (Vec<T>, f64) {
    let n = b.len();
    let mut f = vec![T::zero(); n];
    for _ in 0..PGS_SWEEPS {
        for i in 0..n {
            let mut g = reg[i] * f[i] - b[i];
            for (aij, fj) in a[i].iter().zip(&f) {
                g += *aij * *fj;
            }
            f[i] = (f[i] - g / (a[i][i] + reg[i])).relu();
        }
    }
    let mut kkt = 0.0f64;
    for i in 0..n {
        let mut g = reg[i].re() * f[i].re() - b[i].re();
        for j in 0..n {
            g += a[i][j].re() * f[j].re();
        }
        kkt = kkt.max(f[i].re().min(g).abs());
    }
    (f, kkt)
}

/// Regularized Coulomb friction `−μ f_n tanh(|v_t|/eps) v̂_t` in world coordinates.
pub fn friction_force<T: Real>(v_rel: Vec3<T>, normal: Vec3<T>, f_n: T, mu: T, eps: T) -> Vec3<T> {
    let v_t = v_rel - normal.scale(v_rel.dot(normal));
    let s = eps.re() * 1e-6;
    let hyp = (v_t.norm_sq() + s * s).sqrt();
    let speed = hyp - s;
    v_t.scale(-(mu * f_n * (speed / eps).tanh()) / hyp)
}

/// Full contact pipeline: rows, normal solve, friction, and per-body wrenches.
pub fn contact_forces<T: Real>(
    bodies: &[BodyFrame<T>],
    contacts: &[ContactPoint<T>],
    cfd: &CfdParams<T>,
    cfd_mode: bool,
) -> ContactForceResult<T> {
    let mut wrench = vec![(Vec3::zero(), Vec3::zero()); bodies.len()];
    if contacts.is_empty() {
        return ContactForceResult {
            normal: Vec::new(),
            friction: Vec::new(),
            wrench,
            kkt_residual: 0.0,
        };
    }
    let rows = build_rows(bodies, contacts, cfd, cfd_mode);
    let n = rows.len();
    let mut a = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        a[i][i] = rows[i].a_ii;
        for j in (i + 1)..n {
            let c = coupling(bodies, &rows[i], &rows[j]);
            a[i][j] = c;
            a[j][i] = c;
        }
    }
    let reg: Vec<T> = rows.iter().map(|r| r.reg).collect();
    let b: Vec<T> = rows.iter().map(|r| r.aref - r.a0).collect();
    let (f, kkt) = solve_normal(&a, &reg, &b);

    let mut friction = Vec::with_capacity(n);
    for (k, (row, c)) in rows.iter().zip(contacts).enumerate() {
        for (body, sign, lin, ang) in &row.blocks {
            wrench[*body].0 += lin.scale(f[k] * *sign);
            wrench[*body].1 += ang.scale(f[k] * *sign);
        }
        let va = c.body_a.map(|b| bodies[b].point_velocity(c.pos)).unwrap_or(Vec3::zero());
        let vb = c.body_b.map(|b| bodies[b].point_velocity(c.pos)).unwrap_or(Vec3::zero());
        let ft = if c.params.mu.re() > 0.0 && f[k].re() > 0.0 {
            friction_force(va - vb, c.normal, f[k], c.params.mu, c.params.friction_eps)
        } else {
            Vec3::zero()
        };
        friction.push([ft.dot(c.tangents[0]), ft.dot(c.tangents[1])]);
        for (body, sign) in [(c.body_a, 1.0), (c.body_b, -1.0)] {
            if let Some(b) = body {
                let force = ft.scale_f(sign);
                let (lin, ang) = bodies[b].jac_block(c.pos, force);
                // jac_block(point, F) returns (F, Rᵀ(lever × F)): the body-frame torque.
                wrench[b].0 += lin;
                wrench[b].1 += ang;
            }
        }
    }
    ContactForceResult {
        normal: f,
        friction,
        wrench,
        kkt_residual: kkt,
    }
}
