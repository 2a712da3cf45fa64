//! Scene description, state layout and the differentiable parameter vector.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::ModelError;
use crate::real::{sigmoid, softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solref<T = f64> {
    pub time_const: T,
    pub damping_ratio: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solimp<T = f64> {
    pub d0: T,
    pub dwidth: T,
    pub width: T,
    pub midpoint: T,
    pub power: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactParams<T = f64> {
    pub solref: Solref<T>,
    pub solimp: Solimp<T>,
    pub mu: T,
    pub friction_eps: T,
}

impl Default for ContactParams<f64> {
    fn default() -> Self {
        ContactParams {
            solref: Solref {
                time_const: 0.02,
                damping_ratio: 1.0,
            },
            solimp: Solimp {
                d0: 0.9,
                dwidth: 0.95,
                width: 0.001,
                midpoint: 0.5,
                power: 2.0,
            },
            mu: 1.0,
            friction_eps: 0.01,
        }
    }
}

impl ContactParams<f64> {
    pub fn lift<U: Real>(&self) -> ContactParams<U> {
        ContactParams {
            solref: Solref {
                time_const: U::cst(self.solref.time_const),
                damping_ratio: U::cst(self.solref.damping_ratio),
            },
            solimp: Solimp {
                d0: U::cst(self.solimp.d0),
                dwidth: U::cst(self.solimp.dwidth),
                width: U::cst(self.solimp.width),
                midpoint: U::cst(self.solimp.midpoint),
                power: U::cst(self.solimp.power),
            },
            mu: U::cst(self.mu),
            friction_eps: U::cst(self.friction_eps),
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), ModelError> {
        let s = &self.solimp;
        let bad = |what: &str, reason: &str| Err(ModelError::invalid(format!("{field}.{what}"), reason));
        if !(self.solref.time_const > 0.0) {
            return bad("solref[0]", "time constant must be positive");
        }
        if !(self.solref.damping_ratio > 0.0) {
            return bad("solref[1]", "damping ratio must be positive");
        }
        if !(0.0..=1.0).contains(&s.d0) || !(0.0..=1.0).contains(&s.dwidth) {
            return bad("solimp", "impedances must lie in [0, 1]");
        }
        if s.d0 > s.dwidth {
            return bad("solimp", "d0 must not exceed dwidth");
        }
        if !(s.width > 0.0) {
            return bad("solimp[2]", "width must be positive");
        }
        if !(s.midpoint > 0.0 && s.midpoint < 1.0) {
            return bad("solimp[3]", "midpoint must lie in (0, 1)");
        }
        if !(s.power >= 1.0) {
            return bad("solimp[4]", "power must be at least 1");
        }
        if !(self.mu >= 0.0) {
            return bad("mu", "friction coefficient must be non-negative");
        }
        if !(self.friction_eps > 0.0) {
            return bad("friction_eps", "friction smoothing velocity must be positive");
        }
        Ok(())
    }
}

/// Impedance extension for positive distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfdParams<T = f64> {
    pub enabled: bool,
    /// Impedance at the end of the range.
    pub d_c: T,
    /// Impedance at zero distance.
    pub d_0: T,
    pub width: T,
    pub midpoint: T,
    pub power: T,
    pub softplus_beta: T,
}

impl Default for CfdParams<f64> {
    fn default() -> Self {
        CfdParams {
            enabled: false,
            d_c: 0.0,
            d_0: 0.1,
            width: 1.0,
            midpoint: 1.0,
            power: 4.0,
            softplus_beta: 8.0,
        }
    }
}

impl CfdParams<f64> {
    pub fn lift<U: Real>(&self) -> CfdParams<U> {
        CfdParams {
            enabled: self.enabled,
            d_c: U::cst(self.d_c),
            d_0: U::cst(self.d_0),
            width: U::cst(self.width),
            midpoint: U::cst(self.midpoint),
            power: U::cst(self.power),
            softplus_beta: U::cst(self.softplus_beta),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0 <= self.d_c && self.d_c <= self.d_0 && self.d_0 < 1.0) {
            return Err(ModelError::invalid("cfd.solimp_cfd", "requires 0 <= d_c <= d_0 < 1"));
        }
        if !(self.width > 0.0) {
            return Err(ModelError::invalid("cfd.solimp_cfd[2]", "width must be positive"));
        }
        if !(self.midpoint > 0.0 && self.midpoint <= 1.0) {
            return Err(ModelError::invalid("cfd.solimp_cfd[3]", "midpoint must lie in (0, 1]"));
        }
        if !(self.power >= 1.0) {
            return Err(ModelError::invalid("cfd.solimp_cfd[4]", "power must be at least 1"));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(ModelError::invalid("cfd.softplus_beta", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyKind {
    /// Translation only.
    PointMass,
    /// Six degrees of freedom.
    Free,
}

/// Initial pose and twist of a body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyInit {
    pub pos: [f64; 3],
    pub quat: [f64; 4],
    pub vel: [f64; 3],
    /// Body-frame angular velocity.
    pub angvel: [f64; 3],
}

impl Default for BodyInit {
    fn default() -> Self {
        BodyInit {
            pos: [0.0; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            vel: [0.0; 3],
            angvel: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body<T = f64> {
    pub name: Option<Arc<str>>,
    pub mass: T,
    /// Principal inertia; derived from the attached shape when `None`.
    pub inertia: Option<[T; 3]>,
    pub kind: BodyKind,
    pub init: BodyInit,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape<T = f64> {
    /// Half-space `normal · p >= offset`.
    Plane { normal: [f64; 3], offset: T },
    Sphere { radius: T },
    /// Body-frame points, multiplied by `scale`.
    Corners { points: Arc<[[f64; 3]]>, scale: T },
}

impl Shape<f64> {
    /// Unit cube corners scaled to side length `side`.
    pub fn cube(side: f64) -> Self {
        let mut pts = Vec::with_capacity(8);
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    pts.push([x, y, z]);
                }
            }
        }
        Shape::Corners {
            points: pts.into(),
            scale: side,
        }
    }

    pub fn lift<U: Real>(&self) -> Shape<U> {
        match self {
            Shape::Plane { normal, offset } => Shape::Plane {
                normal: *normal,
                offset: U::cst(*offset),
            },
            Shape::Sphere { radius } => Shape::Sphere {
                radius: U::cst(*radius),
            },
            Shape::Corners { points, scale } => Shape::Corners {
                points: points.clone(),
                scale: U::cst(*scale),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geom<T = f64> {
    pub name: Option<Arc<str>>,
    pub shape: Shape<T>,
    /// `None` is the static world.
    pub body: Option<usize>,
    pub contact: Option<ContactParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T = f64> {
    pub bodies: Vec<Body<T>>,
    pub geoms: Vec<Geom<T>>,
    pub gravity: [f64; 3],
    pub contact_defaults: ContactParams<T>,
    pub cfd: CfdParams<T>,
    pub outer_dt: f64,
}

impl Scene<f64> {
    pub fn lift<U: Real>(&self) -> Scene<U> {
        Scene {
            bodies: self
                .bodies
                .iter()
                .map(|b| Body {
                    name: b.name.clone(),
                    mass: U::cst(b.mass),
                    inertia: b.inertia.map(|i| [U::cst(i[0]), U::cst(i[1]), U::cst(i[2])]),
                    kind: b.kind,
                    init: b.init,
                })
                .collect(),
            geoms: self
                .geoms
                .iter()
                .map(|g| Geom {
                    name: g.name.clone(),
                    shape: g.shape.lift(),
                    body: g.body,
                    contact: g.contact.map(|c| c.lift()),
                })
                .collect(),
            gravity: self.gravity,
            contact_defaults: self.contact_defaults.lift(),
            cfd: self.cfd.lift(),
            outer_dt: self.outer_dt,
        }
    }

    /// Checks every scene invariant, naming the offending field on failure.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.outer_dt > 0.0) || !self.outer_dt.is_finite() {
            return Err(ModelError::invalid("outer_dt", "must be positive and finite"));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::invalid("gravity", "must be finite"));
        }
        self.contact_defaults.validate("contact_defaults")?;
        self.cfd.validate()?;
        for (i, b) in self.bodies.iter().enumerate() {
            if !(b.mass > 0.0) || !b.mass.is_finite() {
                return Err(ModelError::invalid(format!("bodies[{i}].mass"), "must be positive"));
            }
            if let Some(inertia) = b.inertia {
                if inertia.iter().any(|v| !(*v > 0.0)) {
                    return Err(ModelError::invalid(
                        format!("bodies[{i}].inertia"),
                        "all entries must be positive",
                    ));
                }
            }
            let q = b.init.quat;
            let n = q.iter().map(|v| v * v).sum::<f64>();
            if (n - 1.0).abs() > 1e-9 {
                return Err(ModelError::invalid(format!("bodies[{i}].quat"), "must have unit norm"));
            }
        }
        for (i, g) in self.geoms.iter().enumerate() {
            if let Some(b) = g.body {
                if b >= self.bodies.len() {
                    return Err(ModelError::invalid(
                        format!("geoms[{i}].body"),
                        format!("references missing body {b}"),
                    ));
                }
            }
            match &g.shape {
                Shape::Plane { normal, offset } => {
                    let n = libm::sqrt(normal.iter().map(|v| v * v).sum::<f64>());
                    if (n - 1.0).abs() > 1e-9 {
                        return Err(ModelError::invalid(
                            format!("geoms[{i}].shape.normal"),
                            "plane normal must be a unit vector",
                        ));
                    }
                    if !offset.is_finite() {
                        return Err(ModelError::invalid(format!("geoms[{i}].shape.offset"), "must be finite"));
                    }
                    if g.body.is_some() {
                        return Err(ModelError::invalid(format!("geoms[{i}].body"), "planes must be static"));
                    }
                }
                Shape::Sphere { radius } => {
                    if !(*radius > 0.0) {
                        return Err(ModelError::invalid(
                            format!("geoms[{i}].shape.radius"),
                            "sphere radius must be positive",
                        ));
                    }
                }
                Shape::Corners { points, scale } => {
                    if points.is_empty() {
                        return Err(ModelError::invalid(
                            format!("geoms[{i}].shape.points"),
                            "corner set must be non-empty",
                        ));
                    }
                    if !(*scale > 0.0) {
                        return Err(ModelError::invalid(format!("geoms[{i}].shape.scale"), "must be positive"));
                    }
                }
            }
            if let Some(c) = &g.contact {
                c.validate(&format!("geoms[{i}].contact"))?;
            }
        }
        for (i, b) in self.bodies.iter().enumerate() {
            if b.kind == BodyKind::Free && b.inertia.is_none() && self.primary_geom(i).is_none() {
                return Err(ModelError::invalid(
                    format!("bodies[{i}].inertia"),
                    "free body without a shape needs an explicit inertia",
                ));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> SystemState {
        SystemState {
            time: 0.0,
            positions: self.bodies.iter().map(|b| b.init.pos).collect(),
            orientations: self
                .bodies
                .iter()
                .map(|b| (b.kind == BodyKind::Free).then_some(b.init.quat))
                .collect(),
            lin_vel: self.bodies.iter().map(|b| b.init.vel).collect(),
            ang_vel: self
                .bodies
                .iter()
                .map(|b| (b.kind == BodyKind::Free).then_some(b.init.angvel))
                .collect(),
        }
    }
}

impl<T: Real> Scene<T> {
    /// First non-plane geom attached to body `b`.
    pub fn primary_geom(&self, b: usize) -> Option<usize> {
        self.geoms
            .iter()
            .position(|g| g.body == Some(b) && !matches!(g.shape, Shape::Plane { .. }))
    }

    /// Body-frame principal inertia, derived from shape and mass at uniform density when omitted.
    pub fn inertia(&self, b: usize) -> [T; 3] {
        let body = &self.bodies[b];
        if let Some(i) = body.inertia {
            return i;
        }
        let m = body.mass;
        match self.primary_geom(b).map(|g| &self.geoms[g].shape) {
            Some(Shape::Sphere { radius }) => {
                let i = m * *radius * *radius * 0.4;
                [i, i, i]
            }
            Some(Shape::Corners { points, scale }) => {
                let mut ext = [0.0f64; 3];
                for k in 0..3 {
                    let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                    let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                    ext[k] = hi - lo;
                }
                let s2 = *scale * *scale * (1.0 / 12.0);
                [
                    m * s2 * (ext[1] * ext[1] + ext[2] * ext[2]),
                    m * s2 * (ext[0] * ext[0] + ext[2] * ext[2]),
                    m * s2 * (ext[0] * ext[0] + ext[1] * ext[1]),
                ]
            }
            _ => [m, m, m],
        }
    }

    /// Contact parameters for a geom pair: A's override, else B's, else the scene defaults.
    pub fn pair_params(&self, a: usize, b: usize) -> ContactParams<T> {
        self.geoms[a]
            .contact
            .or(self.geoms[b].contact)
            .unwrap_or(self.contact_defaults)
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.bodies.iter().map(|b| b.kind))
    }
}

/// Offsets of each body's blocks in the flat state `[q..., v...]`.
///
/// The position block lists, per body, its position followed by its
/// quaternion when free. The velocity block lists linear velocity followed by
/// the body-frame angular velocity when free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub nq: usize,
    pub nv: usize,
    pub pos: Vec<usize>,
    pub quat: Vec<Option<usize>>,
    pub vel: Vec<usize>,
    pub angvel: Vec<Option<usize>>,
}

impl StateLayout {
    pub fn new(kinds: impl Iterator<Item = BodyKind> + Clone) -> Self {
        let (mut pos, mut quat, mut vel, mut angvel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut off = 0;
        for k in kinds.clone() {
            pos.push(off);
            off += 3;
            if k == BodyKind::Free {
                quat.push(Some(off));
                off += 4;
            } else {
                quat.push(None);
            }
        }
        let nq = off;
        for k in kinds {
            vel.push(off);
            off += 3;
            if k == BodyKind::Free {
                angvel.push(Some(off));
                off += 3;
            } else {
                angvel.push(None);
            }
        }
        StateLayout {
            nq,
            nv: off - nq,
            pos,
            quat,
            vel,
            angvel,
        }
    }

    pub fn dim(&self) -> usize {
        self.nq + self.nv
    }

    pub fn n_bodies(&self) -> usize {
        self.pos.len()
    }

    pub fn quat_offsets(&self) -> Vec<usize> {
        self.quat.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub time: f64,
    pub positions: Vec<[f64; 3]>,
    /// `None` for point masses.
    pub orientations: Vec<Option<[f64; 4]>>,
    pub lin_vel: Vec<[f64; 3]>,
    /// Body-frame angular velocity, `None` for point masses.
    pub ang_vel: Vec<Option<[f64; 3]>>,
}

impl SystemState {
    pub fn to_flat(&self, layout: &StateLayout) -> Vec<f64> {
        let mut x = alloc::vec![0.0; layout.dim()];
        for b in 0..layout.n_bodies() {
            x[layout.pos[b]..layout.pos[b] + 3].copy_from_slice(&self.positions[b]);
            x[layout.vel[b]..layout.vel[b] + 3].copy_from_slice(&self.lin_vel[b]);
            if let (Some(o), Some(q)) = (layout.quat[b], self.orientations[b]) {
                x[o..o + 4].copy_from_slice(&q);
            }
            if let (Some(o), Some(w)) = (layout.angvel[b], self.ang_vel[b]) {
                x[o..o + 3].copy_from_slice(&w);
            }
        }
        x
    }

    pub fn from_flat(layout: &StateLayout, x: &[f64], time: f64) -> Self {
        let n = layout.n_bodies();
        let arr3 = |o: usize| [x[o], x[o + 1], x[o + 2]];
        SystemState {
            time,
            positions: (0..n).map(|b| arr3(layout.pos[b])).collect(),
            orientations: (0..n)
                .map(|b| layout.quat[b].map(|o| [x[o], x[o + 1], x[o + 2], x[o + 3]]))
                .collect(),
            lin_vel: (0..n).map(|b| arr3(layout.vel[b])).collect(),
            ang_vel: (0..n).map(|b| layout.angvel[b].map(arr3)).collect(),
        }
    }

    /// Largest deviation of a quaternion norm from one.
    pub fn quat_norm_error(&self) -> f64 {
        self.orientations
            .iter()
            .flatten()
            .map(|q| (libm::sqrt(q.iter().map(|v| v * v).sum::<f64>()) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// `ln(1 + e^{k u}) / k`.
    Softplus { sharpness: f64 },
    /// `lo + (hi - lo) · sigmoid(k u)`.
    Softclip { lo: f64, hi: f64, sharpness: f64 },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Softplus { .. } => "softplus",
            Transform::Softclip { .. } => "softclip",
        }
    }

    /// Maps an unconstrained value to the scene value.
    pub fn forward<T: Real>(&self, u: T) -> T {
        match *self {
            Transform::Identity => u,
            Transform::Softplus { sharpness } => softplus(u * sharpness) / sharpness,
            Transform::Softclip { lo, hi, sharpness } => sigmoid(u * sharpness) * (hi - lo) + lo,
        }
    }

    /// Maps a scene value back to the unconstrained value.
    pub fn inverse(&self, v: f64) -> Option<f64> {
        match *self {
            Transform::Identity => Some(v),
            Transform::Softplus { sharpness: k } => {
                if !(v > 0.0) {
                    return None;
                }
                // ln(e^{kv} - 1) / k, rearranged to stay finite for large kv.
                Some(v + libm::log(-libm::expm1(-k * v)) / k)
            }
            Transform::Softclip { lo, hi, sharpness: k } => {
                let p = (v - lo) / (hi - lo);
                if !(p > 0.0 && p < 1.0) {
                    return None;
                }
                Some(libm::log(p / (1.0 - p)) / k)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContactField {
    TimeConst,
    DampingRatio,
    D0,
    Dwidth,
    Width,
    Midpoint,
    Power,
    Mu,
    FrictionEps,
}

impl ContactField {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "solref[0]" | "time_const" => ContactField::TimeConst,
            "solref[1]" | "damping_ratio" => ContactField::DampingRatio,
            "solimp[0]" | "d0" => ContactField::D0,
            "solimp[1]" | "dwidth" => ContactField::Dwidth,
            "solimp[2]" | "width" => ContactField::Width,
            "solimp[3]" | "midpoint" => ContactField::Midpoint,
            "solimp[4]" | "power" => ContactField::Power,
            "mu" | "friction" => ContactField::Mu,
            "friction_eps" => ContactField::FrictionEps,
            _ => return None,
        })
    }

    fn get_mut<T>(self, c: &mut ContactParams<T>) -> &mut T {
        match self {
            ContactField::TimeConst => &mut c.solref.time_const,
            ContactField::DampingRatio => &mut c.solref.damping_ratio,
            ContactField::D0 => &mut c.solimp.d0,
            ContactField::Dwidth => &mut c.solimp.dwidth,
            ContactField::Width => &mut c.solimp.width,
            ContactField::Midpoint => &mut c.solimp.midpoint,
            ContactField::Power => &mut c.solimp.power,
            ContactField::Mu => &mut c.mu,
            ContactField::FrictionEps => &mut c.friction_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfdField {
    Dc,
    D0,
    Width,
    Midpoint,
    Power,
    SoftplusBeta,
}

impl CfdField {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "solimp_cfd[0]" | "d_c" => CfdField::Dc,
            "solimp_cfd[1]" | "d_0" => CfdField::D0,
            "solimp_cfd[2]" | "width" => CfdField::Width,
            "solimp_cfd[3]" | "midpoint" => CfdField::Midpoint,
            "solimp_cfd[4]" | "power" => CfdField::Power,
            "softplus_beta" => CfdField::SoftplusBeta,
            _ => return None,
        })
    }

    fn get_mut<T>(self, c: &mut CfdParams<T>) -> &mut T {
        match self {
            CfdField::Dc => &mut c.d_c,
            CfdField::D0 => &mut c.d_0,
            CfdField::Width => &mut c.width,
            CfdField::Midpoint => &mut c.midpoint,
            CfdField::Power => &mut c.power,
            CfdField::SoftplusBeta => &mut c.softplus_beta,
        }
    }
}

/// A resolved scalar location inside a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePath {
    Mass(usize),
    Radius(usize),
    Scale(usize),
    PlaneOffset(usize),
    GeomContact(usize, ContactField),
    Defaults(ContactField),
    Cfd(CfdField),
}

impl ScenePath {
    /// Resolves paths such as `cube.side_length`, `geoms[1].contact.mu`,
    /// `contact_defaults.solref[0]` or `cfd.softplus_beta`.
    pub fn parse<T: Real>(scene: &Scene<T>, path: &str) -> Result<Self, ModelError> {
        let unknown = || ModelError::UnknownPath(path.to_string());
        let (head, rest) = path.split_once('.').ok_or_else(unknown)?;
        if head == "contact_defaults" {
            return ContactField::parse(rest).map(ScenePath::Defaults).ok_or_else(unknown);
        }
        if head == "cfd" {
            return CfdField::parse(rest).map(ScenePath::Cfd).ok_or_else(unknown);
        }
        let indexed = |prefix: &str| -> Option<usize> {
            head.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok()
        };
        let geom = indexed("geoms[").or_else(|| scene.geom_index(head));
        let body = indexed("bodies[").or_else(|| scene.body_index(head));
        if body.is_some_and(|b| b >= scene.bodies.len()) || geom.is_some_and(|g| g >= scene.geoms.len()) {
            return Err(unknown());
        }
        if rest == "mass" {
            return body.map(ScenePath::Mass).ok_or_else(unknown);
        }
        let geom = geom.or_else(|| body.and_then(|b| scene.primary_geom(b))).ok_or_else(unknown)?;
        if let Some(field) = rest.strip_prefix("contact.") {
            return ContactField::parse(field)
                .map(|f| ScenePath::GeomContact(geom, f))
                .ok_or_else(unknown);
        }
        match (&scene.geoms[geom].shape, rest) {
            (Shape::Sphere { .. }, "radius") => Ok(ScenePath::Radius(geom)),
            (Shape::Corners { .. }, "scale" | "side_length") => Ok(ScenePath::Scale(geom)),
            (Shape::Plane { .. }, "offset") => Ok(ScenePath::PlaneOffset(geom)),
            _ => Err(unknown()),
        }
    }

    pub fn get_mut<'a, T: Real>(&self, scene: &'a mut Scene<T>) -> &'a mut T {
        match *self {
            ScenePath::Mass(b) => &mut scene.bodies[b].mass,
            ScenePath::Radius(g) => match &mut scene.geoms[g].shape {
                Shape::Sphere { radius } => radius,
                _ => unreachable!("radius path on non-sphere"),
            },
            ScenePath::Scale(g) => match &mut scene.geoms[g].shape {
                Shape::Corners { scale, .. } => scale,
                _ => unreachable!("scale path on non-corner geom"),
            },
            ScenePath::PlaneOffset(g) => match &mut scene.geoms[g].shape {
                Shape::Plane { offset, .. } => offset,
                _ => unreachable!("offset path on non-plane"),
            },
            ScenePath::GeomContact(g, f) => {
                let defaults = scene.contact_defaults;
                f.get_mut(scene.geoms[g].contact.get_or_insert(defaults))
            }
            ScenePath::Defaults(f) => f.get_mut(&mut scene.contact_defaults),
            ScenePath::Cfd(f) => f.get_mut(&mut scene.cfd),
        }
    }

    pub fn get<T: Real>(&self, scene: &Scene<T>) -> T {
        let mut s = scene.clone();
        *self.get_mut(&mut s)
    }
}

impl<T: Real> Scene<T> {
    pub fn geom_index(&self, name: &str) -> Option<usize> {
        self.geoms.iter().position(|g| g.name.as_deref() == Some(name))
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name.as_deref() == Some(name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub path: String,
    pub transform: Transform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedSlot {
    pub slot: ParamSlot,
    pub target: ScenePath,
}

/// Unconstrained parameter values together with the slots they map to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ResolvedSlot>,
}

impl ParamVector {
    pub fn empty() -> Self {
        ParamVector {
            values: Vec::new(),
            layout: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Scene-space values after the transforms.
    pub fn scene_values(&self) -> Vec<f64> {
        self.layout
            .iter()
            .zip(&self.values)
            .map(|(s, &u)| s.slot.transform.forward(u))
            .collect()
    }

    /// Same slots with unconstrained values inverted from scene-space `values`.
    pub fn from_scene_values(&self, values: &[f64]) -> Result<Self, ModelError> {
        if values.len() != self.len() {
            return Err(ModelError::invalid("params", "value count does not match the slots"));
        }
        let mut out = Vec::with_capacity(values.len());
        for (s, &v) in self.layout.iter().zip(values) {
            out.push(s.slot.transform.inverse(v).ok_or_else(|| ModelError::TransformDomain {
                slot: s.slot.name.clone(),
                value: v,
                transform: s.slot.transform.name(),
            })?);
        }
        Ok(self.with_values(out))
    }
}

/// Reads the current scene values of `slots` and inverts their transforms.
pub fn pack_params(scene: &Scene, slots: &[ParamSlot]) -> Result<ParamVector, ModelError> {
    let mut values = Vec::with_capacity(slots.len());
    let mut layout = Vec::with_capacity(slots.len());
    for slot in slots {
        let target = ScenePath::parse(scene, &slot.path)?;
        let v = target.get(scene);
        let u = slot.transform.inverse(v).ok_or_else(|| ModelError::TransformDomain {
            slot: slot.name.clone(),
            value: v,
            transform: slot.transform.name(),
        })?;
        values.push(u);
        layout.push(ResolvedSlot {
            slot: slot.clone(),
            target,
        });
    }
    Ok(ParamVector { values, layout })
}

/// Writes transformed parameter values into a scene.
pub fn apply_params(scene: &Scene, p: &ParamVector) -> Result<Scene, ModelError> {
    apply_params_with(scene, &p.layout, &p.values)
}

/// Generic form of [`apply_params`]: the returned scene carries the tangents of `values`.
pub fn apply_params_with<T: Real>(
    scene: &Scene,
    layout: &[ResolvedSlot],
    values: &[T],
) -> Result<Scene<T>, ModelError> {
    if layout.len() != values.len() {
        return Err(ModelError::LayoutMismatch(format!(
            "{} slots but {} values",
            layout.len(),
            values.len()
        )));
    }
    for s in layout {
        if ScenePath::parse(scene, &s.slot.path).ok() != Some(s.target) {
            return Err(ModelError::LayoutMismatch(format!(
                "slot `{}` does not resolve to the same field",
                s.slot.name
            )));
        }
    }
    Ok(lift_with_params(scene, layout, values))
}

/// [`apply_params_with`] for a layout already checked against `scene`.
pub(crate) fn lift_with_params<T: Real>(scene: &Scene, layout: &[ResolvedSlot], values: &[T]) -> Scene<T> {
    let mut out = scene.lift::<T>();
    for (s, &u) in layout.iter().zip(values) {
        *s.target.get_mut(&mut out) = s.slot.transform.forward(u);
    }
    out
}
