//! Small fixed-size vector and quaternion types, generic over [`Real`].

use core::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }
    pub fn zero() -> Self {
        Vec3::new(T::zero(), T::zero(), T::zero())
    }
    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3::new(T::cst(v[0]), T::cst(v[1]), T::cst(v[2]))
    }
    pub fn from_slice(s: &[T]) -> Self {
        Vec3::new(s[0], s[1], s[2])
    }
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }
    pub fn re(&self) -> Vec3<f64> {
        Vec3::new(self.x.re(), self.y.re(), self.z.re())
    }
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }
    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }
    pub fn scale(self, s: T) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
    pub fn scale_f(self, s: f64) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
    /// Componentwise product.
    pub fn hadamard(self, o: Self) -> Self {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }
}

impl Vec3<f64> {
    pub fn lift<U: Real>(self) -> Vec3<U> {
        Vec3::new(U::cst(self.x), U::cst(self.y), U::cst(self.z))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Unit quaternion `(w, x, y, z)` rotating body-frame vectors into the world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Quat { w, x, y, z }
    }
    pub fn identity() -> Self {
        Quat::new(T::one(), T::zero(), T::zero(), T::zero())
    }
    pub fn from_slice(s: &[T]) -> Self {
        Quat::new(s[0], s[1], s[2], s[3])
    }
    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }
    pub fn norm_sq(self) -> T {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }
    pub fn normalized(self) -> Self {
        let inv = self.norm_sq().sqrt().recip();
        Quat::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }
    pub fn conj(self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }
    /// Hamilton product `self ⊗ o`.
    pub fn mul(self, o: Self) -> Self {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
    /// Rotate a body-frame vector into the world frame.
    pub fn rotate(self, v: Vec3<T>) -> Vec3<T> {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v).scale_f(2.0);
        v + t.scale(self.w) + u.cross(t)
    }
    /// Rotate a world-frame vector into the body frame.
    pub fn inv_rotate(self, v: Vec3<T>) -> Vec3<T> {
        self.conj().rotate(v)
    }
    /// Quaternion rate `½ q ⊗ (0, ω)` for a body-frame angular velocity.
    pub fn rate(self, omega_body: Vec3<T>) -> Self {
        let p = self.mul(Quat::new(T::zero(), omega_body.x, omega_body.y, omega_body.z));
        Quat::new(p.w * 0.5, p.x * 0.5, p.y * 0.5, p.z * 0.5)
    }
    /// Row-major rotation matrix.
    pub fn to_matrix(self) -> [T; 9] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        [
            one - (y * y + z * z) * 2.0,
            (x * y - w * z) * 2.0,
            (x * z + w * y) * 2.0,
            (x * y + w * z) * 2.0,
            one - (x * x + z * z) * 2.0,
            (y * z - w * x) * 2.0,
            (x * z - w * y) * 2.0,
            (y * z + w * x) * 2.0,
            one - (x * x + y * y) * 2.0,
        ]
    }
}

impl Quat<f64> {
    pub fn lift<U: Real>(self) -> Quat<U> {
        Quat::new(U::cst(self.w), U::cst(self.x), U::cst(self.y), U::cst(self.z))
    }
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = libm::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        let (s, c) = (libm::sin(0.5 * angle), libm::cos(0.5 * angle));
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }
}

/// Right-handed orthonormal tangent pair for a unit normal (Duff et al. 2017).
pub fn tangent_frame<T: Real>(n: Vec3<T>) -> [Vec3<T>; 2] {
    let sign = if n.z.re() >= 0.0 { 1.0 } else { -1.0 };
    let a = (n.z + sign).recip() * -1.0;
    let b = n.x * n.y * a;
    let t1 = Vec3::new(n.x * n.x * a * sign + 1.0, b * sign, n.x * -sign);
    let t2 = Vec3::new(b, n.y * n.y * a + sign, -n.y);
    [t1, t2]
}
