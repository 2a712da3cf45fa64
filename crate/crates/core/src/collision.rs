//! Narrow-phase collision for spheres, planes and corner sets.

use alloc::vec::Vec;

use crate::math::{tangent_frame, Quat, Vec3};
use crate::model::{ContactParams, Scene, Shape, StateLayout};
use crate::real::{smooth_hypot, Real};

/// Smoothing length of the sphere–sphere distance norm.
pub const SMOOTH_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct ContactPoint<T> {
    /// Signed distance, negative when penetrating.
    pub r: T,
    /// World-frame unit normal pointing from geom B toward geom A.
    pub normal: Vec3<T>,
    pub pos: Vec3<T>,
    pub tangents: [Vec3<T>; 2],
    pub geom_a: usize,
    pub geom_b: usize,
    pub body_a: Option<usize>,
    pub body_b: Option<usize>,
    pub params: ContactParams<T>,
}

/// World pose of a body read from the flat state.
#[derive(Clone, Copy, Debug)]
pub struct Pose<T> {
    pub pos: Vec3<T>,
    pub quat: Option<Quat<T>>,
}

impl<T: Real> Pose<T> {
    pub fn from_state(layout: &StateLayout, x: &[T], b: usize) -> Self {
        let o = layout.pos[b];
        Pose {
            pos: Vec3::from_slice(&x[o..o + 3]),
            quat: layout.quat[b].map(|q| Quat::from_slice(&x[q..q + 4])),
        }
    }

    pub fn to_world(&self, local: Vec3<T>) -> Vec3<T> {
        match self.quat {
            Some(q) => self.pos + q.rotate(local),
            None => self.pos + local,
        }
    }
}

/// Sphere against the half-space `n · p >= offset`.
pub fn sphere_plane<T: Real>(center: Vec3<T>, radius: T, normal: Vec3<T>, offset: T) -> (T, Vec3<T>, Vec3<T>) {
    let r = normal.dot(center) - offset - radius;
    let pos = center - normal.scale(radius + r * 0.5);
    (r, normal, pos)
}

/// Sphere pair with a smoothed center distance; the normal points from sphere 2 to sphere 1.
pub fn sphere_sphere<T: Real>(
    c1: Vec3<T>,
    r1: T,
    c2: Vec3<T>,
    r2: T,
    smooth_eps: f64,
) -> (T, Vec3<T>, Vec3<T>) {
    let v = c1 - c2;
    let hyp = smooth_hypot(v.norm_sq(), smooth_eps);
    let d = hyp - smooth_eps;
    let r = d - r1 - r2;
    let normal = v.scale(hyp.recip());
    // Midpoint of the overlap region along the center line.
    let pos = c2 + normal.scale(r2 + r * 0.5);
    (r, normal, pos)
}

/// One candidate per corner of a posed corner set against a plane.
pub fn corners_plane<T: Real>(
    pose: &Pose<T>,
    points: &[[f64; 3]],
    scale: T,
    normal: Vec3<T>,
    offset: T,
) -> Vec<(T, Vec3<T>, Vec3<T>)> {
    points
        .iter()
        .map(|p| {
            let w = pose.to_world(Vec3::<f64>::from_f64(*p).lift::<T>().scale(scale));
            let r = normal.dot(w) - offset;
            (r, normal, w)
        })
        .collect()
}

fn plane_of<T: Real>(shape: &Shape<T>) -> Option<(Vec3<T>, T)> {
    match shape {
        Shape::Plane { normal, offset } => Some((Vec3::from_f64(*normal), *offset)),
        _ => None,
    }
}

/// All contact candidates with signed distance below `margin`.
pub fn detect<T: Real>(scene: &Scene<T>, layout: &StateLayout, x: &[T], margin: f64) -> Vec<ContactPoint<T>> {
    let mut out = Vec::new();
    let pose = |g: usize| {
        scene.geoms[g].body.map(|b| Pose::from_state(layout, x, b)).unwrap_or(Pose {
            pos: Vec3::zero(),
            quat: None,
        })
    };
    let ng = scene.geoms.len();
    for i in 0..ng {
        for j in (i + 1)..ng {
            let (gi, gj) = (&scene.geoms[i], &scene.geoms[j]);
            if gi.body == gj.body {
                continue;
            }
            let mut push = |a: usize, b: usize, (r, normal, pos): (T, Vec3<T>, Vec3<T>)| {
                if r.re() < margin {
                    let params = scene.pair_params(a, b);
                    out.push(ContactPoint {
                        r,
                        normal,
                        pos,
                        tangents: tangent_frame(normal),
                        geom_a: a,
                        geom_b: b,
                        body_a: scene.geoms[a].body,
                        body_b: scene.geoms[b].body,
                        params,
                    });
                }
            };
            match (&gi.shape, &gj.shape) {
                (Shape::Sphere { radius }, Shape::Plane { .. }) => {
                    let (n, off) = plane_of(&gj.shape).unwrap();
                    push(i, j, sphere_plane(pose(i).pos, *radius, n, off));
                }
                (Shape::Plane { .. }, Shape::Sphere { radius }) => {
                    let (n, off) = plane_of(&gi.shape).unwrap();
                    push(j, i, sphere_plane(pose(j).pos, *radius, n, off));
                }
                (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) => {
                    push(i, j, sphere_sphere(pose(i).pos, *ra, pose(j).pos, *rb, SMOOTH_EPS));
                }
                (Shape::Corners { points, scale }, Shape::Plane { .. }) => {
                    let (n, off) = plane_of(&gj.shape).unwrap();
                    for c in corners_plane(&pose(i), points, *scale, n, off) {
                        push(i, j, c);
                    }
                }
                (Shape::Plane { .. }, Shape::Corners { points, scale }) => {
                    let (n, off) = plane_of(&gi.shape).unwrap();
                    for c in corners_plane(&pose(j), points, *scale, n, off) {
                        push(j, i, c);
                    }
                }
                _ => {}
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::*;
    use crate::real::Dual;
    use alloc::vec;
    use proptest::prelude::*;

    pub(crate) fn ball_scene(z: f64, radius: f64) -> Scene {
        Scene {
            bodies: vec![Body {
                name: Some("ball".into()),
                mass: 1.0,
                inertia: None,
                kind: BodyKind::Free,
                init: BodyInit {
                    pos: [0.0, 0.0, z],
                    ..BodyInit::default()
                },
            }],
            geoms: vec![
                Geom {
                    name: Some("ball".into()),
                    shape: Shape::Sphere { radius },
                    body: Some(0),
                    contact: None,
                },
                Geom {
                    name: Some("floor".into()),
                    shape: Shape::Plane {
                        normal: [0.0, 0.0, 1.0],
                        offset: 0.0,
                    },
                    body: None,
                    contact: None,
                },
            ],
            gravity: [0.0, 0.0, -9.81],
            contact_defaults: ContactParams::default(),
            cfd: CfdParams::default(),
            outer_dt: 0.01,
        }
    }

    fn detect_flat(s: &Scene, margin: f64) -> Vec<ContactPoint<f64>> {
        let l = s.layout();
        let x = s.initial_state().to_flat(&l);
        detect(s, &l, &x, margin)
    }

    #[test]
    fn sphere_above_plane() {
        let s = ball_scene(0.5, 0.3);
        assert!(detect_flat(&s, 0.0).is_empty());
        let c = detect_flat(&s, 1.0);
        assert_eq!(c.len(), 1);
        assert!((c[0].r - 0.2).abs() < 1e-15);
        assert_eq!(c[0].normal.to_array(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn sphere_plane_values() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        let (r, _, _) = sphere_plane(Vec3::new(0.0, 0.0, 1.0), 0.3, n, 0.0);
        assert!((r - 0.7).abs() < 1e-15);
        let (r, _, pos) = sphere_plane(Vec3::new(0.0, 0.0, 0.0), 0.3, n, 0.0);
        assert!((r + 0.3).abs() < 1e-15);
        assert!((pos.z + 0.15).abs() < 1e-15);
        let (rd, _, _) = sphere_plane(Vec3::new(Dual::cst(0.0), Dual::cst(0.0), Dual::<1>::seeded(0.4, 0)), Dual::cst(0.3), n.lift(), Dual::cst(0.0));
        assert_eq!(rd.eps[0], 1.0);
    }

    #[test]
    fn sphere_pair_values() {
        let (r, n, _) = sphere_sphere(Vec3::new(0.05, 0.0, 0.0), 0.03, Vec3::zero(), 0.03, SMOOTH_EPS);
        assert!((r + 0.01).abs() < 1e-8);
        assert!((n.x - 1.0).abs() < 1e-12);
        let (r, _, _) = sphere_sphere(Vec3::new(0.0, 1.0, 0.0), 0.3, Vec3::zero(), 0.3, 1e-9);
        assert!((r - 0.4).abs() < 1e-8);
        let (r, n, _) = sphere_sphere(Vec3::zero(), 0.3, Vec3::zero(), 0.3, 1e-9);
        assert!((r + 0.6).abs() < 1e-8);
        assert!(n.norm().is_finite());
    }

    #[test]
    fn sphere_pair_gradient_matches_fd() {
        let c2 = Vec3::new(0.0, 0.0, 0.0);
        let base = [0.006, -0.007, 0.004];
        let d = Vec3::new(Dual::<3>::seeded(base[0], 0), Dual::seeded(base[1], 1), Dual::seeded(base[2], 2));
        let (rd, _, _) = sphere_sphere(d, Dual::cst(0.03), c2.lift(), Dual::cst(0.03), SMOOTH_EPS);
        for k in 0..3 {
            let f = |h: f64| {
                let mut c = base;
                c[k] += h;
                sphere_sphere(Vec3::from_f64(c), 0.03, c2, 0.03, SMOOTH_EPS).0
            };
            let h = 1e-7;
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((rd.eps[k] - fd).abs() < 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn resting_cube_corners() {
        let mut s = crate::model::tests::cube_scene();
        s.bodies[0].init.pos = [0.0, 0.0, 0.05];
        let c = detect_flat(&s, 1.0);
        assert_eq!(c.len(), 8);
        assert_eq!(c.iter().filter(|p| p.r.abs() < 1e-15).count(), 4);
        assert_eq!(c.iter().filter(|p| (p.r - 0.1).abs() < 1e-15).count(), 4);
        s.bodies[0].init.pos = [0.0, 0.0, 0.04];
        let c = detect_flat(&s, 0.0);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|p| (p.r + 0.01).abs() < 1e-15));
    }

    #[test]
    fn tilted_cube_edge_contact() {
        let mut s = crate::model::tests::cube_scene();
        let h = 0.05 * core::f64::consts::SQRT_2;
        s.bodies[0].init.pos = [0.0, 0.0, h];
        s.bodies[0].init.quat = Quat::from_axis_angle([1.0, 0.0, 0.0], core::f64::consts::FRAC_PI_4).to_array();
        let c = detect_flat(&s, 1.0);
        let mut rs: Vec<f64> = c.iter().map(|p| p.r).collect();
        rs.sort_by(f64::total_cmp);
        assert!(rs[0].abs() < 1e-15 && rs[1].abs() < 1e-15);
        assert!(rs[2] > 0.05);
    }

    proptest! {
        #[test]
        fn swapping_spheres_negates_normal(
            a in prop::array::uniform3(-0.1f64..0.1), b in prop::array::uniform3(-0.1f64..0.1),
            ra in 0.01f64..0.05, rb in 0.01f64..0.05,
        ) {
            let (r1, n1, _) = sphere_sphere(Vec3::from_f64(a), ra, Vec3::from_f64(b), rb, SMOOTH_EPS);
            let (r2, n2, _) = sphere_sphere(Vec3::from_f64(b), rb, Vec3::from_f64(a), ra, SMOOTH_EPS);
            prop_assert!((r1 - r2).abs() < 1e-15);
            prop_assert!((n1 + n2).norm() < 1e-15);
        }

        #[test]
        fn zero_margin_is_subset(z in 0.0f64..0.2, angle in 0.0f64..3.0) {
            let mut s = crate::model::tests::cube_scene();
            s.bodies[0].init.pos = [0.0, 0.0, z];
            s.bodies[0].init.quat = Quat::from_axis_angle([1.0, 0.5, 0.2], angle).to_array();
            let near = detect_flat(&s, 0.3);
            let touching = detect_flat(&s, 0.0);
            let expect: Vec<f64> = near.iter().map(|c| c.r).filter(|r| *r < 0.0).collect();
            let got: Vec<f64> = touching.iter().map(|c| c.r).collect();
            prop_assert_eq!(expect, got);
        }

        #[test]
        fn contact_frame_is_orthonormal(z in -0.05f64..0.2, axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..3.0) {
            prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let mut s = crate::model::tests::cube_scene();
            s.geoms[0].shape = Shape::Plane { normal: [0.6, 0.0, 0.8], offset: 0.0 };
            s.bodies[0].init.pos = [0.0, 0.0, z];
            s.bodies[0].init.quat = Quat::from_axis_angle(axis, angle).to_array();
            for c in detect_flat(&s, 1.0) {
                prop_assert!((c.normal.norm() - 1.0).abs() < 1e-12);
                prop_assert!(c.normal.dot(c.tangents[0]).abs() < 1e-10);
                prop_assert!(c.normal.dot(c.tangents[1]).abs() < 1e-10);
                prop_assert!((c.tangents[0].cross(c.tangents[1]) - c.normal).norm() < 1e-10);
            }
        }
    }
}
