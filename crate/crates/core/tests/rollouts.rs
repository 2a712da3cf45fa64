use diffcontact_core::dynamics::RhsMode;
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::{Body, BodyInit, BodyKind, CfdParams, ContactParams, Geom, ParamVector, Scene, Shape, SystemState};
use diffcontact_core::sensitivity::{grad_adjoint, grad_unroll, simulate, FinalComponent, Rollout};

fn scene(kind: BodyKind, shape: Shape, init: BodyInit, floor: bool) -> Scene {
    let mut geoms = vec![Geom {
        name: None,
        shape,
        body: Some(0),
        contact: None,
    }];
    if floor {
        geoms.push(Geom {
            name: None,
            shape: Shape::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
            },
            body: None,
            contact: None,
        });
    }
    let s = Scene {
        bodies: vec![Body {
            name: None,
            mass: 1.0,
            inertia: None,
            kind,
            init,
        }],
        geoms,
        gravity: [0.0, 0.0, -9.81],
        contact_defaults: ContactParams::default(),
        cfd: CfdParams::default(),
        outer_dt: 0.01,
    };
    s.validate().unwrap();
    s
}

fn x0(s: &Scene) -> Vec<f64> {
    s.initial_state().to_flat(&s.layout())
}

#[test]
fn free_flight_matches_projectile() {
    let init = BodyInit {
        pos: [0.0, 0.0, 1.0],
        vel: [1.5, -0.5, 2.0],
        ..Default::default()
    };
    let s = scene(BodyKind::PointMass, Shape::Sphere { radius: 0.1 }, init, false);
    let tr = simulate(&s, &ParamVector::empty(), &Rollout::passive(x0(&s), 30, IntegratorConfig::default()), RhsMode::Vanilla).unwrap();
    let t = 0.3;
    let x = tr.states.last().unwrap();
    let expect = [1.5 * t, -0.5 * t, 1.0 + 2.0 * t - 0.5 * 9.81 * t * t];
    for i in 0..3 {
        assert!((x[i] - expect[i]).abs() < 1e-12, "axis {i}: {} vs {}", x[i], expect[i]);
    }
    assert_eq!(tr.states.len(), 31);
}

#[test]
fn sphere_comes_to_rest_on_floor() {
    let init = BodyInit {
        pos: [0.0, 0.0, 0.3],
        ..Default::default()
    };
    let s = scene(BodyKind::PointMass, Shape::Sphere { radius: 0.1 }, init, true);
    let tr = simulate(&s, &ParamVector::empty(), &Rollout::passive(x0(&s), 300, IntegratorConfig::default()), RhsMode::Vanilla).unwrap();
    let x = tr.states.last().unwrap();
    let layout = s.layout();
    assert!(x[layout.vel[0] + 2].abs() < 1e-3, "vz {}", x[layout.vel[0] + 2]);
    let z = x[layout.pos[0] + 2];
    assert!(z < 0.1 && z > 0.09, "z {z}");
}

#[test]
fn spinning_cube_keeps_unit_quaternion() {
    let init = BodyInit {
        pos: [0.0, 0.0, 0.2],
        vel: [0.5, 0.0, 0.0],
        angvel: [3.0, -2.0, 5.0],
        ..Default::default()
    };
    let s = scene(BodyKind::Free, Shape::cube(0.1), init, true);
    let layout = s.layout();
    let config = IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6);
    let tr = simulate(&s, &ParamVector::empty(), &Rollout::passive(x0(&s), 100, config), RhsMode::Vanilla).unwrap();
    for x in &tr.states {
        let st = SystemState::from_flat(&layout, x, 0.0);
        assert!(st.quat_norm_error() < 1e-12);
    }
}

#[test]
fn unroll_and_adjoint_agree_in_free_flight() {
    let init = BodyInit {
        pos: [0.0, 0.0, 1.0],
        vel: [0.3, 0.0, 1.0],
        ..Default::default()
    };
    let s = scene(BodyKind::PointMass, Shape::Sphere { radius: 0.1 }, init, false);
    let steps = 20;
    let rollout = Rollout::passive(x0(&s), steps, IntegratorConfig::adaptive(Method::Rk54, 1e-9, 1e-9));
    let loss = FinalComponent {
        steps,
        index: 2,
        offset: 0.0,
        weight: 1.0,
    };
    let p = ParamVector::empty();
    let u = grad_unroll(&s, &p, &rollout, &loss, false).unwrap();
    let a = grad_adjoint(&s, &p, &rollout, &loss, false, &IntegratorConfig::adaptive(Method::Rk54, 1e-10, 1e-10)).unwrap();
    let layout = s.layout();
    // z(T) = z0 + vz0·T
    let t = steps as f64 * s.outer_dt;
    assert!((u.x0[layout.pos[0] + 2] - 1.0).abs() < 1e-9);
    assert!((u.x0[layout.vel[0] + 2] - t).abs() < 1e-9);
    for (i, (gu, ga)) in u.x0.iter().zip(&a.x0).enumerate() {
        assert!((gu - ga).abs() < 1e-7, "component {i}: {gu} vs {ga}");
    }
}

#[test]
fn rollouts_are_bitwise_reproducible() {
    let init = BodyInit {
        pos: [0.0, 0.0, 0.15],
        vel: [1.0, 0.5, -0.5],
        angvel: [1.0, 2.0, 0.0],
        ..Default::default()
    };
    let s = scene(BodyKind::Free, Shape::cube(0.1), init, true);
    let r = Rollout::passive(x0(&s), 50, IntegratorConfig::default());
    let a = simulate(&s, &ParamVector::empty(), &r, RhsMode::Vanilla).unwrap();
    let b = simulate(&s, &ParamVector::empty(), &r, RhsMode::Vanilla).unwrap();
    assert_eq!(a, b);
}
