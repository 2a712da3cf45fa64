//! End-to-end acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p diffcontact-sim --test acceptance`.

use std::time::Instant;

use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::ParamVector;
use diffcontact_core::optimize::{
    mpc_loop, AdamHyper, FitConfig, GradientPlanner, GradientPlannerConfig, MpcConfig, Plan, PlanProblem,
};
use diffcontact_core::sensitivity::{sign_flips, toy_oracle, ToyModel};
use diffcontact_sim::billiard::{cfd_sweep, descend, shot_grid, BilliardSetup};
use diffcontact_sim::cli::{best_cost_monotone, planar_distance};
use diffcontact_sim::exec::Pool;
use diffcontact_sim::grad::{GradMode, GradSettings};
use diffcontact_sim::scenario::bundled;
use diffcontact_sim::sysid::{dataset, fit_from, generate_tosses, TossRanges};
use diffcontact_sim::toss::{cheapest, default_pareto_configs, pareto, toss_sweep, TossSetup};
use diffcontact_sim::{gradcheck, toy};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn toy_oscillation() -> Outcome {
    let s = bundled("toy1d").map_err(|e| e.to_string())?;
    let setup = toy::toy_setup(&s).map_err(|e| e.to_string())?;
    let grid = s.task.sweep.ok_or("toy1d has no sweep")?.points();
    let runs = toy::toy_runs(&setup, &[ToyModel::Penalty], &[1e-2, 1e-5], &grid, &Pool::new(1)).map_err(|e| e.to_string())?;
    let (coarse, fine) = (&runs[0].2, &runs[1].2);
    let oracle_flips = sign_flips(&coarse.fd_grads, &coarse.fd_grads);
    let ok = grid.len() == 200
        && coarse.sign_flip_count >= 5
        && oracle_flips == 0
        && fine.sign_flip_count == 0
        && fine.sign_mismatch_count == 0
        && fine.max_rel_error() < 1e-2;
    Ok((
        ok,
        format!(
            "h=1e-2 flips {} (oracle {}); h=1e-5 flips {}, mismatches {}, max rel error {:.2e}",
            coarse.sign_flip_count,
            oracle_flips,
            fine.sign_flip_count,
            fine.sign_mismatch_count,
            fine.max_rel_error()
        ),
    ))
}

fn toi_non_fix() -> Outcome {
    let s = bundled("toy1d").map_err(|e| e.to_string())?;
    let setup = toy::toy_setup(&s).map_err(|e| e.to_string())?;
    let grid = s.task.sweep.ok_or("toy1d has no sweep")?.points();
    let steps = [1e-3, 1e-4, 1e-5];
    let runs = toy::toy_runs(&setup, &[ToyModel::Elastic], &steps, &grid, &Pool::new(1)).map_err(|e| e.to_string())?;
    let wrong: Vec<usize> = runs.iter().map(|r| r.2.sign_mismatch_count).collect();
    let mut worst_toi: f64 = 0.0;
    for &h in &[1e-2, 1e-3, 1e-4, 1e-5] {
        for &q0 in &grid {
            let (_, g) = diffcontact_core::sensitivity::toy_loss_grad(ToyModel::ElasticToi, &setup, q0, h);
            let (_, exact) = toy_oracle(ToyModel::ElasticToi, &setup, q0, 1e-6).map_err(|e| e.to_string())?;
            worst_toi = worst_toi.max((g - exact).abs());
        }
    }
    let ok = wrong.iter().all(|&w| w > 0) && worst_toi <= 1e-6;
    Ok((ok, format!("wrong-sign points without TOI {wrong:?}; TOI max |error| {worst_toi:.1e}")))
}

fn stiff_toss() -> Outcome {
    let s = bundled("sphere_toss").map_err(|e| e.to_string())?;
    let setup = TossSetup::new(s.scene.clone(), s.task.horizon_steps.ok_or("no horizon")?);
    let grid = s.task.sweep.ok_or("no sweep")?.points();
    let pool = Pool::new(1);
    let gs = GradSettings::default();
    let fixed = toss_sweep(&setup, &grid, IntegratorConfig::fixed(Method::SemiImplicitEuler, 0.002), &gs, &pool)
        .map_err(|e| e.to_string())?;
    let adaptive = toss_sweep(&setup, &grid, IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6), &gs, &pool)
        .map_err(|e| e.to_string())?;
    let ok = grid.len() == 50 && fixed.sign_flip_count >= 1 && adaptive.max_rel_error() < 1e-2;
    Ok((
        ok,
        format!(
            "fixed 0.002 flips {}; rk54 1e-6 max rel error {:.2e}",
            fixed.sign_flip_count,
            adaptive.max_rel_error()
        ),
    ))
}

fn pareto_dominance() -> Outcome {
    let s = bundled("sphere_toss").map_err(|e| e.to_string())?;
    let setup = TossSetup::new(s.scene.clone(), s.task.horizon_steps.ok_or("no horizon")?);
    let rows = pareto(&setup, -2.0, &default_pareto_configs(), &GradSettings::default(), &Pool::new(1))
        .map_err(|e| e.to_string())?;
    let rk54 = cheapest(&rows, |r| r.integrator == "rk54", 1e-3);
    let fixed = cheapest(&rows, |r| !Method::parse(&r.integrator).is_some_and(|m| m.is_adaptive()), 1e-3);
    let ok = match (rk54, fixed) {
        (Some(a), Some(f)) => a as f64 <= 0.5 * f as f64,
        (Some(_), None) => true,
        _ => false,
    };
    Ok((ok, format!("rhs evals at grad error <= 1e-3: rk54 {rk54:?}, best fixed-step {fixed:?}")))
}

fn billiard_setup(name: &str) -> Result<(BilliardSetup, diffcontact_sim::scenario::Scenario), String> {
    let s = bundled(name).map_err(|e| e.to_string())?;
    Ok((BilliardSetup::from_scenario(&s).map_err(|e| e.to_string())?, s))
}

fn cfd_rescue() -> Outcome {
    let (setup, s) = billiard_setup("billiard")?;
    let fx = s.task.sweep.ok_or("no sweep")?.points();
    let fy = s.task.sweep_y.ok_or("no sweep_y")?.points();
    let pool = Pool::new(1);
    let vanilla = GradSettings::default();
    let cfd = GradSettings {
        cfd_grad: true,
        ..vanilla
    };
    let rv = shot_grid(&setup, &fx, &fy, &vanilla, &pool).map_err(|e| e.to_string())?;
    let rc = shot_grid(&setup, &fx, &fy, &cfd, &pool).map_err(|e| e.to_string())?;
    let apart = rv.iter().all(|r| r.min_gap > 0.0);
    let zero = rv.iter().all(|r| r.grad_x == 0.0 && r.grad_y == 0.0);
    let nonzero = rc.iter().filter(|r| r.grad_x != 0.0 || r.grad_y != 0.0).count() as f64 / rc.len() as f64;
    let d = s.task.descent.ok_or("no descent block")?;
    let trace = descend(&setup, d.start, 10, AdamHyper::with_lr(d.lr), &cfd).map_err(|e| e.to_string())?;
    let (l0, l1) = (trace[0].loss, trace[trace.len() - 1].loss);
    let start_apart = setup.min_gap(d.start).map_err(|e| e.to_string())? > 0.0;
    let ok = apart && zero && nonzero >= 0.9 && start_apart && l1 <= 0.5 * l0;
    Ok((
        ok,
        format!(
            "{} points never touch: {apart}; vanilla all zero: {zero}; cfd nonzero {:.0}%; Adam loss {l0:.3e} -> {l1:.3e}",
            rv.len(),
            nonzero * 100.0
        ),
    ))
}

fn forward_invariance() -> Outcome {
    let (mut setup, s) = billiard_setup("billiard")?;
    setup.steps = 500;
    let glancing = s.task.descent.map_or([20.0, 0.0], |d| d.start);
    let head_on = [30.0, 0.0];
    let collides = setup.min_gap(head_on).map_err(|e| e.to_string())? < 0.0;
    let mut ok = collides;
    let mut detail = format!("head-on shot collides: {collides}");
    for f in [glancing, head_on] {
        let (n, same) = setup.forward_invariant(f).map_err(|e| e.to_string())?;
        ok &= n == 500 && same;
        detail += &format!("; force {f:?}: {n} outer steps, bitwise equal: {same}");
    }
    Ok((ok, detail))
}

fn adjoint_corner_case() -> Outcome {
    let (setup, s) = billiard_setup("billiard_nocontact")?;
    let grid = s.task.sweep.ok_or("no sweep")?.points();
    let pool = Pool::new(1);
    let base = GradSettings {
        cfd_grad: true,
        adjoint_rtol: 1e-8,
        ..Default::default()
    };
    let unroll = cfd_sweep(&setup, &grid, 0.0, &base, &pool).map_err(|e| e.to_string())?;
    let adjoint = cfd_sweep(
        &setup,
        &grid,
        0.0,
        &GradSettings {
            mode: GradMode::Adjoint,
            ..base
        },
        &pool,
    )
    .map_err(|e| e.to_string())?;
    let ok = unroll.sign_flip_count >= 3 && adjoint.sign_flip_count == 0 && adjoint.max_rel_error() < 1e-2;
    Ok((
        ok,
        format!(
            "unroll flips {}; adjoint flips {}, max rel error {:.2e}",
            unroll.sign_flip_count,
            adjoint.sign_flip_count,
            adjoint.max_rel_error()
        ),
    ))
}

fn system_identification() -> Outcome {
    let s = bundled("cube_toss").map_err(|e| e.to_string())?;
    let fit = s.task.fit.clone().ok_or("no fit block")?;
    let params = s.params().map_err(|e| e.to_string())?;
    let truth = params.scene_values()[0];
    let trajs = generate_tosses(&s.scene, fit.tosses, fit.toss_steps, &TossRanges::default(), 0).map_err(|e| e.to_string())?;
    let data = dataset(&trajs);
    let pool = Pool::new(1);
    let steps = 500;
    let good = FitConfig {
        steps,
        adam: AdamHyper::with_lr(fit.lr),
        batch: fit.batch,
        cfd_grad: true,
        integrator: IntegratorConfig::adaptive(Method::Rk54, 1e-4, 1e-4),
        seed: 0,
    };
    let plain = FitConfig {
        cfd_grad: false,
        integrator: IntegratorConfig::fixed(Method::SemiImplicitEuler, s.scene.outer_dt),
        ..good
    };
    let a = fit_from(&s.scene, &params, &[0.06], &data, &good, &pool).map_err(|e| e.to_string())?;
    let b = fit_from(&s.scene, &params, &[0.06], &data, &plain, &pool).map_err(|e| e.to_string())?;
    let err_a = (a.final_params[0] - truth).abs() / truth;
    let b_reached = b.param_trace.iter().any(|p| (p[0] - truth).abs() <= 0.05 * truth);
    let ok = err_a < 0.05 && !b_reached;
    Ok((
        ok,
        format!(
            "adaptive+cfd 60 mm -> {:.2} mm ({:.1}%); vanilla fixed-step 60 mm -> {:.2} mm, reached 5%: {b_reached}",
            a.final_params[0] * 1e3,
            err_a * 100.0,
            b.final_params[0] * 1e3
        ),
    ))
}

fn mpc() -> Outcome {
    let (setup, s) = billiard_setup("billiard")?;
    let params = ParamVector::empty();
    let horizon = 256;
    let problem = PlanProblem {
        scene: &setup.scene,
        params: &params,
        action_map: setup.action_map().with_gain(s.task.action_gain.unwrap_or(1.0)),
        config: setup.config,
        loss: setup.distance_loss(horizon, true),
    };
    let mut planner = GradientPlanner(GradientPlannerConfig {
        iters: 32,
        adam: AdamHyper::with_lr(0.01),
        clip_norm: 1.0,
        cfd_grad: true,
    });
    let cost = planar_distance(&setup);
    let r = mpc_loop(
        &problem,
        &setup.x0(),
        Plan::constant(horizon, vec![0.0, 0.0]),
        &mut planner,
        &MpcConfig {
            total_steps: horizon,
            execute_steps: 16,
        },
        &cost,
    )
    .map_err(|e| e.to_string())?;
    let last = *r.step_costs.last().ok_or("no steps")?;
    let mono = best_cost_monotone(&r);
    Ok((last < 0.05 && mono, format!("final distance {last:.4} m; best_cost non-increasing: {mono}")))
}

fn property_battery() -> Outcome {
    let scenes = ["sphere_toss", "cube_toss", "billiard"]
        .iter()
        .map(|n| bundled(n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let r = gradcheck::run(&scenes, &gradcheck::GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = r
        .checks
        .iter()
        .filter(|c| c.name.contains("jacobian"))
        .fold(0.0f64, |m, c| m.max(c.worst_error));
    Ok((
        r.passed,
        format!("{} checks, worst Jacobian rel error {worst:.1e}, failed {failed:?}", r.checks.len()),
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("toy gradient oscillation", toy_oscillation),
        ("elastic toy and TOI correction", toi_non_fix),
        ("stiff toss gradients", stiff_toss),
        ("adaptive Pareto dominance", pareto_dominance),
        ("zero gradient and CFD rescue", cfd_rescue),
        ("straight-through forward invariance", forward_invariance),
        ("adjoint on contact-free billiard", adjoint_corner_case),
        ("cube side identification", system_identification),
        ("billiard MPC", mpc),
        ("numerical property battery", property_battery),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("{} {}", i + 1, name);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {label}: {} ({detail}) [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        failures += usize::from(!ok);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
