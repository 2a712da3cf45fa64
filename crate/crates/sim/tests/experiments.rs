use std::fs;
use std::path::Path;
use std::process::Command;

use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::optimize::{AdamHyper, FitConfig};
use diffcontact_sim::billiard::BilliardSetup;
use diffcontact_sim::exec::Pool;
use diffcontact_sim::grad::GradSettings;
use diffcontact_sim::scenario::bundled;
use diffcontact_sim::sysid::{dataset, fit_from, generate_tosses_with, TossRanges};
use serde_json::Value;

fn sim(args: &[&str], out: &Path) {
    let o = Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn sysid_ground_truth_is_a_fixed_point() {
    let s = bundled("cube_toss").unwrap();
    let params = s.params().unwrap();
    let truth = params.scene_values()[0];
    let config = IntegratorConfig::fixed(Method::SemiImplicitEuler, s.scene.outer_dt);
    let trajs = generate_tosses_with(&s.scene, 2, 50, &TossRanges::default(), 1, config).unwrap();
    let data = dataset(&trajs);
    for cfd_grad in [false, true] {
        let fit = FitConfig {
            steps: 20,
            adam: AdamHyper::with_lr(1e-3),
            batch: 16,
            cfd_grad,
            integrator: config,
            seed: 0,
        };
        let r = fit_from(&s.scene, &params, &[truth], &data, &fit, &Pool::new(1)).unwrap();
        for p in &r.param_trace {
            assert!((p[0] - truth).abs() <= 0.005 * truth, "cfd {cfd_grad}: {}", p[0]);
        }
    }
}

#[test]
fn sysid_large_init_without_cfd_does_not_converge() {
    let dir = tempfile::tempdir().unwrap();
    sim(&["sysid", "--inits", "140", "--cfd-grad", "false", "--integrator", "semi-implicit-euler"], dir.path());
    let v = column(&dir.path().join("trace.csv"), "value");
    assert_eq!(v.len(), 501);
    let last = v[v.len() - 1];
    assert!((last - 0.1).abs() > 0.005, "{last}");
}

#[test]
fn mpc_without_cfd_stays_flat_from_rest() {
    let dir = tempfile::tempdir().unwrap();
    sim(&["mpc", "--cfd-grad", "false", "--horizon", "32", "--total-steps", "32", "--iters", "4"], dir.path());
    let c = column(&dir.path().join("cost.csv"), "cost");
    assert_eq!(c.len(), 32);
    assert!(c.iter().all(|&x| x == c[0]));
}

#[test]
fn sampling_planner_reduces_cost() {
    let dir = tempfile::tempdir().unwrap();
    sim(
        &["mpc", "--planner", "sampling", "--samples", "64", "--iters", "2", "--horizon", "64", "--total-steps", "64"],
        dir.path(),
    );
    let c = column(&dir.path().join("cost.csv"), "cost");
    assert!(c[c.len() - 1] < 0.5 * c[0], "{} -> {}", c[0], c[c.len() - 1]);
    assert_eq!(summary(dir.path())["best_cost_monotone"], true);
}

#[test]
fn pareto_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["pareto", "--methods", "rk54,semi-implicit-euler"];
    sim(&args, &a);
    sim(&args, &b);
    for col in ["loss_error", "grad_error", "rhs_evals"] {
        assert_eq!(column(&a.join("pareto.csv"), col), column(&b.join("pareto.csv"), col));
    }
}

#[test]
fn cfd_gradient_is_a_descent_direction() {
    let s = bundled("billiard").unwrap();
    let setup = BilliardSetup::from_scenario(&s).unwrap();
    let f = s.task.descent.unwrap().start;
    assert!(setup.min_gap(f).unwrap() > 0.0);
    let settings = GradSettings {
        cfd_grad: true,
        ..Default::default()
    };
    let (l0, g) = setup.gradient(f, &settings).unwrap();
    assert!(g != [0.0, 0.0]);
    let vanilla = setup.gradient(f, &GradSettings::default()).unwrap().1;
    assert_eq!(vanilla, [0.0, 0.0]);
    let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
    let improved = (0..20).map(|k| 2f64.powi(3 - k)).any(|step| {
        let trial = [f[0] - step * g[0] / n, f[1] - step * g[1] / n];
        setup.loss_at(trial).unwrap() < l0
    });
    assert!(improved);
}
