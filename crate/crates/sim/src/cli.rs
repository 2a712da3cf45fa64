//! Command-line interface of the `sim` binary.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::ParamVector;
use diffcontact_core::optimize::{
    mpc_loop, AdamHyper, FitConfig, GradientPlanner, GradientPlannerConfig, MpcConfig, MpcResult, Plan, PlanProblem,
    Planner, SamplingPlanner, SamplingPlannerConfig,
};
use diffcontact_core::sensitivity::{ToyModel, TargetDistance};
use diffcontact_core::SimError;
use serde_json::{json, Value};

use crate::billiard::{cfd_sweep, descend, shot_grid, BilliardSetup};
use crate::exec::Pool;
use crate::grad::{GradMode, GradSettings};
use crate::gradcheck::{self, GradcheckConfig};
use crate::output::{RunOutput, Table};
use crate::scenario::{self, Scenario, ScenarioError};
use crate::sysid::{self, TossRanges};
use crate::task::Grid;
use crate::toss::{self, TossSetup};
use crate::toy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sim", version, about = "Differentiable contact simulation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Output directory [default: out/<subcommand>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Warn about unknown scenario keys instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct IntegratorArgs {
    /// explicit-euler, semi-implicit-euler, rk4, bs32 or rk54.
    #[arg(long, value_parser = parse_method)]
    pub integrator: Option<Method>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    /// Step-size controller gains `P,I,D`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub pid: Option<Vec<f64>>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Inner step of fixed-step methods [default: the outer step].
    #[arg(long)]
    pub step: Option<f64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown integrator `{s}` (expected one of {})", names.join(", "))
    })
}

impl IntegratorArgs {
    /// `base` with every given flag applied.
    pub fn apply(&self, base: IntegratorConfig) -> IntegratorConfig {
        let mut c = base;
        if let Some(m) = self.integrator {
            c.method = m;
            if !m.is_adaptive() {
                c.fixed_h = None;
            }
        }
        if let Some(r) = self.rtol {
            c.rtol = r;
            c.atol = self.atol.unwrap_or(r);
        }
        if let Some(a) = self.atol {
            c.atol = a;
        }
        if let Some(p) = &self.pid {
            c.pid = [p[0], p[1], p[2]];
        }
        if let Some(n) = self.max_steps {
            c.max_steps = n;
        }
        if let Some(h) = self.step {
            c.fixed_h = Some(h);
        }
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradArgs {
    #[arg(long, value_enum, default_value_t = GradMode::Unroll)]
    pub grad_mode: GradMode,
    /// Straight-through contacts-from-distance gradients [default: the
    /// scenario's cfd.enabled].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cfd_grad: Option<bool>,
    #[arg(long)]
    pub checkpoint_stride: Option<usize>,
    #[arg(long)]
    pub fd_eps: Option<f64>,
    /// Tolerance of the adjoint integration.
    #[arg(long)]
    pub adjoint_rtol: Option<f64>,
}

impl GradArgs {
    pub fn settings(&self, s: &Scenario) -> GradSettings {
        let d = GradSettings::default();
        GradSettings {
            mode: self.grad_mode,
            cfd_grad: self.cfd_grad.unwrap_or(s.scene.cfd.enabled),
            adjoint_rtol: self.adjoint_rtol.unwrap_or(d.adjoint_rtol),
            fd_eps: self.fd_eps.unwrap_or(d.fd_eps),
            checkpoint_stride: self.checkpoint_stride.unwrap_or(d.checkpoint_stride),
        }
    }
}

/// `lo,hi,n`.
fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi, n] = parts[..] else {
        return Err(format!("expected `lo,hi,n`, got `{s}`"));
    };
    let num = |v: &str| f64::from_str(v).map_err(|e| format!("`{v}`: {e}"));
    let n = usize::from_str(n).map_err(|e| format!("`{n}`: {e}"))?;
    if n == 0 {
        return Err("grid needs at least one point".into());
    }
    Ok(Grid {
        lo: num(lo)?,
        hi: num(hi)?,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TossShape {
    Sphere,
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlannerKind {
    Gradient,
    Sampling,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gradient sweeps of the 1D point-mass toy models.
    Toy1d {
        /// penalty, elastic, elastic-toi [default: all].
        #[arg(long, value_delimiter = ',')]
        model: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3, 1e-4, 1e-5])]
        h: Vec<f64>,
        /// Initial height grid `lo,hi,n` [default: the scenario sweep].
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        q0: Option<Grid>,
    },
    /// Toss-distance gradients against the finite-difference oracle.
    Toss {
        #[arg(long, value_enum, default_value_t = TossShape::Sphere)]
        shape: TossShape,
        /// Initial x velocity grid `lo,hi,n`.
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        vx: Option<Grid>,
        /// Outer steps [default: the scenario horizon].
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        integ: IntegratorArgs,
        #[command(flatten)]
        grad: GradArgs,
    },
    /// Loss and gradient error against cost for many integrator settings.
    Pareto {
        #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
        vx: f64,
        /// Restrict to these integrators.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
        #[command(flatten)]
        grad: GradArgs,
    },
    /// Billiard shot grid, descent trace and gradient comparisons.
    Billiard {
        /// x force grid `lo,hi,n`.
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        fx: Option<Grid>,
        /// y force grid `lo,hi,n`.
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        fy: Option<Grid>,
        /// Descent start `fx,fy`.
        #[arg(long, value_delimiter = ',', num_args = 2, allow_negative_numbers = true)]
        start: Option<Vec<f64>>,
        #[arg(long)]
        descent_iters: Option<usize>,
        #[arg(long)]
        descent_lr: Option<f64>,
        /// Compare unrolled and adjoint gradients along the x sweep.
        #[arg(long)]
        compare: bool,
        /// Outer steps of the forward-invariance check.
        #[arg(long, default_value_t = 500)]
        invariance_steps: usize,
        #[command(flatten)]
        integ: IntegratorArgs,
        #[command(flatten)]
        grad: GradArgs,
    },
    /// Side-length identification from synthetic cube tosses.
    Sysid {
        /// Initial side lengths in millimetres.
        #[arg(long, value_delimiter = ',')]
        inits: Vec<f64>,
        #[arg(long)]
        tosses: Option<usize>,
        #[arg(long)]
        toss_steps: Option<usize>,
        #[arg(long)]
        adam_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        integ: IntegratorArgs,
        #[command(flatten)]
        grad: GradArgs,
    },
    /// Receding-horizon control of the billiard shot.
    Mpc {
        #[arg(long, value_enum, default_value_t = PlannerKind::Gradient)]
        planner: PlannerKind,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        iters: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
        #[arg(long, default_value_t = 256)]
        horizon: usize,
        #[arg(long, default_value_t = 16)]
        execute_steps: usize,
        /// Total executed outer steps [default: the horizon].
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long, default_value_t = 0.3)]
        noise_sigma: f64,
        /// Force per unit action [default: the scenario's action_gain].
        #[arg(long)]
        action_gain: Option<f64>,
        #[command(flatten)]
        integ: IntegratorArgs,
        #[command(flatten)]
        grad: GradArgs,
    },
    /// Derivative and invariant checks against independent oracles.
    Gradcheck {
        /// Corrupt one rhs Jacobian entry; the run must fail.
        #[arg(long)]
        perturb_jacobian: bool,
        #[arg(long, default_value_t = 100)]
        configs: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toy1d { .. } => "toy1d",
            Command::Toss { .. } => "toss",
            Command::Pareto { .. } => "pareto",
            Command::Billiard { .. } => "billiard",
            Command::Sysid { .. } => "sysid",
            Command::Mpc { .. } => "mpc",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Invalid command-line input detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, thiserror::Error)]
#[error("gradcheck failed: {0}")]
pub struct GradcheckFailed(pub String);

/// Exit code for an error returned by [`execute`].
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return EXIT_GRADCHECK;
    }
    if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ScenarioError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<SimError>() {
        Some(SimError::Config(_) | SimError::Model(_)) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn default_scenario(cmd: &Command) -> &'static str {
    match cmd {
        Command::Toy1d { .. } => "toy1d",
        Command::Toss {
            shape: TossShape::Cube, ..
        } => "cube_toss",
        Command::Toss { .. } | Command::Pareto { .. } => "sphere_toss",
        Command::Billiard { .. } | Command::Mpc { .. } => "billiard",
        Command::Sysid { .. } => "cube_toss",
        Command::Gradcheck { .. } => "",
    }
}

fn load(global: &GlobalArgs, fallback: &str) -> Result<Scenario> {
    let name_or_path = global.scenario.as_deref().unwrap_or(fallback);
    let s = scenario::resolve(name_or_path, global.lenient)?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    Ok(s)
}

pub fn integrator_json(c: &IntegratorConfig) -> Value {
    json!({
        "method": c.method.name(),
        "rtol": c.rtol,
        "atol": c.atol,
        "pid": c.pid,
        "max_steps": c.max_steps,
        "fixed_h": c.fixed_h,
    })
}

fn grad_json(g: &GradSettings) -> Value {
    serde_json::to_value(g).expect("settings serialize")
}

fn scenario_config(s: &Scenario) -> IntegratorConfig {
    s.task.integrator.as_ref().and_then(|d| d.to_config()).unwrap_or_default()
}

fn out_dir(global: &GlobalArgs, cmd: &Command) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("out").join(cmd.name()))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.jobs == 0 {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    eprintln!("seed {}", g.seed);
    let pool = Pool::new(g.jobs);
    let dir = out_dir(g, &cli.command);
    match &cli.command {
        Command::Toy1d { model, h, q0 } => {
            let s = load(g, default_scenario(&cli.command))?;
            let setup = toy::toy_setup(&s)?;
            let models: Vec<ToyModel> = if model.is_empty() {
                ToyModel::ALL.to_vec()
            } else {
                model
                    .iter()
                    .map(|m| ToyModel::parse(m).ok_or_else(|| UsageError(format!("unknown toy model `{m}`"))))
                    .collect::<Result<_, _>>()?
            };
            if h.iter().any(|v| !(*v > 0.0)) {
                bail!(UsageError("step sizes must be positive".into()));
            }
            let grid = q0
                .or(s.task.sweep)
                .ok_or_else(|| UsageError("no q0 grid: pass --q0 or set task.sweep".into()))?;
            let config = json!({
                "scenario": s.to_doc(),
                "models": models.iter().map(|m| m.name()).collect::<Vec<_>>(),
                "h": h,
                "q0": grid,
            });
            let mut out = RunOutput::create(&dir, "toy1d", g.seed, config)?;
            let runs = toy::toy_runs(&setup, &models, h, &grid.points(), &pool)?;
            let mut t = Table::new(&["model", "h", "q0", "loss", "grad_analytic", "grad_fd"]);
            let mut summary = Vec::new();
            for (m, step, r) in &runs {
                for i in 0..r.len() {
                    t.push(vec![
                        m.name().into(),
                        (*step).into(),
                        r.sweep_values[i].into(),
                        r.losses[i].into(),
                        r.analytic_grads[i].into(),
                        r.fd_grads[i].into(),
                    ]);
                }
                summary.push(toy::summarize(*m, *step, r));
            }
            out.write_table("toy1d.csv", &t)?;
            out.write_json("summary.json", &summary)?;
            for s in &summary {
                println!(
                    "{:<12} h={:<8e} sign_flips={:<3} max_rel_error={:.3e}",
                    s.model, s.h, s.sign_flip_count, s.max_rel_error
                );
            }
            out.finish()?;
        }
        Command::Toss {
            vx,
            steps,
            integ,
            grad,
            ..
        } => {
            let s = load(g, default_scenario(&cli.command))?;
            let steps = steps
                .or(s.task.horizon_steps)
                .ok_or_else(|| UsageError("no horizon: pass --steps or set task.horizon_steps".into()))?;
            let grid = vx
                .or(s.task.sweep)
                .ok_or_else(|| UsageError("no v_x grid: pass --vx or set task.sweep".into()))?;
            let config = integ.apply(scenario_config(&s));
            let settings = grad.settings(&s);
            let setup = TossSetup::new(s.scene.clone(), steps);
            let mut out = RunOutput::create(
                &dir,
                "toss",
                g.seed,
                json!({
                    "scenario": s.to_doc(),
                    "steps": steps,
                    "vx": grid,
                    "integrator": integrator_json(&config),
                    "grad": grad_json(&settings),
                }),
            )?;
            let points = grid.points();
            let r = toss::toss_sweep(&setup, &points, config, &settings, &pool)?;
            let mut t = Table::new(&["vx", "loss", "grad_analytic", "grad_fd", "rel_error", "rhs_evals", "wall_time"]);
            for i in 0..r.len() {
                t.push(vec![
                    r.sweep_values[i].into(),
                    r.losses[i].into(),
                    r.analytic_grads[i].into(),
                    r.fd_grads[i].into(),
                    r.rel_errors[i].into(),
                    r.rhs_eval_counts[i].into(),
                    r.wall_times[i].into(),
                ]);
            }
            let quat = setup.quat_drift(points[points.len() / 2], config)?;
            let summary = json!({
                "sign_flip_count": r.sign_flip_count,
                "sign_mismatch_count": r.sign_mismatch_count,
                "max_rel_error": r.max_rel_error(),
                "quat_norm_error": quat,
            });
            out.write_table("toss.csv", &t)?;
            out.write_json("summary.json", &summary)?;
            println!(
                "sign_flips={} max_rel_error={:.3e} quat_norm_error={:.1e}",
                r.sign_flip_count,
                r.max_rel_error(),
                quat
            );
            out.finish()?;
        }
        Command::Pareto { vx, methods, grad } => {
            let s = load(g, default_scenario(&cli.command))?;
            let steps = s
                .task
                .horizon_steps
                .ok_or_else(|| UsageError("scenario has no task.horizon_steps".into()))?;
            let settings = grad.settings(&s);
            let configs: Vec<IntegratorConfig> = toss::default_pareto_configs()
                .into_iter()
                .filter(|c| methods.is_empty() || methods.contains(&c.method))
                .collect();
            let setup = TossSetup::new(s.scene.clone(), steps);
            let mut out = RunOutput::create(
                &dir,
                "pareto",
                g.seed,
                json!({
                    "scenario": s.to_doc(),
                    "vx": vx,
                    "configs": configs.iter().map(integrator_json).collect::<Vec<_>>(),
                    "grad": grad_json(&settings),
                }),
            )?;
            let rows = toss::pareto(&setup, *vx, &configs, &settings, &pool)?;
            let mut t = Table::new(&[
                "integrator",
                "setting",
                "loss",
                "loss_error",
                "grad",
                "grad_error",
                "rhs_evals",
                "wall_time",
            ]);
            for r in &rows {
                t.push(vec![
                    r.integrator.clone().into(),
                    r.setting.into(),
                    r.loss.into(),
                    r.loss_error.into(),
                    r.grad.into(),
                    r.grad_error.into(),
                    r.rhs_evals.into(),
                    r.wall_time.into(),
                ]);
            }
            out.write_table("pareto.csv", &t)?;
            let adaptive = toss::cheapest(&rows, |r| r.integrator == Method::Rk54.name(), 1e-3);
            let fixed = toss::cheapest(&rows, |r| !Method::parse(&r.integrator).is_some_and(|m| m.is_adaptive()), 1e-3);
            out.write_json(
                "summary.json",
                &json!({"max_grad_error": 1e-3, "rk54_evals": adaptive, "best_fixed_evals": fixed}),
            )?;
            println!("evals at grad error <= 1e-3: rk54 {adaptive:?}, best fixed-step {fixed:?}");
            out.finish()?;
        }
        Command::Billiard {
            fx,
            fy,
            start,
            descent_iters,
            descent_lr,
            compare,
            invariance_steps,
            integ,
            grad,
        } => run_billiard(
            g,
            &pool,
            &dir,
            BilliardArgs {
                fx: *fx,
                fy: *fy,
                start: start.clone(),
                descent_iters: *descent_iters,
                descent_lr: *descent_lr,
                compare: *compare,
                invariance_steps: *invariance_steps,
                integ,
                grad,
            },
        )?,
        Command::Sysid {
            inits,
            tosses,
            toss_steps,
            adam_steps,
            lr,
            batch,
            integ,
            grad,
        } => {
            let s = load(g, default_scenario(&cli.command))?;
            let fit = s.task.fit.clone().unwrap_or(crate::task::FitDoc {
                tosses: 4,
                toss_steps: 100,
                adam_steps: 500,
                lr: 1e-3,
                batch: 64,
                inits: vec![0.06, 0.1, 0.14],
                integrator: None,
            });
            let params = s.params()?;
            if params.len() != 1 {
                bail!(UsageError(format!("sysid fits one parameter, scenario has {}", params.len())));
            }
            let truth = params.scene_values()[0];
            let inits: Vec<f64> = if inits.is_empty() { fit.inits.clone() } else { inits.iter().map(|mm| mm * 1e-3).collect() };
            let base = fit.integrator.as_ref().and_then(|d| d.to_config()).unwrap_or_default();
            let settings = grad.settings(&s);
            let cfg = FitConfig {
                steps: adam_steps.unwrap_or(fit.adam_steps),
                adam: AdamHyper::with_lr(lr.unwrap_or(fit.lr)),
                batch: batch.unwrap_or(fit.batch),
                cfd_grad: settings.cfd_grad,
                integrator: integ.apply(base),
                seed: g.seed,
            };
            let n_tosses = tosses.unwrap_or(fit.tosses);
            let n_steps = toss_steps.unwrap_or(fit.toss_steps);
            let mut out = RunOutput::create(
                &dir,
                "sysid",
                g.seed,
                json!({
                    "scenario": s.to_doc(),
                    "truth": truth,
                    "inits": inits,
                    "tosses": n_tosses,
                    "toss_steps": n_steps,
                    "adam_steps": cfg.steps,
                    "lr": cfg.adam.lr,
                    "batch": cfg.batch,
                    "cfd_grad": cfg.cfd_grad,
                    "integrator": integrator_json(&cfg.integrator),
                    "data_tol": sysid::DATA_TOL,
                    "segment_len": sysid::SEGMENT_LEN,
                    "ranges": TossRanges::default(),
                }),
            )?;
            let trajs = sysid::generate_tosses(&s.scene, n_tosses, n_steps, &TossRanges::default(), g.seed)?;
            let data = sysid::dataset(&trajs);
            let mut t = Table::new(&["init", "step", "value", "loss"]);
            let mut summary = Vec::new();
            for &init in &inits {
                let r = sysid::fit_from(&s.scene, &params, &[init], &data, &cfg, &pool)?;
                for (k, p) in r.param_trace.iter().enumerate() {
                    let loss = r.loss_trace.get(k).copied().unwrap_or(f64::NAN);
                    t.push(vec![init.into(), k.into(), p[0].into(), loss.into()]);
                }
                let last = r.final_params[0];
                let rel = (last - truth).abs() / truth;
                let first_within = r.param_trace.iter().position(|p| (p[0] - truth).abs() <= 0.05 * truth);
                println!("init {:.1} mm -> {:.2} mm (error {:.2}%)", init * 1e3, last * 1e3, rel * 100.0);
                summary.push(json!({
                    "init": init,
                    "final": last,
                    "rel_error": rel,
                    "first_step_within_5pct": first_within,
                    "failed_steps": r.failed_steps,
                }));
            }
            out.write_table("trace.csv", &t)?;
            out.write_json("summary.json", &summary)?;
            out.finish()?;
        }
        Command::Mpc {
            planner,
            samples,
            iters,
            lr,
            clip_norm,
            horizon,
            execute_steps,
            total_steps,
            noise_sigma,
            action_gain,
            integ,
            grad,
        } => {
            let s = load(g, default_scenario(&cli.command))?;
            let setup = BilliardSetup::from_scenario(&s)?;
            let settings = grad.settings(&s);
            let gain = action_gain.or(s.task.action_gain).unwrap_or(1.0);
            let config = integ.apply(setup.config);
            let mpc = MpcConfig {
                total_steps: total_steps.unwrap_or(*horizon),
                execute_steps: *execute_steps,
            };
            if *horizon == 0 || *samples == 0 {
                bail!(UsageError("--horizon and --samples must be positive".into()));
            }
            let mut out = RunOutput::create(
                &dir,
                "mpc",
                g.seed,
                json!({
                    "scenario": s.to_doc(),
                    "planner": format!("{planner:?}").to_lowercase(),
                    "samples": samples,
                    "iters": iters,
                    "lr": lr,
                    "clip_norm": clip_norm,
                    "horizon": horizon,
                    "execute_steps": execute_steps,
                    "total_steps": mpc.total_steps,
                    "noise_sigma": noise_sigma,
                    "action_gain": gain,
                    "cfd_grad": settings.cfd_grad,
                    "integrator": integrator_json(&config),
                }),
            )?;
            let params = ParamVector::empty();
            let problem = PlanProblem {
                scene: &setup.scene,
                params: &params,
                action_map: setup.action_map().with_gain(gain),
                config,
                loss: setup.distance_loss(*horizon, true),
            };
            let plan = Plan::constant(*horizon, vec![0.0, 0.0]);
            let x0 = setup.x0();
            let cost = planar_distance(&setup);
            let r = match planner {
                PlannerKind::Gradient => {
                    let mut p = GradientPlanner(GradientPlannerConfig {
                        iters: *iters,
                        adam: AdamHyper::with_lr(*lr),
                        clip_norm: *clip_norm,
                        cfd_grad: settings.cfd_grad,
                    });
                    run_mpc(&problem, &x0, plan, &mut p, &mpc, &cost)?
                }
                PlannerKind::Sampling => {
                    let mut p = SamplingPlanner::new(
                        SamplingPlannerConfig {
                            samples: *samples,
                            sigma: *noise_sigma,
                        },
                        g.seed,
                        pool,
                    );
                    let mut rounds = SamplingRounds { inner: &mut p, iters: *iters };
                    run_mpc(&problem, &x0, plan, &mut rounds, &mpc, &cost)?
                }
            };
            write_mpc(&mut out, &r, setup.scene.outer_dt)?;
            let final_distance = r.step_costs.last().copied().unwrap_or(f64::NAN);
            let monotone = best_cost_monotone(&r);
            out.write_json(
                "summary.json",
                &json!({
                    "final_distance": final_distance,
                    "initial_distance": cost(&x0),
                    "best_cost_monotone": monotone,
                    "rounds": r.plan_traces.len(),
                }),
            )?;
            println!("final distance {final_distance:.4} m, best_cost non-increasing: {monotone}");
            out.finish()?;
        }
        Command::Gradcheck {
            perturb_jacobian,
            configs,
        } => {
            let scenes = match &g.scenario {
                Some(_) => vec![load(g, "")?],
                None => ["sphere_toss", "cube_toss", "billiard"]
                    .iter()
                    .map(|n| scenario::bundled(n))
                    .collect::<Result<_, _>>()?,
            };
            let cfg = GradcheckConfig {
                seed: g.seed,
                configs: *configs,
                perturb_jacobian: *perturb_jacobian,
                ..Default::default()
            };
            let mut out = RunOutput::create(
                &dir,
                "gradcheck",
                g.seed,
                json!({
                    "scenarios": scenes.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                    "check": cfg,
                }),
            )?;
            let report = gradcheck::run(&scenes, &cfg)?;
            out.write_json("gradcheck.json", &report)?;
            for c in &report.checks {
                println!(
                    "{} {:<32} worst {:.3e} (tol {:.0e}) at {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst_error,
                    c.tolerance,
                    c.location
                );
            }
            out.finish()?;
            if !report.passed {
                let failed: Vec<String> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{} at {}", c.name, c.location))
                    .collect();
                bail!(GradcheckFailed(failed.join("; ")));
            }
        }
    }
    Ok(())
}

/// Planar Euclidean distance of the target ball to the target.
pub fn planar_distance(setup: &BilliardSetup) -> impl Fn(&[f64]) -> f64 {
    let pos = setup.scene.layout().pos[setup.target_body];
    let target = setup.target;
    move |x: &[f64]| ((x[pos] - target[0]).powi(2) + (x[pos + 1] - target[1]).powi(2)).sqrt()
}

/// Repeats a sampling planner `iters` times per planning round.
pub struct SamplingRounds<'a, P> {
    pub inner: &'a mut P,
    pub iters: usize,
}

impl<L, P: Planner<L>> Planner<L> for SamplingRounds<'_, P> {
    fn plan(&mut self, problem: &PlanProblem<'_, L>, x0: &[f64], plan: Plan) -> Plan {
        let mut p = plan;
        for _ in 0..self.iters.max(1) {
            p = self.inner.plan(problem, x0, p);
        }
        p
    }
}

fn run_mpc<P: Planner<TargetDistance>>(
    problem: &PlanProblem<'_, TargetDistance>,
    x0: &[f64],
    plan: Plan,
    planner: &mut P,
    config: &MpcConfig,
    cost: &dyn Fn(&[f64]) -> f64,
) -> Result<MpcResult> {
    Ok(mpc_loop(problem, x0, plan, planner, config, cost)?)
}

/// Whether the running best cost never increases within a planning round.
pub fn best_cost_monotone(r: &MpcResult) -> bool {
    r.plan_traces.iter().all(|t| t.windows(2).all(|w| w[1] <= w[0]))
}

fn write_mpc(out: &mut RunOutput, r: &MpcResult, dt: f64) -> Result<()> {
    let mut cost = Table::new(&["step", "time", "cost"]);
    for (i, c) in r.step_costs.iter().enumerate() {
        cost.push(vec![(i + 1).into(), ((i + 1) as f64 * dt).into(), (*c).into()]);
    }
    out.write_table("cost.csv", &cost)?;
    let mut plans = Table::new(&["round", "iter", "best_cost"]);
    for (k, t) in r.plan_traces.iter().enumerate() {
        for (i, c) in t.iter().enumerate() {
            plans.push(vec![k.into(), i.into(), (*c).into()]);
        }
    }
    out.write_table("plan.csv", &plans)?;
    let dim = r.states.first().map_or(0, Vec::len);
    let adim = r.actions.first().map_or(0, Vec::len);
    let mut header: Vec<String> = vec!["step".into(), "time".into()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.extend((0..adim).map(|i| format!("u{i}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut traj = Table::new(&refs);
    for (i, x) in r.states.iter().enumerate() {
        let mut row = vec![i.into(), (i as f64 * dt).into()];
        row.extend(x.iter().map(|v| (*v).into()));
        match r.actions.get(i) {
            Some(a) => row.extend(a.iter().map(|v| (*v).into())),
            None => row.extend((0..adim).map(|_| f64::NAN.into())),
        }
        traj.push(row);
    }
    out.write_table("trajectory.csv", &traj)?;
    Ok(())
}

struct BilliardArgs<'a> {
    fx: Option<Grid>,
    fy: Option<Grid>,
    start: Option<Vec<f64>>,
    descent_iters: Option<usize>,
    descent_lr: Option<f64>,
    compare: bool,
    invariance_steps: usize,
    integ: &'a IntegratorArgs,
    grad: &'a GradArgs,
}

fn run_billiard(g: &GlobalArgs, pool: &Pool, dir: &std::path::Path, a: BilliardArgs<'_>) -> Result<()> {
    let s = load(g, "billiard")?;
    let mut setup = BilliardSetup::from_scenario(&s)?;
    setup.config = a.integ.apply(setup.config);
    let settings = a.grad.settings(&s);
    let fx = a
        .fx
        .or(s.task.sweep)
        .ok_or_else(|| UsageError("no force grid: pass --fx or set task.sweep".into()))?;
    let fy = a.fy.or(s.task.sweep_y);
    let fy_points = fy.map_or(vec![0.0], |g| g.points());
    let descent = match (&a.start, s.task.descent) {
        (Some(st), d) => Some(crate::task::DescentDoc {
            start: [st[0], st[1]],
            lr: a.descent_lr.or(d.map(|d| d.lr)).unwrap_or(1.0),
            iters: a.descent_iters.or(d.map(|d| d.iters)).unwrap_or(10),
        }),
        (None, Some(d)) => Some(crate::task::DescentDoc {
            start: d.start,
            lr: a.descent_lr.unwrap_or(d.lr),
            iters: a.descent_iters.unwrap_or(d.iters),
        }),
        (None, None) => None,
    };
    let compare = a.compare || s.task.compare_adjoint;
    let mut out = RunOutput::create(
        dir,
        "billiard",
        g.seed,
        json!({
            "scenario": s.to_doc(),
            "fx": fx,
            "fy": fy_points,
            "descent": descent,
            "compare_adjoint": compare,
            "invariance_steps": a.invariance_steps,
            "integrator": integrator_json(&setup.config),
            "grad": grad_json(&settings),
        }),
    )?;
    let xs = fx.points();
    let vanilla = GradSettings {
        cfd_grad: false,
        ..settings
    };
    let cfd = GradSettings {
        cfd_grad: true,
        ..settings
    };
    let rows_v = shot_grid(&setup, &xs, &fy_points, &vanilla, pool)?;
    let rows_c = shot_grid(&setup, &xs, &fy_points, &cfd, pool)?;
    let mut t = Table::new(&[
        "fx",
        "fy",
        "loss",
        "min_gap",
        "grad_x_vanilla",
        "grad_y_vanilla",
        "grad_x_cfd",
        "grad_y_cfd",
    ]);
    for (v, c) in rows_v.iter().zip(&rows_c) {
        t.push(vec![
            v.fx.into(),
            v.fy.into(),
            v.loss.into(),
            v.min_gap.into(),
            v.grad_x.into(),
            v.grad_y.into(),
            c.grad_x.into(),
            c.grad_y.into(),
        ]);
    }
    out.write_table("grid.csv", &t)?;
    let apart: Vec<usize> = (0..rows_v.len()).filter(|&i| rows_v[i].min_gap > 0.0).collect();
    let vanilla_zero = apart.iter().filter(|&&i| rows_v[i].grad_x == 0.0 && rows_v[i].grad_y == 0.0).count();
    let cfd_nonzero = apart.iter().filter(|&&i| rows_c[i].grad_x != 0.0 || rows_c[i].grad_y != 0.0).count();
    let mut summary = json!({
        "grid_points": rows_v.len(),
        "non_touching_points": apart.len(),
        "vanilla_zero_gradients": vanilla_zero,
        "cfd_nonzero_gradients": cfd_nonzero,
    });
    println!(
        "non-touching {} of {}: vanilla zero {}, cfd nonzero {}",
        apart.len(),
        rows_v.len(),
        vanilla_zero,
        cfd_nonzero
    );

    if let Some(d) = descent {
        let trace = descend(&setup, d.start, d.iters, AdamHyper::with_lr(d.lr), &settings)?;
        let mut t = Table::new(&["iter", "fx", "fy", "loss", "grad_x", "grad_y"]);
        for r in &trace {
            t.push(vec![
                r.iter.into(),
                r.fx.into(),
                r.fy.into(),
                r.loss.into(),
                r.grad_x.into(),
                r.grad_y.into(),
            ]);
        }
        out.write_table("descent.csv", &t)?;
        let (l0, l1) = (trace[0].loss, trace[trace.len() - 1].loss);
        summary["descent_initial_loss"] = json!(l0);
        summary["descent_final_loss"] = json!(l1);
        println!("descent loss {l0:.4e} -> {l1:.4e}");
    }

    if compare {
        let fy0 = fy_points[0];
        let unroll = cfd_sweep(&setup, &xs, fy0, &GradSettings { mode: GradMode::Unroll, ..cfd }, pool)?;
        let adjoint = cfd_sweep(&setup, &xs, fy0, &GradSettings { mode: GradMode::Adjoint, ..cfd }, pool)?;
        let mut t = Table::new(&["fx", "loss", "grad_unroll", "grad_adjoint", "grad_oracle"]);
        for i in 0..unroll.len() {
            t.push(vec![
                unroll.sweep_values[i].into(),
                unroll.losses[i].into(),
                unroll.analytic_grads[i].into(),
                adjoint.analytic_grads[i].into(),
                unroll.fd_grads[i].into(),
            ]);
        }
        out.write_table("sweep.csv", &t)?;
        summary["unroll_sign_flips"] = json!(unroll.sign_flip_count);
        summary["adjoint_sign_flips"] = json!(adjoint.sign_flip_count);
        summary["adjoint_max_rel_error"] = json!(adjoint.max_rel_error());
        println!(
            "sign flips: unroll {}, adjoint {} (max rel error {:.3e})",
            unroll.sign_flip_count,
            adjoint.sign_flip_count,
            adjoint.max_rel_error()
        );
    }

    if a.invariance_steps > 0 {
        let mut long = setup.clone();
        long.steps = a.invariance_steps;
        let glancing = descent.map_or([xs[0], fy_points[0]], |d| d.start);
        let head_on = [xs[xs.len() - 1], 0.0];
        let (n, a) = long.forward_invariant(glancing).context("forward invariance rollout")?;
        let (_, b) = long.forward_invariant(head_on).context("forward invariance rollout")?;
        let same = a && b;
        summary["invariance_steps"] = json!(n);
        summary["straight_through_bitwise"] = json!(same);
        println!("straight-through forward bitwise equal over {n} steps: {same}");
    }
    out.write_json("summary.json", &summary)?;
    out.finish()?;
    Ok(())
}
