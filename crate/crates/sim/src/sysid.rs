//! Side-length identification of a tossed cube from synthetic trajectories.

use diffcontact_core::dynamics::RhsMode;
use diffcontact_core::integrate::{IntegratorConfig, Method};
use diffcontact_core::model::{apply_params, ParamVector, Scene};
use diffcontact_core::optimize::{fit_params, segments, Executor, FitConfig, FitResult};
use diffcontact_core::sensitivity::{simulate, Rollout};
use diffcontact_core::SimError;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// States per training segment: the head plus four predicted steps.
pub const SEGMENT_LEN: usize = 5;

/// Tolerance of the integrator generating the synthetic data.
pub const DATA_TOL: f64 = 1e-8;

/// Ranges of the randomized toss initial conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TossRanges {
    pub height: [f64; 2],
    pub speed_xy: f64,
    pub speed_z: [f64; 2],
    pub spin: f64,
}

impl Default for TossRanges {
    fn default() -> Self {
        TossRanges {
            height: [0.12, 0.25],
            speed_xy: 1.0,
            speed_z: [-1.0, 0.5],
            spin: 6.0,
        }
    }
}

/// Initial state of toss `i`: body 0 gets a random height, orientation,
/// velocity and spin.
pub fn toss_state(scene: &Scene, ranges: &TossRanges, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let layout = scene.layout();
    let mut x = scene.initial_state().to_flat(&layout);
    let p = layout.pos[0];
    x[p] = 0.0;
    x[p + 1] = 0.0;
    x[p + 2] = rng.random_range(ranges.height[0]..ranges.height[1]);
    if let Some(q) = layout.quat[0] {
        let mut v = [0.0; 4];
        loop {
            for c in &mut v {
                *c = rng.random_range(-1.0..1.0);
            }
            let n2: f64 = v.iter().map(|c| c * c).sum();
            if n2 > 1e-4 && n2 <= 1.0 {
                let n = n2.sqrt();
                for (i, c) in v.iter().enumerate() {
                    x[q + i] = c / n;
                }
                break;
            }
        }
    }
    let v = layout.vel[0];
    x[v] = rng.random_range(-ranges.speed_xy..ranges.speed_xy);
    x[v + 1] = rng.random_range(-ranges.speed_xy..ranges.speed_xy);
    x[v + 2] = rng.random_range(ranges.speed_z[0]..ranges.speed_z[1]);
    if let Some(w) = layout.angvel[0] {
        for i in 0..3 {
            x[w + i] = rng.random_range(-ranges.spin..ranges.spin);
        }
    }
    x
}

/// Trajectories of `n` random tosses of the ground-truth scene, each with
/// `steps + 1` outer-step states.
pub fn generate_tosses(
    scene: &Scene,
    n: usize,
    steps: usize,
    ranges: &TossRanges,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, SimError> {
    let config = IntegratorConfig::adaptive(Method::Rk54, DATA_TOL, DATA_TOL);
    generate_tosses_with(scene, n, steps, ranges, seed, config)
}

/// As [`generate_tosses`] with an explicit integrator.
pub fn generate_tosses_with(
    scene: &Scene,
    n: usize,
    steps: usize,
    ranges: &TossRanges,
    seed: u64,
    config: IntegratorConfig,
) -> Result<Vec<Vec<Vec<f64>>>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ParamVector::empty();
    (0..n)
        .map(|_| {
            let x0 = toss_state(scene, ranges, &mut rng);
            Ok(simulate(scene, &p, &Rollout::passive(x0, steps, config), RhsMode::Vanilla)?.states)
        })
        .collect()
}

/// All overlapping training segments of the trajectories.
pub fn dataset(trajectories: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    trajectories.iter().flat_map(|t| segments(t, SEGMENT_LEN)).collect()
}

/// Fits `params` starting from the scene-space values `init`.
pub fn fit_from<E: Executor>(
    scene: &Scene,
    params: &ParamVector,
    init: &[f64],
    data: &[Vec<Vec<f64>>],
    config: &FitConfig,
    exec: &E,
) -> Result<FitResult, SimError> {
    let start = params.from_scene_values(init)?;
    fit_params(scene, data, &start, config, exec)
}

/// Scene with the fitted parameters applied.
pub fn fitted_scene(scene: &Scene, params: &ParamVector, values: &[f64]) -> Result<Scene, SimError> {
    Ok(apply_params(scene, &params.from_scene_values(values)?)?)
}
