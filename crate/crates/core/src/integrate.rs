//! Fixed-step and adaptive embedded Runge–Kutta integration with PID step
//! control and a recorded step tape.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::SimError;
use crate::real::Real;

/// An autonomous-in-structure ODE `ẋ = F(t, x)` over scalar type `T`.
pub trait Dynamics<T: Real> {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[T], out: &mut [T]);
    /// Offsets of unit-quaternion blocks, renormalized after every step.
    fn quat_offsets(&self) -> &[usize];
    /// Number of leading position components for semi-implicit Euler.
    fn n_positions(&self) -> Option<usize> {
        None
    }
    /// Position rates computed from the full state (positions and velocities).
    fn kinematics(&self, _x: &[T], _out: &mut [T]) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ExplicitEuler,
    SemiImplicitEuler,
    Rk4,
    /// Bogacki–Shampine 3(2).
    Bs32,
    /// Dormand–Prince 5(4).
    Rk54,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ExplicitEuler,
        Method::SemiImplicitEuler,
        Method::Rk4,
        Method::Bs32,
        Method::Rk54,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ExplicitEuler => "explicit-euler",
            Method::SemiImplicitEuler => "semi-implicit-euler",
            Method::Rk4 => "rk4",
            Method::Bs32 => "bs32",
            Method::Rk54 => "rk54",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Method::Bs32 | Method::Rk54)
    }

    /// Coefficient family, reported in run diagnostics.
    pub fn tableau_name(&self) -> &'static str {
        match self {
            Method::Rk54 => "dormand-prince-5(4)",
            Method::Bs32 => "bogacki-shampine-3(2)",
            Method::Rk4 => "classic-rk4",
            Method::ExplicitEuler => "euler",
            Method::SemiImplicitEuler => "symplectic-euler",
        }
    }

    fn tableau(&self) -> Option<&'static Tableau> {
        match self {
            Method::Rk4 => Some(&RK4),
            Method::Bs32 => Some(&BS32),
            Method::Rk54 => Some(&DP54),
            _ => None,
        }
    }

    pub fn order_low(&self) -> usize {
        match self {
            Method::Bs32 => 2,
            Method::Rk54 => 4,
            Method::Rk4 => 4,
            _ => 1,
        }
    }
}

struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
    /// `b_high - b_low` over all stages including the trailing FSAL stage.
    b_err: Option<&'static [f64]>,
}

static RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    b_err: None,
};

static BS32: Tableau = Tableau {
    c: &[0.0, 0.5, 0.75],
    a: &[&[], &[0.5], &[0.0, 0.75]],
    b: &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
    b_err: Some(&[
        2.0 / 9.0 - 7.0 / 24.0,
        1.0 / 3.0 - 1.0 / 4.0,
        4.0 / 9.0 - 1.0 / 3.0,
        -1.0 / 8.0,
    ]),
};

static DP54: Tableau = Tableau {
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    b_err: Some(&[
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ]),
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// `(P, I, D)` controller coefficients.
    pub pid: [f64; 3],
    pub safety: f64,
    pub h_min: f64,
    /// Largest inner step; the full span when `None`.
    pub h_max: Option<f64>,
    pub max_steps: usize,
    pub factor_clamp: (f64, f64),
    /// Inner step of the fixed-step methods; the full span when `None`.
    pub fixed_h: Option<f64>,
    /// Also record the derivative at the end of the span for dense output.
    pub dense: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk54,
            rtol: 1e-6,
            atol: 1e-6,
            pid: [0.2, 0.4, 0.0],
            safety: 0.9,
            h_min: 1e-9,
            h_max: None,
            max_steps: 100_000,
            factor_clamp: (0.1, 10.0),
            fixed_h: None,
            dense: false,
        }
    }
}

impl IntegratorConfig {
    pub fn adaptive(method: Method, rtol: f64, atol: f64) -> Self {
        IntegratorConfig {
            method,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn fixed(method: Method, h: f64) -> Self {
        IntegratorConfig {
            method,
            fixed_h: Some(h),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return bad("safety factor must lie in (0, 1)");
        }
        if !(self.h_min > 0.0) || self.h_max.is_some_and(|h| h < self.h_min) {
            return bad("requires 0 < h_min <= h_max");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.factor_clamp.0 > 0.0 && self.factor_clamp.0 <= 1.0 && self.factor_clamp.1 >= 1.0) {
            return bad("factor clamp must satisfy 0 < min_shrink <= 1 <= max_grow");
        }
        if self.fixed_h.is_some_and(|h| !(h > 0.0)) {
            return bad("fixed step must be positive");
        }
        Ok(())
    }
}

/// Rescales each quaternion block to unit norm.
pub fn renormalize<T: Real>(y: &mut [T], quats: &[usize]) {
    for &o in quats {
        let n = (y[o] * y[o] + y[o + 1] * y[o + 1] + y[o + 2] * y[o + 2] + y[o + 3] * y[o + 3]).sqrt();
        let inv = n.recip();
        for v in &mut y[o..o + 4] {
            *v *= inv;
        }
    }
}

fn axpy_stage<T: Real>(y: &[T], h: f64, coeffs: &[f64], ks: &[Vec<T>], out: &mut [T]) {
    for i in 0..y.len() {
        let mut acc = T::zero();
        for (c, k) in coeffs.iter().zip(ks) {
            if *c != 0.0 {
                acc += k[i] * *c;
            }
        }
        out[i] = y[i] + acc * h;
    }
}

/// High-order update before renormalization. `ks[0]` must hold `F(t, y)`;
/// the remaining stages are appended.
fn advance<T: Real, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    method: Method,
    t: f64,
    y: &[T],
    h: f64,
    ks: &mut Vec<Vec<T>>,
) -> Vec<T> {
    let n = y.len();
    let mut out = vec![T::zero(); n];
    match method {
        Method::ExplicitEuler => axpy_stage(y, h, &[1.0], ks, &mut out),
        Method::SemiImplicitEuler => {
            let nq = dynamics.n_positions().unwrap_or(0);
            let k = &ks[0];
            for i in nq..n {
                out[i] = y[i] + k[i] * h;
            }
            out[..nq].copy_from_slice(&y[..nq]);
            let mut rate = vec![T::zero(); n];
            dynamics.kinematics(&out, &mut rate);
            for i in 0..nq {
                out[i] = y[i] + rate[i] * h;
            }
        }
        _ => {
            let tab = method.tableau().expect("runge-kutta tableau");
            let mut stage = vec![T::zero(); n];
            for s in 1..tab.c.len() {
                axpy_stage(y, h, tab.a[s], ks, &mut stage);
                let mut k = vec![T::zero(); n];
                dynamics.eval(t + tab.c[s] * h, &stage, &mut k);
                ks.push(k);
            }
            axpy_stage(y, h, tab.b, ks, &mut out);
        }
    }
    out
}

/// One inner step `y -> y_next` exactly as the forward integrator takes it,
/// including quaternion renormalization. Generic so the step can be
/// differentiated with dual numbers.
pub fn step_map<T: Real, D: Dynamics<T> + ?Sized>(dynamics: &D, method: Method, t: f64, y: &[T], h: f64) -> Vec<T> {
    let mut k1 = vec![T::zero(); y.len()];
    dynamics.eval(t, y, &mut k1);
    let mut ks = vec![k1];
    let mut out = advance(dynamics, method, t, y, h, &mut ks);
    renormalize(&mut out, dynamics.quat_offsets());
    out
}

fn evals_per_step(method: Method) -> usize {
    match method {
        Method::ExplicitEuler | Method::SemiImplicitEuler => 0,
        Method::Rk4 => 3,
        Method::Bs32 => 2,
        Method::Rk54 => 5,
    }
}

/// Weighted rms of `err` with scale `atol + rtol·max(|y0|, |y1|)`.
pub fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..err.len() {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let e = err[i] / sc;
        s += e * e;
    }
    libm::sqrt(s / err.len() as f64)
}

/// Embedded step: high-order state (renormalized) and its error estimate.
/// `k1` is `F(t, y)`. Returns the state, the error norm, the derivative at the
/// unnormalized high-order state when the method provides it, and the number
/// of additional rhs evaluations.
pub fn embedded_step<D: Dynamics<f64> + ?Sized>(
    dynamics: &D,
    method: Method,
    t: f64,
    y: &[f64],
    k1: &[f64],
    h: f64,
    rtol: f64,
    atol: f64,
) -> (Vec<f64>, f64, Option<Vec<f64>>, usize) {
    let mut ks = vec![k1.to_vec()];
    let mut y_high = advance(dynamics, method, t, y, h, &mut ks);
    let mut evals = evals_per_step(method);
    let mut err = 0.0;
    let mut k_end = None;
    if let Some(b_err) = method.tableau().and_then(|tab| tab.b_err) {
        let mut k_last = vec![0.0; y.len()];
        dynamics.eval(t + h, &y_high, &mut k_last);
        evals += 1;
        ks.push(k_last);
        let mut diff = vec![0.0; y.len()];
        for (i, d) in diff.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, k) in b_err.iter().zip(&ks) {
                acc += c * k[i];
            }
            *d = acc * h;
        }
        err = error_norm(&diff, y, &y_high, rtol, atol);
        k_end = ks.pop();
    }
    let quats = dynamics.quat_offsets();
    renormalize(&mut y_high, quats);
    if !quats.is_empty() {
        k_end = None;
    }
    (y_high, err, k_end, evals)
}

/// PID step-size controller: whether to accept, and the next step size.
pub fn pid_controller(
    err_now: f64,
    err_prev: f64,
    err_prev2: f64,
    h: f64,
    order_low: usize,
    config: &IntegratorConfig,
    h_max: f64,
) -> (bool, f64) {
    let floor = 1e-10;
    let (e0, e1, e2) = (err_now.max(floor), err_prev.max(floor), err_prev2.max(floor));
    let [p, i, d] = config.pid;
    let k = (order_low + 1) as f64;
    let (b1, b2, b3) = (p + i + d, -(p + 2.0 * d), d);
    let factor = config.safety * libm::pow(e0, -b1 / k) * libm::pow(e1, -b2 / k) * libm::pow(e2, -b3 / k);
    let factor = factor.clamp(config.factor_clamp.0, config.factor_clamp.1);
    let accept = err_now <= 1.0;
    (accept, (h * factor).clamp(config.h_min, h_max.max(config.h_min)))
}

fn rms(v: &[f64], scale: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    libm::sqrt(v.iter().zip(scale).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / v.len() as f64)
}

/// Two-evaluation starting step heuristic. `f0` is `F(t, y)`; costs one more
/// rhs evaluation.
pub fn initial_stepsize<D: Dynamics<f64> + ?Sized>(
    dynamics: &D,
    t: f64,
    y: &[f64],
    f0: &[f64],
    config: &IntegratorConfig,
    h_max: f64,
) -> f64 {
    let h_min = config.h_min;
    if h_min >= h_max {
        return h_min;
    }
    let scale: Vec<f64> = y.iter().map(|v| config.atol + config.rtol * v.abs()).collect();
    let d0 = rms(y, &scale);
    let d1 = rms(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(h_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; y.len()];
    dynamics.eval(t + h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff, &scale) / h0;
    if d1 == 0.0 && d2 == 0.0 {
        return h_max;
    }
    let dm = d1.max(d2);
    let order = config.method.order_low() + 1;
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        libm::pow(0.01 / dm, 1.0 / order as f64)
    };
    (100.0 * h0).min(h1).clamp(h_min, h_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapeEntry {
    pub t: f64,
    pub h: f64,
    pub state: Vec<f64>,
    /// `F(t, state)`.
    pub deriv: Vec<f64>,
}

/// Accepted steps over one integration span.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepTape {
    pub entries: Vec<TapeEntry>,
    pub t_start: f64,
    pub t_end: f64,
    pub end_state: Vec<f64>,
    /// `F(t_end, end_state)` when recorded.
    pub end_deriv: Option<Vec<f64>>,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Step-size proposal for a following span.
    pub h_next: f64,
    pub min_h: f64,
    pub max_err: f64,
}

impl StepTape {
    pub fn accepted(&self) -> usize {
        self.entries.len()
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<(), SimError> {
    match y.iter().position(|v| !v.is_finite()) {
        Some(component) => Err(SimError::NonFiniteState { component, t }),
        None => Ok(()),
    }
}

/// Integrates from `(t0, y0)` over `span` seconds. `h_hint` seeds the first
/// adaptive step; otherwise [`initial_stepsize`] is used.
pub fn integrate<D: Dynamics<f64> + ?Sized>(
    dynamics: &D,
    t0: f64,
    y0: &[f64],
    span: f64,
    config: &IntegratorConfig,
    h_hint: Option<f64>,
) -> Result<StepTape, SimError> {
    let t_end = t0 + span;
    let mut tape = StepTape {
        t_start: t0,
        t_end,
        end_state: y0.to_vec(),
        h_next: h_hint.unwrap_or(0.0),
        min_h: f64::INFINITY,
        ..Default::default()
    };
    if span <= 0.0 {
        tape.min_h = 0.0;
        return Ok(tape);
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    dynamics.eval(t0, &y, &mut k1);
    tape.rhs_evals += 1;

    if !config.method.is_adaptive() {
        let h_req = config.fixed_h.unwrap_or(span);
        let steps = libm::ceil(span / h_req - 1e-9).max(1.0) as usize;
        let h = span / steps as f64;
        for s in 0..steps {
            let t = t0 + s as f64 * h;
            let mut ks = vec![k1.clone()];
            let mut y_next = advance(dynamics, config.method, t, &y, h, &mut ks);
            renormalize(&mut y_next, dynamics.quat_offsets());
            tape.rhs_evals += evals_per_step(config.method);
            check_finite(&y_next, t + h)?;
            tape.entries.push(TapeEntry {
                t,
                h,
                state: core::mem::replace(&mut y, y_next),
                deriv: k1.clone(),
            });
            if s + 1 < steps || config.dense {
                dynamics.eval(t + h, &y, &mut k1);
                tape.rhs_evals += 1;
            }
        }
        tape.min_h = h;
        tape.h_next = h;
        if config.dense {
            tape.end_deriv = Some(k1);
        }
        tape.end_state = y;
        return Ok(tape);
    }

    let h_max = config.h_max.unwrap_or(span).min(span);
    let mut h = match h_hint {
        Some(h) if h > 0.0 => h.clamp(config.h_min, h_max),
        _ => {
            tape.rhs_evals += 1;
            initial_stepsize(dynamics, t0, &y, &k1, config, h_max)
        }
    };
    let order_low = config.method.order_low();
    let (mut e1, mut e2) = (1.0, 1.0);
    let mut t = t0;
    let mut attempts = 0usize;
    let mut last_proposal = h;
    loop {
        let remaining = t_end - t;
        let clipped = h >= remaining * (1.0 - 1e-12);
        let h_try = if clipped { remaining } else { h };
        attempts += 1;
        if attempts > config.max_steps {
            tape.end_state = y;
            return Err(SimError::MaxStepsExceeded {
                max_steps: config.max_steps,
                t,
                partial: Box::new(tape),
            });
        }
        let (y_next, err, k_end, evals) =
            embedded_step(dynamics, config.method, t, &y, &k1, h_try, config.rtol, config.atol);
        tape.rhs_evals += evals;
        let (mut accept, h_new) = pid_controller(err, e1, e2, h_try, order_low, config, h_max);
        let at_floor = h_try <= config.h_min * (1.0 + 1e-9);
        if !accept && at_floor {
            accept = true;
        }
        if !accept || !err.is_finite() {
            tape.rejected += 1;
            if !err.is_finite() && at_floor {
                check_finite(&y_next, t + h_try)?;
            }
            h = if err.is_finite() { h_new.min(h_try) } else { (h_try * 0.1).max(config.h_min) };
            continue;
        }
        check_finite(&y_next, t + h_try)?;
        tape.min_h = tape.min_h.min(h_try);
        tape.max_err = tape.max_err.max(err);
        let t_next = if clipped { t_end } else { t + h_try };
        tape.entries.push(TapeEntry {
            t,
            h: h_try,
            state: core::mem::replace(&mut y, y_next),
            deriv: k1.clone(),
        });
        e2 = e1;
        e1 = err.max(1e-10);
        t = t_next;
        if !clipped {
            last_proposal = h_new;
        }
        h = h_new;
        let done = clipped;
        if !done || config.dense {
            match k_end {
                Some(k) => k1 = k,
                None => {
                    dynamics.eval(t, &y, &mut k1);
                    tape.rhs_evals += 1;
                }
            }
        }
        if done {
            break;
        }
    }
    if config.dense {
        tape.end_deriv = Some(k1);
    }
    tape.end_state = y;
    tape.h_next = last_proposal.max(h);
    Ok(tape)
}

/// Cubic Hermite interpolation of a tape; returns state and its time derivative.
pub fn dense_eval(tape: &StepTape, t: f64, quats: &[usize]) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let span_err = || SimError::OutsideTape {
        t,
        start: tape.t_start,
        end: tape.t_end,
    };
    let tol = 1e-12 * (1.0 + tape.t_end.abs());
    if tape.entries.is_empty() || t < tape.t_start - tol || t > tape.t_end + tol {
        return Err(span_err());
    }
    let i = match tape.entries.binary_search_by(|e| e.t.total_cmp(&t)) {
        Ok(i) => {
            let e = &tape.entries[i];
            return Ok((e.state.clone(), e.deriv.clone()));
        }
        Err(0) => 0,
        Err(i) => i - 1,
    };
    let e0 = &tape.entries[i];
    let (y1, f1, t1) = match tape.entries.get(i + 1) {
        Some(e) => (&e.state, &e.deriv, e.t),
        None => (
            &tape.end_state,
            tape.end_deriv.as_ref().ok_or_else(span_err)?,
            tape.t_end,
        ),
    };
    let h = t1 - e0.t;
    let s = ((t - e0.t) / h).clamp(0.0, 1.0);
    let (s2, s3) = (s * s, s * s * s);
    let (h00, h10, h01, h11) = (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2);
    let (d00, d10, d01, d11) = (6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s);
    let n = y1.len();
    let mut y = vec![0.0; n];
    let mut dy = vec![0.0; n];
    for k in 0..n {
        y[k] = h00 * e0.state[k] + h10 * h * e0.deriv[k] + h01 * y1[k] + h11 * h * f1[k];
        dy[k] = (d00 * e0.state[k] + d01 * y1[k]) / h + d10 * e0.deriv[k] + d11 * f1[k];
    }
    renormalize(&mut y, quats);
    Ok((y, dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{RhsMode, SceneOde};
    use crate::model::*;
    use crate::real::Dual;
    use proptest::prelude::*;

    struct Linear<const N: usize>(f64);
    impl<T: Real, const N: usize> Dynamics<T> for Linear<N> {
        fn dim(&self) -> usize {
            N
        }
        fn eval(&self, _t: f64, x: &[T], out: &mut [T]) {
            for (o, v) in out.iter_mut().zip(x) {
                *o = *v * self.0;
            }
        }
        fn quat_offsets(&self) -> &[usize] {
            &[]
        }
    }

    struct Constant;
    impl Dynamics<f64> for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
            out[0] = 2.0;
            out[1] = -1.0;
        }
        fn quat_offsets(&self) -> &[usize] {
            &[]
        }
    }

    fn ballistic_scene() -> Scene {
        let mut s = crate::dynamics::tests::point_mass_scene(1.0);
        s.geoms.clear();
        s.bodies[0].init.vel = [1.0, 0.0, 0.0];
        s.outer_dt = 0.1;
        s
    }

    fn run(s: &Scene, cfg: &IntegratorConfig, span: f64) -> StepTape {
        let layout = s.layout();
        let ode = SceneOde::new(s, &layout, vec![], RhsMode::Vanilla);
        let x = s.initial_state().to_flat(&layout);
        integrate(&ode, 0.0, &x, span, cfg, None).unwrap()
    }

    #[test]
    fn ballistic_rk54() {
        let s = ballistic_scene();
        let tape = run(&s, &IntegratorConfig::adaptive(Method::Rk54, 1e-8, 1e-8), 0.1);
        let y = &tape.end_state;
        let expect = [0.1, 0.0, 1.0 - 0.5 * 9.81 * 0.01, 1.0, 0.0, -0.981];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!((tape.entries.last().unwrap().t + tape.entries.last().unwrap().h - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ballistic_single_euler_step() {
        let s = ballistic_scene();
        let tape = run(&s, &IntegratorConfig::fixed(Method::ExplicitEuler, 0.1), 0.1);
        assert_eq!(tape.entries.len(), 1);
        let y = &tape.end_state;
        assert!((y[0] - 0.1).abs() < 1e-15 && (y[2] - 1.0).abs() < 1e-15 && (y[5] + 0.981).abs() < 1e-15);
    }

    #[test]
    fn zero_span_is_identity() {
        let s = ballistic_scene();
        let tape = run(&s, &IntegratorConfig::default(), 0.0);
        assert!(tape.entries.is_empty());
        assert_eq!(tape.end_state, s.initial_state().to_flat(&s.layout()));
    }

    #[test]
    fn linear_ode_zero_error() {
        for m in [Method::Bs32, Method::Rk54] {
            let (_, err, _, _) = embedded_step(&Constant, m, 0.0, &[1.0, 2.0], &[2.0, -1.0], 0.5, 1e-6, 1e-6);
            assert!(err < 1e-8);
        }
    }

    #[test]
    fn exponential_rk54() {
        let f = Linear::<1>(1.0);
        let (y, _, _, _) = embedded_step(&f, Method::Rk54, 0.0, &[1.0], &[1.0], 0.1, 1e-6, 1e-6);
        assert!((y[0] - libm::exp(0.1)).abs() < 1e-9);
    }

    #[test]
    fn controller_examples() {
        let cfg = IntegratorConfig::default();
        let (acc, h) = pid_controller(1.0, 1.0, 1.0, 0.01, 4, &cfg, 1.0);
        assert!(acc && (h - 0.009).abs() < 1e-15);
        let (_, h) = pid_controller(0.0, 1.0, 1.0, 0.01, 4, &cfg, 1.0);
        assert!((h - 0.1).abs() < 1e-15);
        let (acc, h) = pid_controller(16.0, 1.0, 1.0, 1.0, 2, &cfg, 1.0);
        assert!(!acc);
        assert!((h - 0.9 * libm::pow(16.0, -0.2)).abs() < 1e-15);
        assert!((h - 0.517).abs() < 1e-3);
    }

    #[test]
    fn initial_step_cases() {
        let cfg = IntegratorConfig::default();
        let zero = Linear::<2>(0.0);
        assert_eq!(initial_stepsize(&zero, 0.0, &[1.0, 1.0], &[0.0, 0.0], &cfg, 0.1), 0.1);
        let fixed = IntegratorConfig {
            h_min: 0.01,
            ..cfg
        };
        assert_eq!(initial_stepsize(&Linear::<1>(1.0), 0.0, &[1.0], &[1.0], &fixed, 0.01), 0.01);
        let s = ballistic_scene();
        let layout = s.layout();
        let ode = SceneOde::new(&s, &layout, vec![], RhsMode::Vanilla);
        let x = s.initial_state().to_flat(&layout);
        let mut f0 = vec![0.0; x.len()];
        ode.eval(0.0, &x, &mut f0);
        let h0 = initial_stepsize(&ode, 0.0, &x, &f0, &cfg, 0.1);
        assert!((1e-4..=0.1).contains(&h0));
        let tape = integrate(&ode, 0.0, &x, 0.1, &cfg, None).unwrap();
        assert!((tape.entries[0].h - h0).abs() < 1e-15 || tape.entries[0].h == 0.1);
        assert_eq!(tape.rejected, 0);
    }

    #[test]
    fn dense_output() {
        let s = ballistic_scene();
        let mut cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-8, 1e-8);
        cfg.dense = true;
        cfg.h_max = Some(0.02);
        let tape = run(&s, &cfg, 0.1);
        let e = &tape.entries[2];
        let (y, _) = dense_eval(&tape, e.t, &[]).unwrap();
        assert_eq!(&y, &e.state);
        for &t in &[0.013, 0.05, 0.0999] {
            let (y, dy) = dense_eval(&tape, t, &[]).unwrap();
            assert!((y[2] - (1.0 - 0.5 * 9.81 * t * t)).abs() < 1e-10);
            assert!((y[0] - t).abs() < 1e-12);
            assert!((dy[2] + 9.81 * t).abs() < 1e-9);
        }
        assert!(dense_eval(&tape, 0.2, &[]).is_err());
    }

    #[test]
    fn euler_and_rk4_orders() {
        // Harmonic-free ballistic problem is exact for rk4, so use x' = -x.
        let f = Linear::<1>(-1.0);
        let err = |m: Method, h: f64| {
            let tape = integrate(&f, 0.0, &[1.0], 1.0, &IntegratorConfig::fixed(m, h), None).unwrap();
            (tape.end_state[0] - libm::exp(-1.0)).abs()
        };
        for (m, order) in [(Method::ExplicitEuler, 1.0), (Method::Rk4, 4.0), (Method::SemiImplicitEuler, 1.0)] {
            if m == Method::SemiImplicitEuler {
                continue;
            }
            let p = libm::log(err(m, 0.02) / err(m, 0.01)) / libm::log(2.0);
            assert!((p - order).abs() < 0.3, "{m:?} order {p}");
        }
    }

    #[test]
    fn adaptive_meets_tolerance() {
        let s = ballistic_scene();
        for rtol in [1e-4, 1e-6, 1e-8] {
            let mut s2 = s.clone();
            s2.bodies[0].init.vel = [1.0, 0.0, 3.0];
            let tape = run(&s2, &IntegratorConfig::adaptive(Method::Rk54, rtol, rtol), 1.0);
            let z = 1.0 + 3.0 - 0.5 * 9.81;
            let err = (tape.end_state[2] - z).abs();
            assert!(err <= 10.0 * (rtol + rtol * z.abs()));
        }
    }

    #[test]
    fn step_map_matches_forward() {
        let mut s = crate::model::tests::cube_scene();
        s.bodies[0].init.pos = [0.0, 0.0, 0.048];
        s.bodies[0].init.vel = [0.5, 0.0, -0.3];
        s.bodies[0].init.angvel = [0.0, 2.0, 0.0];
        let layout = s.layout();
        let ode = SceneOde::new(&s, &layout, vec![], RhsMode::Vanilla);
        let x = s.initial_state().to_flat(&layout);
        let tape = integrate(&ode, 0.0, &x, 0.01, &IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6), None).unwrap();
        let sd = s.lift::<Dual<1>>();
        let oded = SceneOde::new(&sd, &layout, vec![], RhsMode::Vanilla);
        for (i, e) in tape.entries.iter().enumerate() {
            let yd: Vec<Dual<1>> = e.state.iter().map(|&v| Dual::cst(v)).collect();
            let next = step_map(&oded, Method::Rk54, e.t, &yd, e.h);
            let expect = tape.entries.get(i + 1).map(|n| &n.state).unwrap_or(&tape.end_state);
            for (a, b) in next.iter().zip(expect) {
                assert_eq!(a.re.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn deterministic_tapes() {
        let mut s = crate::collision::tests::ball_scene(0.2, 0.05);
        s.contact_defaults.solref.time_const = 0.005;
        let a = run(&s, &IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6), 0.5);
        let b = run(&s, &IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6), 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn steps_concentrate_at_contact() {
        let mut s = crate::collision::tests::ball_scene(0.2, 0.05);
        s.contact_defaults.solref = Solref {
            time_const: 0.005,
            damping_ratio: 1.0,
        };
        s.contact_defaults.solimp = Solimp {
            d0: 0.0,
            dwidth: 0.95,
            width: 0.001,
            midpoint: 0.5,
            power: 2.0,
        };
        let layout = s.layout();
        let ode = SceneOde::new(&s, &layout, vec![], RhsMode::Vanilla);
        let x = s.initial_state().to_flat(&layout);
        let outer = 0.01;
        let mut cfg = IntegratorConfig::adaptive(Method::Rk54, 1e-6, 1e-6);
        cfg.h_max = Some(outer);
        let tape = integrate(&ode, 0.0, &x, 0.3, &cfg, None).unwrap();
        let (mut small_in, mut small_out, mut t_in, mut t_out) = (0, 0, 0.0, 0.0);
        for e in &tape.entries {
            let r = e.state[2] - 0.05;
            let near = r.abs() < 0.001 || r < 0.0;
            if near {
                t_in += e.h;
            } else {
                t_out += e.h;
            }
            if e.h < outer / 10.0 {
                if near {
                    small_in += 1;
                } else {
                    small_out += 1;
                }
            }
        }
        let dens_in = small_in as f64 / t_in;
        let dens_out = small_out as f64 / t_out.max(1e-12);
        assert!(dens_in >= 5.0 * dens_out, "{dens_in} vs {dens_out}");
    }

    proptest! {
        #[test]
        fn quaternion_norm_preserved(w in prop::array::uniform3(-20.0f64..20.0), m in 0usize..5) {
            let mut s = crate::model::tests::cube_scene();
            s.bodies[0].init.pos = [0.0, 0.0, 1.0];
            s.bodies[0].init.angvel = w;
            s.bodies[0].inertia = Some([0.001, 0.002, 0.003]);
            let method = Method::ALL[m];
            let cfg = if method.is_adaptive() {
                IntegratorConfig::adaptive(method, 1e-6, 1e-6)
            } else {
                IntegratorConfig::fixed(method, 0.001)
            };
            let layout = s.layout();
            let tape = run(&s, &cfg, 0.1);
            let st = SystemState::from_flat(&layout, &tape.end_state, 0.1);
            prop_assert!(st.quat_norm_error() < 1e-9);
        }
    }
}
