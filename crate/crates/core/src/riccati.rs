//! Deterministic matrix flows: the conditional covariance (Kalman) Riccati
//! equation, the backward LQR Riccati equation and the excess-noise Lyapunov
//! equation, all integrated with fixed-step RK4 and symmetrized every step.

use nalgebra::{Matrix2x4, Matrix4};

use crate::error::{Error, Result};
use crate::gaussian::CovMatrix4;
use crate::model::{
    self, drift_from_frequency, drift_matrix, feedback_matrix, gain_from_cost_to_go,
    input_weight, ModelConfig,
};

/// Largest step accepted by the free-running integrators, `1e-3 * 2 pi`.
pub const MAX_DT: f64 = 1e-3 * std::f64::consts::TAU;

/// Step-size and convergence controls shared by the periodic solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerics {
    /// RK4 steps per modulation period.
    pub steps_per_period: usize,
    /// Sup-norm distance between consecutive periods that counts as converged.
    pub tol: f64,
    pub max_periods: usize,
    /// Max-abs entry above which a flow is declared divergent.
    pub divergence: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            steps_per_period: 2000,
            tol: 1e-8,
            max_periods: 500,
            divergence: 1e12,
        }
    }
}

impl Numerics {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_period < 2 {
            return Err(Error::validation("steps_per_period must be >= 2"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("tol must be > 0"));
        }
        if self.max_periods == 0 {
            return Err(Error::validation("max_periods must be >= 1"));
        }
        if !(self.divergence > 0.0) {
            return Err(Error::validation("divergence threshold must be > 0"));
        }
        Ok(())
    }
}

pub type CovSeries = Vec<(f64, CovMatrix4)>;

/// One period of a converged periodic covariance flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSolution {
    /// Uniform samples `t_j = j * period / len` for `j = 0..len`.
    pub samples: CovSeries,
    pub period: f64,
    pub converged: bool,
    pub residual: f64,
    /// Periods integrated before convergence.
    pub periods: usize,
}

impl PeriodicSolution {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.samples.len() as f64
    }

    /// Sample at grid index `i`, wrapped periodically.
    pub fn at(&self, i: usize) -> &CovMatrix4 {
        &self.samples[i % self.samples.len()].1
    }
}

/// Periodic optimal feedback gain `K_opt(t) = Q^-1 B^T Sigma(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    /// Uniform samples `(t_j, K_opt(t_j))`; rows beyond `inputs` are zero.
    pub samples: Vec<(f64, Matrix2x4<f64>)>,
    /// Cost-to-go matrix `Sigma(t_j)` on the same grid.
    pub cost_to_go: Vec<Matrix4<f64>>,
    pub period: f64,
    pub inputs: usize,
    pub converged: bool,
    pub residual: f64,
}

impl GainSchedule {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn at(&self, i: usize) -> &Matrix2x4<f64> {
        &self.samples[i % self.samples.len()].1
    }

    /// Zero gain on the given grid, i.e. no feedback.
    pub fn zero(period: f64, len: usize, inputs: usize) -> Self {
        let h = period / len as f64;
        Self {
            samples: (0..len).map(|j| (j as f64 * h, Matrix2x4::zeros())).collect(),
            cost_to_go: vec![Matrix4::zeros(); len],
            period,
            inputs,
            converged: true,
            residual: 0.0,
        }
    }
}

fn rk4_step<F>(f: &F, t: f64, x: &Matrix4<f64>, h: f64) -> Matrix4<f64>
where
    F: Fn(f64, &Matrix4<f64>) -> Matrix4<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + k3 * h));
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    (next + next.transpose()) * 0.5
}

/// Right-hand side of the conditional covariance equation
/// `A V + V A^T + N - 4 V C C^T V`.
pub fn conditional_rhs(t: f64, v: &Matrix4<f64>, cfg: &ModelConfig) -> Matrix4<f64> {
    let wx = model::omega_x(t, cfg);
    let a = drift_from_frequency(wx, cfg);
    let kba = cfg.kba_ratio * wx;
    let av = a * v;
    let mut out = av + av.transpose();
    let diffusion = kba + cfg.kth;
    out[(1, 1)] += diffusion;
    out[(3, 3)] += diffusion;
    // C C^T = eta K_ba diag(1, 0, 1, 0)
    let meas = 4.0 * cfg.eta * kba;
    if meas != 0.0 {
        let c0 = v.column(0);
        let c2 = v.column(2);
        out -= (c0 * c0.transpose() + c2 * c2.transpose()) * meas;
    }
    out
}

fn check_dt(dt: f64, limit: f64) -> Result<()> {
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::validation(format!(
            "dt = {dt} must lie in (0, {limit:.6e}]"
        )));
    }
    Ok(())
}

fn diverged(m: &Matrix4<f64>, threshold: f64) -> bool {
    !m.iter().all(|v| v.is_finite()) || m.amax() > threshold
}

/// Integrates the conditional covariance from `v0` over `[t0, t1]` with RK4.
///
/// Returns the samples at every step, `t0` included.
pub fn integrate_conditional_covariance(
    v0: &CovMatrix4,
    cfg: &ModelConfig,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<CovSeries> {
    cfg.validate()?;
    check_dt(dt, MAX_DT)?;
    if !(t1 >= t0) {
        return Err(Error::validation("t_span must satisfy t1 >= t0"));
    }
    v0.ensure_physical()?;
    let steps = ((t1 - t0) / dt).round() as usize;
    let f = |t: f64, v: &Matrix4<f64>| conditional_rhs(t, v, cfg);
    let divergence = Numerics::default().divergence;
    let mut out = Vec::with_capacity(steps + 1);
    let mut v = *v0.matrix();
    out.push((t0, *v0));
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        v = rk4_step(&f, t, &v, dt);
        if diverged(&v, divergence) {
            return Err(Error::Instability {
                time: t + dt,
                reason: "conditional covariance norm exceeded threshold".into(),
            });
        }
        let state = CovMatrix4::symmetrized(v);
        state.ensure_physical()?;
        out.push((t0 + (i + 1) as f64 * dt, state));
    }
    Ok(out)
}

/// Outcome of repeatedly integrating a periodic flow one period at a time.
struct PeriodicRun {
    state: Matrix4<f64>,
    residual: f64,
    periods: usize,
}

enum Stall {
    /// Exceeded the divergence threshold at the given elapsed time.
    Diverged(f64),
    /// Residuals stopped shrinking while the state kept growing.
    Secular(f64, f64),
    Unconverged(f64),
}

/// Integrates `f` period by period from `x0` until consecutive period-start
/// states agree within `num.tol`. `f` is evaluated at elapsed time.
fn converge_periodic<F>(
    f: &F,
    x0: Matrix4<f64>,
    period: f64,
    num: &Numerics,
) -> std::result::Result<PeriodicRun, (Stall, usize)>
where
    F: Fn(f64, &Matrix4<f64>) -> Matrix4<f64>,
{
    let n = num.steps_per_period;
    let h = period / n as f64;
    let mut x = x0;
    let mut residuals: Vec<f64> = Vec::with_capacity(num.max_periods);
    let mut sizes: Vec<f64> = Vec::with_capacity(num.max_periods);
    for k in 0..num.max_periods {
        let start = x;
        for i in 0..n {
            x = rk4_step(f, i as f64 * h, &x, h);
            if diverged(&x, num.divergence) {
                let elapsed = k as f64 * period + (i + 1) as f64 * h;
                return Err((Stall::Diverged(elapsed), k + 1));
            }
        }
        let residual = (x - start).amax();
        if residual < num.tol {
            return Ok(PeriodicRun {
                state: x,
                residual,
                periods: k + 1,
            });
        }
        residuals.push(residual);
        sizes.push(x.trace());
    }
    let last = *residuals.last().unwrap_or(&f64::NAN);
    // Linear (marginal) growth never trips the divergence threshold. Flag it
    // when the trace, sampled every BLOCK periods, rises steadily without the
    // increments decaying.
    const BLOCK: usize = 10;
    const BLOCKS: usize = 10;
    if sizes.len() > BLOCK * BLOCKS {
        let samples: Vec<f64> = (0..=BLOCKS)
            .map(|b| sizes[sizes.len() - 1 - BLOCK * (BLOCKS - b)])
            .collect();
        let steps: Vec<f64> = samples.windows(2).map(|w| w[1] - w[0]).collect();
        let rising = steps.iter().all(|d| *d > 0.0);
        if rising && steps[BLOCKS - 1] >= 0.5 * steps[0] {
            return Err((
                Stall::Secular(num.max_periods as f64 * period, last),
                num.max_periods,
            ));
        }
    }
    Err((Stall::Unconverged(last), num.max_periods))
}

/// Integrates the conditional covariance from the vacuum until it repeats
/// every modulation period, then returns one period sampled at half steps.
pub fn periodic_steady_state(cfg: &ModelConfig, num: &Numerics) -> Result<PeriodicSolution> {
    cfg.validate()?;
    num.validate()?;
    let period = cfg.period();
    let f = |t: f64, v: &Matrix4<f64>| conditional_rhs(t, v, cfg);
    let run = converge_periodic(&f, *CovMatrix4::vacuum().matrix(), period, num).map_err(
        |(stall, periods)| match stall {
            Stall::Diverged(time) => Error::Instability {
                time,
                reason: "conditional covariance norm exceeded threshold".into(),
            },
            Stall::Secular(time, residual) => Error::Instability {
                time,
                reason: format!(
                    "conditional covariance grows without bound (period residual {residual:.3e})"
                ),
            },
            Stall::Unconverged(residual) => Error::NonConvergence { periods, residual },
        },
    )?;
    let samples = record_period(&f, run.state, period, 2 * num.steps_per_period);
    for (_, s) in &samples {
        s.ensure_physical()?;
    }
    Ok(PeriodicSolution {
        samples,
        period,
        converged: true,
        residual: run.residual,
        periods: run.periods,
    })
}

fn record_period<F>(f: &F, x0: Matrix4<f64>, period: f64, len: usize) -> CovSeries
where
    F: Fn(f64, &Matrix4<f64>) -> Matrix4<f64>,
{
    let h = period / len as f64;
    let mut x = x0;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let t = j as f64 * h;
        out.push((t, CovMatrix4::symmetrized(x)));
        x = rk4_step(f, t, &x, h);
    }
    out
}

/// Backward LQR Riccati flow `-dSigma/dt = A^T Sigma + Sigma A + P - Sigma B Q^-1 B^T Sigma`
/// from `Sigma = 0`, continued until periodic. Returns one period of gains on a
/// half-step grid.
pub fn backward_control_riccati(cfg: &ModelConfig, num: &Numerics) -> Result<GainSchedule> {
    cfg.validate()?;
    backward_riccati_with(cfg, num, |t| drift_matrix(t, cfg))
}

/// LQR gain computed from the period-averaged drift (`<omega_x> = 1 + alpha^2/2`),
/// held constant over the period.
pub fn stationary_control_gain(cfg: &ModelConfig, num: &Numerics) -> Result<GainSchedule> {
    cfg.validate()?;
    let mean_wx = 1.0 + 0.5 * cfg.alpha * cfg.alpha;
    let a = drift_from_frequency(mean_wx, cfg);
    backward_riccati_with(cfg, num, move |_| a)
}

fn backward_riccati_with<D>(cfg: &ModelConfig, num: &Numerics, drift: D) -> Result<GainSchedule>
where
    D: Fn(f64) -> Matrix4<f64>,
{
    num.validate()?;
    let b = feedback_matrix(cfg.strategy, cfg.charge_ratio)?;
    let q = model::effort_matrix(cfg);
    let inputs = cfg.strategy.inputs();
    let w = input_weight(&b, &q, inputs);
    let g_mat = w * b.transpose();
    let p = model::state_cost_matrix(cfg);
    let period = cfg.period();
    // s = -t is the integration variable; A is evaluated at t = -s.
    let f = |s: f64, sig: &Matrix4<f64>| {
        let a = drift(-s);
        let at_sig = a.transpose() * sig;
        at_sig + at_sig.transpose() + p - sig * g_mat * sig
    };
    let run = converge_periodic(&f, Matrix4::zeros(), period, num).map_err(|(stall, periods)| {
        match stall {
            Stall::Diverged(_) | Stall::Secular(..) => Error::Uncontrollable(format!(
                "cost-to-go grows without bound after {periods} periods"
            )),
            Stall::Unconverged(residual) => Error::NonConvergence { periods, residual },
        }
    })?;
    let len = 2 * num.steps_per_period;
    let backward = record_period(&f, run.state, period, len);
    // backward[j] holds Sigma at t = -j h, i.e. grid index (len - j) mod len
    let h = period / len as f64;
    let mut cost_to_go = vec![Matrix4::zeros(); len];
    for (j, (_, sig)) in backward.iter().enumerate() {
        cost_to_go[(len - j) % len] = *sig.matrix();
    }
    let samples = cost_to_go
        .iter()
        .enumerate()
        .map(|(i, sig)| (i as f64 * h, gain_from_cost_to_go(sig, &b, &q, inputs)))
        .collect();
    Ok(GainSchedule {
        samples,
        cost_to_go,
        period,
        inputs,
        converged: true,
        residual: run.residual,
    })
}

/// Excess noise and unconditional covariance on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessNoiseSeries {
    pub times: Vec<f64>,
    pub v_ex: Vec<CovMatrix4>,
    pub v_u: Vec<CovMatrix4>,
    pub converged: bool,
    pub residual: f64,
}

fn check_grids(vc: &PeriodicSolution, gains: &GainSchedule) -> Result<()> {
    if vc.len() != gains.len() || (vc.period - gains.period).abs() > 1e-12 * vc.period {
        return Err(Error::GridMismatch(format!(
            "covariance grid has {} samples over {}, gain grid {} over {}",
            vc.len(),
            vc.period,
            gains.len(),
            gains.period
        )));
    }
    Ok(())
}

/// Number of grid samples per step of size `dt`; errors unless `dt` is an
/// even multiple of the grid spacing.
fn grid_stride(spacing: f64, dt: f64, even: bool) -> Result<usize> {
    let ratio = dt / spacing;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-6 * ratio || (even && !(k as usize).is_multiple_of(2)) {
        return Err(Error::GridMismatch(format!(
            "dt = {dt} is not {} multiple of the grid spacing {spacing}",
            if even { "an even" } else { "a" }
        )));
    }
    Ok(k as usize)
}

pub(crate) fn grid_index(spacing: f64, t: f64) -> Result<usize> {
    let r = t / spacing;
    let k = r.round();
    if k < 0.0 || (r - k).abs() > 1e-6 {
        return Err(Error::GridMismatch(format!(
            "start time {t} is not on the sampling grid (spacing {spacing})"
        )));
    }
    Ok(k as usize)
}

struct ClosedLoop<'a> {
    vc: &'a PeriodicSolution,
    cfg: &'a ModelConfig,
    bk: Vec<Matrix4<f64>>,
}

impl<'a> ClosedLoop<'a> {
    fn new(vc: &'a PeriodicSolution, gains: &'a GainSchedule, cfg: &'a ModelConfig) -> Result<Self> {
        let b = feedback_matrix(cfg.strategy, cfg.charge_ratio)?;
        let bk = gains.samples.iter().map(|(_, k)| b * k).collect();
        Ok(Self { vc, cfg, bk })
    }

    /// RHS at grid index `idx`: `M X + X M^T + 4 V_c C C^T V_c`, `M = A - B K`.
    fn rhs(&self, idx: usize, x: &Matrix4<f64>) -> Matrix4<f64> {
        let n = self.vc.len();
        let i = idx % n;
        let t = i as f64 * self.vc.spacing();
        let m = drift_matrix(t, self.cfg) - self.bk[i];
        let mx = m * x;
        let vc = self.vc.at(i).matrix();
        let meas = 4.0 * self.cfg.eta * self.cfg.kba(t);
        let c0 = vc.column(0);
        let c2 = vc.column(2);
        mx + mx.transpose() + (c0 * c0.transpose() + c2 * c2.transpose()) * meas
    }

    /// RK4 step of length `2 * stride` grid samples starting at grid index `idx`.
    fn step(&self, idx: usize, stride: usize, x: &Matrix4<f64>) -> Matrix4<f64> {
        let h = 2.0 * stride as f64 * self.vc.spacing();
        let k1 = self.rhs(idx, x);
        let k2 = self.rhs(idx + stride, &(x + k1 * (0.5 * h)));
        let k3 = self.rhs(idx + stride, &(x + k2 * (0.5 * h)));
        let k4 = self.rhs(idx + 2 * stride, &(x + k3 * h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        (next + next.transpose()) * 0.5
    }
}

/// Integrates `dV_ex/dt = (A - BK) V_ex + V_ex (A - BK)^T + 4 V_c C C^T V_c`
/// from `V_ex(t0) = 0` over `[t0, t1]`, with `V_c` and `K` read from their
/// periodic schedules. `dt` must be an even multiple of the schedule spacing
/// and `t0` a grid point.
pub fn excess_noise_evolution(
    vc: &PeriodicSolution,
    gains: &GainSchedule,
    cfg: &ModelConfig,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<ExcessNoiseSeries> {
    cfg.validate()?;
    check_grids(vc, gains)?;
    if !(t1 >= t0) {
        return Err(Error::validation("t_span must satisfy t1 >= t0"));
    }
    let spacing = vc.spacing();
    let stride = grid_stride(spacing, dt, true)? / 2;
    let start = grid_index(spacing, t0)?;
    let loop_ = ClosedLoop::new(vc, gains, cfg)?;
    let steps = ((t1 - t0) / dt).round() as usize;
    let divergence = Numerics::default().divergence;
    let mut x = Matrix4::zeros();
    let mut series = ExcessNoiseSeries {
        times: Vec::with_capacity(steps + 1),
        v_ex: Vec::with_capacity(steps + 1),
        v_u: Vec::with_capacity(steps + 1),
        converged: false,
        residual: f64::NAN,
    };
    let push = |series: &mut ExcessNoiseSeries, step: usize, x: &Matrix4<f64>| {
        let idx = start + 2 * stride * step;
        series.times.push(t0 + step as f64 * dt);
        series.v_ex.push(CovMatrix4::symmetrized(*x));
        series
            .v_u
            .push(CovMatrix4::symmetrized(vc.at(idx).matrix() + x));
    };
    push(&mut series, 0, &x);
    for s in 0..steps {
        x = loop_.step(start + 2 * stride * s, stride, &x);
        if diverged(&x, divergence) {
            return Err(Error::Instability {
                time: t0 + (s + 1) as f64 * dt,
                reason: "closed-loop excess noise diverged".into(),
            });
        }
        push(&mut series, s + 1, &x);
    }
    Ok(series)
}

/// Periodic steady state of the excess-noise flow, sampled every
/// `period / num.steps_per_period` over one period.
pub fn periodic_excess_noise(
    vc: &PeriodicSolution,
    gains: &GainSchedule,
    cfg: &ModelConfig,
    num: &Numerics,
) -> Result<ExcessNoiseSeries> {
    cfg.validate()?;
    num.validate()?;
    check_grids(vc, gains)?;
    if !vc.len().is_multiple_of(2) {
        return Err(Error::GridMismatch("schedule length must be even".into()));
    }
    let loop_ = ClosedLoop::new(vc, gains, cfg)?;
    let steps = vc.len() / 2;
    let dt = 2.0 * vc.spacing();
    let mut x = Matrix4::zeros();
    let mut residual = f64::NAN;
    for k in 0..num.max_periods {
        let start = x;
        for s in 0..steps {
            x = loop_.step(2 * s, 1, &x);
            if diverged(&x, num.divergence) {
                return Err(Error::Instability {
                    time: k as f64 * vc.period + (s + 1) as f64 * dt,
                    reason: "closed-loop excess noise diverged".into(),
                });
            }
        }
        residual = (x - start).amax();
        if residual < num.tol {
            let mut series = ExcessNoiseSeries {
                times: Vec::with_capacity(steps),
                v_ex: Vec::with_capacity(steps),
                v_u: Vec::with_capacity(steps),
                converged: true,
                residual,
            };
            for s in 0..steps {
                series.times.push(s as f64 * dt);
                series.v_ex.push(CovMatrix4::symmetrized(x));
                series
                    .v_u
                    .push(CovMatrix4::symmetrized(vc.at(2 * s).matrix() + x));
                x = loop_.step(2 * s, 1, &x);
            }
            return Ok(series);
        }
    }
    Err(Error::NonConvergence {
        periods: num.max_periods,
        residual,
    })
}

/// Classification returned by [`stability_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stability {
    Stable,
    Unstable { blow_up_time: f64 },
}

/// Integrates the conditional covariance from the vacuum over `horizon`
/// (units of `1/omega_m`) and reports whether its norm crosses the divergence
/// threshold.
pub fn stability_probe(cfg: &ModelConfig, horizon: f64, num: &Numerics) -> Stability {
    let h = cfg.period() / num.steps_per_period as f64;
    let steps = (horizon / h).ceil() as usize;
    let f = |t: f64, v: &Matrix4<f64>| conditional_rhs(t, v, cfg);
    let mut v = *CovMatrix4::vacuum().matrix();
    for i in 0..steps {
        v = rk4_step(&f, i as f64 * h, &v, h);
        if diverged(&v, num.divergence) {
            return Stability::Unstable {
                blow_up_time: (i + 1) as f64 * h,
            };
        }
    }
    Stability::Stable
}
