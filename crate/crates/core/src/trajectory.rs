//! Stochastic conditional-mean trajectories under closed-loop LQR feedback.
//!
//! The conditional mean follows the Kalman-Bucy filter driven by the
//! measurement innovations,
//!
//! ```text
//! d<X> = (A - B K) <X> dt + 2 V_c C dW,        dy = 2 C^T <X> dt + dW,
//! ```
//!
//! integrated with Euler-Maruyama on the sampling grid of the precomputed
//! `V_c` and `K` schedules. Each trajectory draws its Wiener increments from
//! a ChaCha stream keyed by `(seed_base, index)`, so ensembles are
//! reproducible and independent of scheduling order.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix4, Vector2, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{drift_matrix, feedback_matrix, measurement_matrix, ModelConfig};
use crate::riccati::{grid_index, GainSchedule, PeriodicSolution};

/// Source of the Wiener increments `dW ~ N(0, dt I_2)`.
pub trait Increments {
    fn next_increment(&mut self, dt: f64) -> [f64; 2];
}

/// Counter-based Gaussian increments for trajectory `index` of ensemble `seed_base`.
#[derive(Debug, Clone)]
pub struct SeededIncrements {
    rng: ChaCha8Rng,
}

impl SeededIncrements {
    pub fn new(seed_base: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        rng.set_stream(index);
        Self { rng }
    }
}

impl Increments for SeededIncrements {
    fn next_increment(&mut self, dt: f64) -> [f64; 2] {
        let s = dt.sqrt();
        let a: f64 = StandardNormal.sample(&mut self.rng);
        let b: f64 = StandardNormal.sample(&mut self.rng);
        [a * s, b * s]
    }
}

/// Always returns `dW = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroIncrements;

impl Increments for ZeroIncrements {
    fn next_increment(&mut self, _dt: f64) -> [f64; 2] {
        [0.0, 0.0]
    }
}

/// Normalization of the emitted homodyne record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordNormalization {
    /// `dy = 2 C^T <X> dt + dW`, consistent with the `2 V_c C` innovation gain.
    #[default]
    Consistent,
    /// `dy = sqrt(eta K_ba) <x> dt + dW`, the literal photocurrent form.
    Literal,
}

/// One simulated trajectory. `records[i]` is the increment over
/// `[times[i-1], times[i]]` (zero at `i = 0`); `controls[i] = -K(t_i) <X>(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub means: Vec<[f64; 4]>,
    pub records: Vec<[f64; 2]>,
    pub controls: Vec<[f64; 2]>,
    /// Number of meaningful entries in each `controls` row.
    pub inputs: usize,
    pub seed: u64,
    pub index: u64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Writes the columnar dump: a `#` header naming the columns, then one
    /// whitespace-separated row per time with shortest round-trip floats.
    pub fn write_columns<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "# time x1 p1 x2 p2")?;
        for k in 0..self.inputs {
            write!(w, " u{}", k + 1)?;
        }
        writeln!(w, " dy1 dy2")?;
        for i in 0..self.len() {
            write!(w, "{}", self.times[i])?;
            for v in self.means[i] {
                write!(w, " {v}")?;
            }
            for v in &self.controls[i][..self.inputs] {
                write!(w, " {v}")?;
            }
            for v in self.records[i] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_columns(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Simulation window and options shared by single runs and ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub t0: f64,
    pub t1: f64,
    /// Euler-Maruyama step; a whole multiple of the schedule spacing.
    pub dt: f64,
    pub normalization: RecordNormalization,
}

struct Plan {
    start: usize,
    stride: usize,
    steps: usize,
    bk: Vec<Matrix4<f64>>,
    /// `2 V_c C` on the schedule grid.
    innovation: Vec<nalgebra::Matrix4x2<f64>>,
    drift: Vec<Matrix4<f64>>,
    /// `C^T` scaled by the record normalization.
    readout: Vec<nalgebra::Matrix2x4<f64>>,
}

impl Plan {
    fn new(
        cfg: &ModelConfig,
        vc: &PeriodicSolution,
        gains: &GainSchedule,
        spec: &SimSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        if vc.len() != gains.len() || (vc.period - gains.period).abs() > 1e-12 * vc.period {
            return Err(Error::GridMismatch(format!(
                "covariance grid ({} samples) and gain grid ({} samples) differ",
                vc.len(),
                gains.len()
            )));
        }
        let limit = 1e-3 * cfg.period();
        if !(spec.dt > 0.0) || spec.dt > limit * (1.0 + 1e-9) {
            return Err(Error::validation(format!(
                "dt = {} must lie in (0, 1e-3 * 2 pi / Omega = {limit:.6e}]",
                spec.dt
            )));
        }
        if !(spec.t1 >= spec.t0) {
            return Err(Error::validation("t_span must satisfy t1 >= t0"));
        }
        let spacing = vc.spacing();
        let ratio = spec.dt / spacing;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-6 * ratio {
            return Err(Error::GridMismatch(format!(
                "dt = {} is not a multiple of the schedule spacing {spacing}",
                spec.dt
            )));
        }
        let start = grid_index(spacing, spec.t0)?;
        let steps = ((spec.t1 - spec.t0) / spec.dt).round() as usize;
        let b = feedback_matrix(cfg.strategy, cfg.charge_ratio)?;
        let scale = match spec.normalization {
            RecordNormalization::Consistent => 2.0,
            RecordNormalization::Literal => 1.0,
        };
        let n = vc.len();
        let mut bk = Vec::with_capacity(n);
        let mut innovation = Vec::with_capacity(n);
        let mut drift = Vec::with_capacity(n);
        let mut readout = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * spacing;
            let c = measurement_matrix(t, cfg);
            bk.push(b * gains.at(i));
            innovation.push(vc.at(i).matrix() * c * 2.0);
            drift.push(drift_matrix(t, cfg));
            readout.push(c.transpose() * scale);
        }
        Ok(Self {
            start,
            stride: stride as usize,
            steps,
            bk,
            innovation,
            drift,
            readout,
        })
    }
}

/// Euler-Maruyama closed-loop run from `x0` with the given increment source.
pub fn simulate_with<I: Increments + ?Sized>(
    cfg: &ModelConfig,
    vc: &PeriodicSolution,
    gains: &GainSchedule,
    spec: &SimSpec,
    x0: [f64; 4],
    noise: &mut I,
) -> Result<TrajectoryRecord> {
    let plan = Plan::new(cfg, vc, gains, spec)?;
    let n = vc.len();
    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(plan.steps + 1),
        means: Vec::with_capacity(plan.steps + 1),
        records: Vec::with_capacity(plan.steps + 1),
        controls: Vec::with_capacity(plan.steps + 1),
        inputs: gains.inputs,
        seed: 0,
        index: 0,
    };
    let mut x = Vector4::from(x0);
    let control = |i: usize, x: &Vector4<f64>| {
        let u = -(gains.at(i) * x);
        [u[0] + 0.0, u[1] + 0.0]
    };
    rec.times.push(spec.t0);
    rec.means.push(x.into());
    rec.records.push([0.0, 0.0]);
    rec.controls.push(control(plan.start % n, &x));
    for s in 0..plan.steps {
        let i = (plan.start + s * plan.stride) % n;
        let dw = Vector2::from(noise.next_increment(spec.dt));
        let dy = plan.readout[i] * x * spec.dt + dw;
        x += (plan.drift[i] - plan.bk[i]) * x * spec.dt + plan.innovation[i] * dw;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: s + 1 });
        }
        let j = (plan.start + (s + 1) * plan.stride) % n;
        rec.times.push(spec.t0 + (s + 1) as f64 * spec.dt);
        rec.means.push(x.into());
        rec.records.push([dy[0], dy[1]]);
        rec.controls.push(control(j, &x));
    }
    Ok(rec)
}

/// Closed-loop trajectory from `<X> = 0` driven by seeded increments.
pub fn simulate_closed_loop(
    cfg: &ModelConfig,
    vc: &PeriodicSolution,
    gains: &GainSchedule,
    spec: &SimSpec,
    seed_base: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    let mut noise = SeededIncrements::new(seed_base, index);
    let mut rec = simulate_with(cfg, vc, gains, spec, [0.0; 4], &mut noise)?;
    rec.seed = seed_base;
    rec.index = index;
    Ok(rec)
}

/// Empirical first and second moments of `<X>_c` across an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean: Vec<Vector4<f64>>,
    pub mean_se: Vec<Vector4<f64>>,
    /// Unbiased sample covariance.
    pub cov: Vec<Matrix4<f64>>,
    /// Standard error of each covariance entry.
    pub cov_se: Vec<Matrix4<f64>>,
    pub n_trajectories: usize,
    pub seed_base: u64,
}

/// Runs `n` independent trajectories (indices `0..n`) and reduces their
/// states every `record_every` steps. The reduction runs in index order, so
/// the result is bit-identical for any thread count.
pub fn ensemble_statistics(
    cfg: &ModelConfig,
    vc: &PeriodicSolution,
    gains: &GainSchedule,
    spec: &SimSpec,
    n: usize,
    seed_base: u64,
    record_every: usize,
) -> Result<EnsembleStats> {
    if n < 2 {
        return Err(Error::validation("ensemble needs at least 2 trajectories"));
    }
    if record_every == 0 {
        return Err(Error::validation("record_every must be >= 1"));
    }
    let runs: Vec<Vec<Vector4<f64>>> = (0..n as u64)
        .into_par_iter()
        .map(|index| {
            let rec = simulate_closed_loop(cfg, vc, gains, spec, seed_base, index).map_err(
                |e| Error::Trajectory {
                    index,
                    source: Box::new(e),
                },
            )?;
            Ok(rec
                .means
                .iter()
                .step_by(record_every)
                .map(|m| Vector4::from(*m))
                .collect())
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = (0..runs[0].len())
        .map(|k| spec.t0 + (k * record_every) as f64 * spec.dt)
        .collect();
    let nf = n as f64;
    let mut stats = EnsembleStats {
        times,
        mean: Vec::new(),
        mean_se: Vec::new(),
        cov: Vec::new(),
        cov_se: Vec::new(),
        n_trajectories: n,
        seed_base,
    };
    for k in 0..runs[0].len() {
        let mean = runs.iter().map(|r| r[k]).sum::<Vector4<f64>>() / nf;
        let mut cov = Matrix4::zeros();
        for r in &runs {
            let d = r[k] - mean;
            cov += d * d.transpose();
        }
        cov /= nf - 1.0;
        let mut var_prod = Matrix4::zeros();
        for r in &runs {
            let d = r[k] - mean;
            let dev = d * d.transpose() - cov;
            var_prod += dev.component_mul(&dev);
        }
        var_prod /= nf - 1.0;
        stats.mean_se.push(cov.diagonal().map(|v| (v / nf).sqrt()));
        stats.cov_se.push(var_prod.map(|v| (v / nf).sqrt()));
        stats.mean.push(mean);
        stats.cov.push(cov);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::{backward_control_riccati, periodic_steady_state, Numerics};

    fn setup(alpha: f64) -> (ModelConfig, PeriodicSolution, GainSchedule) {
        let cfg = ModelConfig {
            alpha,
            g: 0.2,
            ..ModelConfig::default()
        };
        let num = Numerics {
            steps_per_period: 1000,
            tol: 1e-7,
            ..Numerics::default()
        };
        let vc = periodic_steady_state(&cfg, &num).unwrap();
        let gains = backward_control_riccati(&cfg, &num).unwrap();
        (cfg, vc, gains)
    }

    fn spec(vc: &PeriodicSolution, periods: f64) -> SimSpec {
        SimSpec {
            t0: 0.0,
            t1: periods * vc.period,
            dt: 2.0 * vc.spacing(),
            normalization: RecordNormalization::Consistent,
        }
    }

    #[test]
    fn origin_is_a_fixed_point_without_noise() {
        let (cfg, vc, gains) = setup(0.2);
        let rec = simulate_with(&cfg, &vc, &gains, &spec(&vc, 2.0), [0.0; 4], &mut ZeroIncrements)
            .unwrap();
        assert!(rec.means.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        assert!(rec.controls.iter().all(|u| u.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn same_seed_same_record() {
        let (cfg, vc, gains) = setup(0.2);
        let s = spec(&vc, 1.0);
        let a = simulate_closed_loop(&cfg, &vc, &gains, &s, 7, 3).unwrap();
        let b = simulate_closed_loop(&cfg, &vc, &gains, &s, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_closed_loop(&cfg, &vc, &gains, &s, 7, 4).unwrap();
        assert_ne!(a.means, c.means);
        assert_eq!(a.len(), a.records.len());
        assert_eq!(a.len(), a.controls.len());
    }

    #[test]
    fn dt_must_respect_grid_and_bound() {
        let (cfg, vc, gains) = setup(0.0);
        let mut s = spec(&vc, 1.0);
        s.dt = 1.5 * vc.spacing();
        assert!(matches!(
            simulate_closed_loop(&cfg, &vc, &gains, &s, 0, 0),
            Err(Error::GridMismatch(_))
        ));
        s.dt = vc.period * 0.01;
        assert!(matches!(
            simulate_closed_loop(&cfg, &vc, &gains, &s, 0, 0),
            Err(Error::Validation(_))
        ));
        let short = GainSchedule::zero(vc.period, vc.len() / 2, 2);
        assert!(matches!(
            simulate_closed_loop(&cfg, &vc, &short, &spec(&vc, 1.0), 0, 0),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn dump_has_header_and_rows() {
        let (cfg, vc, gains) = setup(0.0);
        let rec = simulate_closed_loop(&cfg, &vc, &gains, &spec(&vc, 0.1), 1, 0).unwrap();
        let mut buf = Vec::new();
        rec.write_columns(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# time x1 p1 x2 p2 u1 u2 dy1 dy2");
        let row: Vec<f64> = lines
            .nth(1)
            .unwrap()
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row.len(), 9);
        assert_eq!(row[1], rec.means[1][0]);
    }
}
