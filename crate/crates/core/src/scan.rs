//! Entanglement and squeezing metrics over periodic solutions, and parameter
//! scans that evaluate them cell by cell.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logarithmic_negativity, normal_mode_blocks, squeezing_degree, CovMatrix4};
use crate::model::ModelConfig;
use crate::pipeline::{unconditional_steady_state, GainMode};
use crate::riccati::{periodic_steady_state, Numerics};

/// Per-sample logarithmic negativity of a covariance series.
pub fn entanglement_time_series(series: &[(f64, CovMatrix4)]) -> Result<Vec<(f64, f64)>> {
    series
        .iter()
        .map(|(t, v)| Ok((*t, logarithmic_negativity(v)?)))
        .collect()
}

/// Per-sample normal-mode squeezing `(S+, S-)` in dB.
pub fn squeezing_time_series(series: &[(f64, CovMatrix4)]) -> Result<Vec<(f64, f64, f64)>> {
    series
        .iter()
        .map(|(t, v)| {
            let blocks = normal_mode_blocks(v);
            Ok((
                *t,
                squeezing_degree(&blocks.sigma_plus)?,
                squeezing_degree(&blocks.sigma_minus)?,
            ))
        })
        .collect()
}

/// Arithmetic mean over the final `period` of a uniformly sampled series.
pub fn period_average(series: &[(f64, f64)], period: f64) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::validation("series needs at least two samples"));
    }
    let h = series[1].0 - series[0].0;
    if !(h > 0.0) || !(period > 0.0) {
        return Err(Error::validation("series must be increasing and period > 0"));
    }
    let per_period = (period / h).round() as usize;
    let span = series.last().unwrap().0 - series[0].0 + h;
    if per_period == 0 || per_period > series.len() || span < period * (1.0 - 1e-9) {
        return Err(Error::validation(format!(
            "series spans {span:.4}, shorter than one period {period:.4}"
        )));
    }
    let tail = &series[series.len() - per_period..];
    Ok(tail.iter().map(|(_, v)| v).sum::<f64>() / per_period as f64)
}

/// Scalar evaluated per parameter point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Period-averaged `E_N` of the conditional state.
    ConditionalEn,
    /// Period-averaged `E_N` of `V_u = V_c + V_ex`.
    UnconditionalEn,
    /// Period-averaged squeezing of the common mode, dB.
    SqueezePlus,
    /// Period-averaged squeezing of the differential mode, dB.
    SqueezeMinus,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ConditionalEn => "conditional_en",
            Metric::UnconditionalEn => "unconditional_en",
            Metric::SqueezePlus => "squeeze_plus",
            Metric::SqueezeMinus => "squeeze_minus",
        }
    }
}

/// A swept model parameter, named by its config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanParam {
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "omega_mod_over_omega_m")]
    OmegaMod,
    #[serde(rename = "g_over_omega_m")]
    G,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "q_over_omega_m")]
    Q,
    #[serde(rename = "charge_ratio")]
    ChargeRatio,
    #[serde(rename = "kba_over_omega_x")]
    KbaRatio,
    #[serde(rename = "kth_over_omega_m")]
    Kth,
    #[serde(rename = "gamma_over_omega_m")]
    Gamma,
}

impl ScanParam {
    pub fn name(self) -> &'static str {
        match self {
            ScanParam::Alpha => "alpha",
            ScanParam::OmegaMod => "omega_mod_over_omega_m",
            ScanParam::G => "g_over_omega_m",
            ScanParam::Eta => "eta",
            ScanParam::Q => "q_over_omega_m",
            ScanParam::ChargeRatio => "charge_ratio",
            ScanParam::KbaRatio => "kba_over_omega_x",
            ScanParam::Kth => "kth_over_omega_m",
            ScanParam::Gamma => "gamma_over_omega_m",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig, value: f64) {
        match self {
            ScanParam::Alpha => cfg.alpha = value,
            ScanParam::OmegaMod => cfg.omega_mod = value,
            ScanParam::G => cfg.g = value,
            ScanParam::Eta => cfg.eta = value,
            ScanParam::Q => cfg.q = value,
            ScanParam::ChargeRatio => cfg.charge_ratio = value,
            ScanParam::KbaRatio => cfg.kba_ratio = value,
            ScanParam::Kth => cfg.kth = value,
            ScanParam::Gamma => cfg.gamma = value,
        }
    }
}

/// Evenly spaced samples of one parameter, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub param: ScanParam,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + step * i as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::validation(format!(
                "axis {} needs finite bounds and count >= 1",
                self.param.name()
            )));
        }
        Ok(())
    }
}

/// Options shared by every cell of a scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub numerics: Numerics,
    pub gain_mode: GainMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            numerics: Numerics::default(),
            gain_mode: GainMode::Periodic,
        }
    }
}

fn average_of(series: Vec<(f64, f64)>, period: f64) -> Result<f64> {
    period_average(&series, period)
}

/// Runs the pipeline at one parameter point and reduces it to `metric`.
pub fn evaluate_metric(cfg: &ModelConfig, metric: Metric, opts: &EvalOptions) -> Result<f64> {
    match metric {
        Metric::UnconditionalEn => {
            let state = unconditional_steady_state(cfg, &opts.numerics, opts.gain_mode)?;
            let series = entanglement_time_series(&state.unconditional_series())?;
            average_of(series, state.conditional.period)
        }
        _ => {
            let sol = periodic_steady_state(cfg, &opts.numerics)?;
            let series = match metric {
                Metric::ConditionalEn => entanglement_time_series(&sol.samples)?,
                Metric::SqueezePlus | Metric::SqueezeMinus => {
                    let plus = metric == Metric::SqueezePlus;
                    squeezing_time_series(&sol.samples)?
                        .into_iter()
                        .map(|(t, sp, sm)| (t, if plus { sp } else { sm }))
                        .collect()
                }
                Metric::UnconditionalEn => unreachable!(),
            };
            average_of(series, sol.period)
        }
    }
}

/// Sampled parameter axis of a [`ScanGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

/// A cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    /// Column (x) index.
    pub i: usize,
    /// Row (y) index.
    pub j: usize,
    pub class: String,
    pub message: String,
}

/// A metric sampled on a 2-D parameter grid. `values[j][i]` belongs to
/// `(x[i], y[j])`; failed cells hold `NaN` and appear in `failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub x: Axis,
    pub y: Axis,
    pub metric: Metric,
    pub values: Vec<Vec<f64>>,
    pub failures: Vec<CellFailure>,
}

impl ScanGrid {
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[j][i];
        (!v.is_nan()).then_some(v)
    }

    pub fn computed_count(&self) -> usize {
        self.x.values.len() * self.y.values.len() - self.failures.len()
    }

    pub fn status(&self, i: usize, j: usize) -> &str {
        self.failures
            .iter()
            .find(|f| f.i == i && f.j == j)
            .map_or("ok", |f| f.class.as_str())
    }

    /// Failure counts keyed by error class.
    pub fn failure_counts(&self) -> std::collections::BTreeMap<String, usize> {
        let mut out = std::collections::BTreeMap::new();
        for f in &self.failures {
            *out.entry(f.class.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Columnar text: one `#`-prefixed JSON metadata line, a header, then
    /// `x,y,value,status` rows ordered by row then column.
    pub fn write_csv<W: Write>(&self, mut w: W, metadata: &serde_json::Value) -> std::io::Result<()> {
        writeln!(w, "# {}", serde_json::to_string(metadata)?)?;
        writeln!(w, "{},{},{},status", self.x.name, self.y.name, self.metric.name())?;
        for (j, y) in self.y.values.iter().enumerate() {
            for (i, x) in self.x.values.iter().enumerate() {
                writeln!(w, "{x},{y},{},{}", self.values[j][i], self.status(i, j))?;
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path, metadata: &serde_json::Value, json: bool) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let res = if json {
            let doc = serde_json::json!({ "metadata": metadata, "grid": self.to_json() });
            serde_json::to_writer_pretty(&mut w, &doc).map_err(std::io::Error::other)
        } else {
            self.write_csv(&mut w, metadata)
        };
        res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// JSON form with failed cells as `null`.
    pub fn to_json(&self) -> serde_json::Value {
        let values: Vec<Vec<Option<f64>>> = self
            .values
            .iter()
            .map(|row| row.iter().map(|v| (!v.is_nan()).then_some(*v)).collect())
            .collect();
        serde_json::json!({
            "x": self.x,
            "y": self.y,
            "metric": self.metric,
            "values": values,
            "failures": self.failures,
        })
    }
}

/// Evaluates `metric` on every `(x, y)` cell of the template config.
///
/// Cells run in parallel on the current rayon pool; results are placed by
/// cell index so the grid does not depend on scheduling.
pub fn scan_2d(
    template: &ModelConfig,
    x: &AxisSpec,
    y: &AxisSpec,
    metric: Metric,
    opts: &EvalOptions,
) -> Result<ScanGrid> {
    x.validate()?;
    y.validate()?;
    let xs = x.values();
    let ys = y.values();
    let nx = xs.len();
    let results: Vec<Result<f64>> = (0..nx * ys.len())
        .into_par_iter()
        .map(|cell| {
            let mut cfg = *template;
            x.param.apply(&mut cfg, xs[cell % nx]);
            y.param.apply(&mut cfg, ys[cell / nx]);
            evaluate_metric(&cfg, metric, opts)
        })
        .collect();
    let mut values = vec![vec![f64::NAN; nx]; ys.len()];
    let mut failures = Vec::new();
    for (cell, r) in results.into_iter().enumerate() {
        let (i, j) = (cell % nx, cell / nx);
        match r {
            Ok(v) => values[j][i] = v,
            Err(e) => failures.push(CellFailure {
                i,
                j,
                class: e.class().to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(ScanGrid {
        x: Axis {
            name: x.param.name().into(),
            values: xs,
        },
        y: Axis {
            name: y.param.name().into(),
            values: ys,
        },
        metric,
        values,
        failures,
    })
}

/// Normal-mode squeezing along a 1-D sweep. Failed points hold `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingCurves {
    pub param: String,
    pub values: Vec<f64>,
    pub s_plus: Vec<f64>,
    pub s_minus: Vec<f64>,
    /// `(index, class, message)` of failed points.
    pub failures: Vec<(usize, String, String)>,
}

impl SqueezingCurves {
    pub fn write_csv<W: Write>(&self, mut w: W, metadata: &serde_json::Value) -> std::io::Result<()> {
        writeln!(w, "# {}", serde_json::to_string(metadata)?)?;
        writeln!(w, "{},squeeze_plus_db,squeeze_minus_db,status", self.param)?;
        for (k, v) in self.values.iter().enumerate() {
            let status = self
                .failures
                .iter()
                .find(|f| f.0 == k)
                .map_or("ok", |f| f.1.as_str());
            writeln!(w, "{v},{},{},{status}", self.s_plus[k], self.s_minus[k])?;
        }
        Ok(())
    }
}

/// Period-averaged `(S+, S-)` of the conditional steady state along `axis`.
pub fn squeezing_vs_param(
    template: &ModelConfig,
    axis: &AxisSpec,
    opts: &EvalOptions,
) -> Result<SqueezingCurves> {
    axis.validate()?;
    let xs = axis.values();
    let results: Vec<Result<(f64, f64)>> = xs
        .par_iter()
        .map(|&v| {
            let mut cfg = *template;
            axis.param.apply(&mut cfg, v);
            let sol = periodic_steady_state(&cfg, &opts.numerics)?;
            let sq = squeezing_time_series(&sol.samples)?;
            let plus = period_average(
                &sq.iter().map(|s| (s.0, s.1)).collect::<Vec<_>>(),
                sol.period,
            )?;
            let minus = period_average(
                &sq.iter().map(|s| (s.0, s.2)).collect::<Vec<_>>(),
                sol.period,
            )?;
            Ok((plus, minus))
        })
        .collect();
    let mut curves = SqueezingCurves {
        param: axis.param.name().into(),
        values: xs,
        s_plus: Vec::new(),
        s_minus: Vec::new(),
        failures: Vec::new(),
    };
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok((p, m)) => {
                curves.s_plus.push(p);
                curves.s_minus.push(m);
            }
            Err(e) => {
                curves.s_plus.push(f64::NAN);
                curves.s_minus.push(f64::NAN);
                curves.failures.push((k, e.class().into(), e.to_string()));
            }
        }
    }
    Ok(curves)
}

/// Interior local maxima of `values` (plateaus report their first index).
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 1..values.len().saturating_sub(1) {
        let (a, b, c) = (values[k - 1], values[k], values[k + 1]);
        if b.is_nan() {
            continue;
        }
        let left = a.is_nan() || b > a;
        let right = c.is_nan() || b >= c;
        if left && right {
            out.push(k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vacuum_series_has_no_entanglement() {
        let series: Vec<_> = (0..10).map(|k| (k as f64, CovMatrix4::vacuum())).collect();
        let en = entanglement_time_series(&series).unwrap();
        assert!(en.iter().all(|(_, e)| *e == 0.0));
    }

    #[test]
    fn average_of_constant_and_sinusoid() {
        let period = 2.0;
        let h = period / 100.0;
        let constant: Vec<_> = (0..300).map(|k| (k as f64 * h, 0.7)).collect();
        assert!((period_average(&constant, period).unwrap() - 0.7).abs() < 1e-14);
        let sine: Vec<_> = (0..300)
            .map(|k| {
                let t = k as f64 * h;
                (t, 1.3 + 0.4 * (std::f64::consts::TAU * t / period + 0.3).sin())
            })
            .collect();
        assert!((period_average(&sine, period).unwrap() - 1.3).abs() < 1e-12);
        assert!(period_average(&constant[..50], period).is_err());
    }

    #[test]
    fn axis_values_include_both_ends() {
        let a = AxisSpec {
            param: ScanParam::Eta,
            min: 0.0,
            max: 1.0,
            count: 5,
        };
        assert_eq!(a.values(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn local_maxima_finds_peaks() {
        let v = [0.0, 1.0, 0.5, 0.2, 0.8, 0.8, 0.1];
        assert_eq!(local_maxima(&v), vec![1, 4]);
    }

    #[test]
    fn failed_cells_are_recorded_not_fabricated() {
        // eta = 0 with modulation is parametrically unstable without measurement
        let template = ModelConfig {
            alpha: 0.2,
            ..ModelConfig::default()
        };
        let opts = EvalOptions {
            numerics: Numerics {
                steps_per_period: 400,
                tol: 1e-6,
                ..Numerics::default()
            },
            ..EvalOptions::default()
        };
        let grid = scan_2d(
            &template,
            &AxisSpec {
                param: ScanParam::Eta,
                min: 0.0,
                max: 1.0,
                count: 2,
            },
            &AxisSpec {
                param: ScanParam::G,
                min: 0.2,
                max: 0.2,
                count: 1,
            },
            Metric::ConditionalEn,
            &opts,
        )
        .unwrap();
        assert!(grid.values[0][0].is_nan());
        assert_eq!(grid.status(0, 0), "unstable");
        assert!(grid.values[0][1] > 0.0);
        assert_eq!(grid.computed_count(), 1);
        assert_eq!(grid.failure_counts()["unstable"], 1);
    }
}
