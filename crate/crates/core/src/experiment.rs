//! Flat key/value experiment files, figure presets and the runner behind the
//! command-line tool.
//!
//! An experiment file is TOML without tables. Rates carry their unit in the
//! key name (`g_over_omega_m`, `kba_over_omega_x`, ...); times are in units of
//! `1/omega_m`. Missing keys take the values in [`ExperimentSpec::default`].

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::{normal_mode_blocks, uncertainty_ellipse, CovMatrix4};
use crate::model::{derive_physical, effective_detunings, ModelConfig, PhysicalParams, Strategy};
use crate::pipeline::{control_gains, GainMode};
use crate::riccati::{
    excess_noise_evolution, periodic_excess_noise, periodic_steady_state, Numerics,
};
use crate::scan::{
    entanglement_time_series, period_average, scan_2d, squeezing_time_series,
    squeezing_vs_param, AxisSpec, EvalOptions, Metric, ScanParam,
};
use crate::trajectory::{
    ensemble_statistics, simulate_closed_loop, RecordNormalization, SimSpec,
};

/// What an experiment computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Steady,
    Trajectory,
    Ensemble,
    Scan,
    Reproduce,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Steady => "steady",
            Mode::Trajectory => "trajectory",
            Mode::Ensemble => "ensemble",
            Mode::Scan => "scan",
            Mode::Reproduce => "reproduce",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Scan metric; `squeezing` sweeps one axis and reports both `S+` and `S-`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMetric {
    ConditionalEn,
    UnconditionalEn,
    SqueezePlus,
    SqueezeMinus,
    Squeezing,
}

impl ScanMetric {
    fn grid_metric(self) -> Option<Metric> {
        match self {
            ScanMetric::ConditionalEn => Some(Metric::ConditionalEn),
            ScanMetric::UnconditionalEn => Some(Metric::UnconditionalEn),
            ScanMetric::SqueezePlus => Some(Metric::SqueezePlus),
            ScanMetric::SqueezeMinus => Some(Metric::SqueezeMinus),
            ScanMetric::Squeezing => None,
        }
    }
}

/// Names of all figure presets.
pub const PRESETS: [&str; 14] = [
    "fig1a", "fig1b", "fig1c", "fig1d", "fig2a", "fig2b", "fig2c", "fig2d", "fig2e", "fig2f",
    "fig3", "fig4a", "fig4b", "fig4c",
];

const PHYSICAL_KEYS: [&str; 7] = [
    "radius_m",
    "density_kg_per_m3",
    "charge1_e",
    "charge2_e",
    "separation_m",
    "trap_frequency_hz",
    "temperature_k",
];

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    /// Preset name, for `mode = "reproduce"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,

    pub alpha: f64,
    pub omega_mod_over_omega_m: f64,
    pub g_over_omega_m: f64,
    pub eta: f64,
    pub kba_over_omega_x: f64,
    pub kth_over_omega_m: f64,
    pub gamma_over_omega_m: f64,
    pub strategy: Strategy,
    /// `Q1 / Q2`, used by identical feedback.
    pub charge_ratio: f64,
    pub q_over_omega_m: f64,
    pub state_cost: f64,
    pub gain_mode: GainMode,

    // When given, g, K_th and the charge ratio are derived from these.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density_kg_per_m3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charge1_e: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charge2_e: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_frequency_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,

    pub steps_per_period: usize,
    /// Overrides `steps_per_period`; must divide the modulation period.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_times_omega_m: Option<f64>,
    pub tol: f64,
    pub max_periods: usize,
    pub divergence_threshold: f64,

    /// Output horizon in modulation periods.
    pub periods: usize,
    /// Output row spacing in integrator steps.
    pub record_every: usize,
    pub seed: u64,
    pub n_trajectories: usize,
    pub dump_trajectories: usize,
    pub normalization: RecordNormalization,
    pub unconditional: bool,
    pub compare_unmodulated: bool,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_param: Option<ScanParam>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_param: Option<ScanParam>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<ScanMetric>,
    /// `[g/omega_m, Omega/omega_m]` points at which normal-mode ellipses are written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ellipse_points: Option<Vec<[f64; 2]>>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub out_dir: String,
    pub format: OutputFormat,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let model = ModelConfig::default();
        let num = Numerics::default();
        Self {
            mode: Mode::Steady,
            target: None,
            alpha: model.alpha,
            omega_mod_over_omega_m: model.omega_mod,
            g_over_omega_m: model.g,
            eta: model.eta,
            kba_over_omega_x: model.kba_ratio,
            kth_over_omega_m: model.kth,
            gamma_over_omega_m: model.gamma,
            strategy: model.strategy,
            charge_ratio: model.charge_ratio,
            q_over_omega_m: model.q,
            state_cost: model.state_cost,
            gain_mode: GainMode::Periodic,
            radius_m: None,
            density_kg_per_m3: None,
            charge1_e: None,
            charge2_e: None,
            separation_m: None,
            trap_frequency_hz: None,
            temperature_k: None,
            steps_per_period: num.steps_per_period,
            dt_times_omega_m: None,
            tol: num.tol,
            max_periods: num.max_periods,
            divergence_threshold: num.divergence,
            periods: 10,
            record_every: 40,
            seed: 0,
            n_trajectories: 2000,
            dump_trajectories: 1,
            normalization: RecordNormalization::Consistent,
            unconditional: true,
            compare_unmodulated: false,
            x_param: None,
            x_min: None,
            x_max: None,
            x_count: None,
            y_param: None,
            y_min: None,
            y_max: None,
            y_count: None,
            metric: None,
            ellipse_points: None,
            threads: None,
            out_dir: "out".into(),
            format: OutputFormat::Csv,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line: None,
        key: key.into(),
        message: message.into(),
    }
}

fn require(cond: bool, key: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(config_err(key, message))
    }
}

/// Line (1-based) on which `key` is assigned, if any.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn from_toml_error(text: &str, err: &toml::de::Error) -> Error {
    let line = err
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let key = line
        .and_then(|l| text.lines().nth(l - 1))
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .unwrap_or_default();
    Error::Config {
        line,
        key,
        message: err.message().trim().to_string(),
    }
}

fn with_line(text: &str, err: Error) -> Error {
    match err {
        Error::Config {
            line: None,
            key,
            message,
        } => Error::Config {
            line: key_line(text, &key),
            key,
            message,
        },
        other => other,
    }
}

impl ExperimentSpec {
    /// Parses and validates an experiment file. For `mode = "reproduce"` the
    /// named preset is loaded and the file's other keys override it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| from_toml_error(text, &e))?;
        let user: ExperimentSpec = toml::from_str(text).map_err(|e| from_toml_error(text, &e))?;
        if !table.contains_key("mode") {
            return Err(config_err(
                "mode",
                "required; one of steady, trajectory, ensemble, scan, reproduce",
            ));
        }
        let mut spec = if user.mode == Mode::Reproduce {
            let target = user.target.clone().ok_or_else(|| {
                config_err("target", "required when mode = \"reproduce\"")
            })?;
            let base = preset(&target).map_err(|e| with_line(text, e))?;
            let mut merged = toml::Table::try_from(&base)
                .map_err(|e| config_err("target", e.to_string()))?;
            for (k, v) in table.iter() {
                merged.insert(k.clone(), v.clone());
            }
            toml::Value::Table(merged)
                .try_into::<ExperimentSpec>()
                .map_err(|e| config_err("target", e.to_string()))?
        } else {
            user
        };
        spec.resolve_physical(&table).map_err(|e| with_line(text, e))?;
        spec.validate().map_err(|e| with_line(text, e))?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("cannot serialize spec: {e}")))
    }

    /// The spec without execution settings (`threads`, `out_dir`), which do
    /// not affect results.
    pub fn canonical(&self) -> Self {
        Self {
            threads: None,
            out_dir: String::new(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex_digest(self.canonical().to_toml_string()?.as_bytes()))
    }

    fn has_physical(&self) -> bool {
        self.radius_m.is_some()
            || self.density_kg_per_m3.is_some()
            || self.charge1_e.is_some()
            || self.charge2_e.is_some()
            || self.separation_m.is_some()
            || self.trap_frequency_hz.is_some()
            || self.temperature_k.is_some()
    }

    /// SI inputs, when the physical keys are present.
    pub fn physical_params(&self) -> Result<Option<PhysicalParams>> {
        if !self.has_physical() {
            return Ok(None);
        }
        let missing = |key: &str| config_err(key, "all physical keys must be given together");
        Ok(Some(PhysicalParams {
            radius: self.radius_m.ok_or_else(|| missing(PHYSICAL_KEYS[0]))?,
            density: self.density_kg_per_m3.ok_or_else(|| missing(PHYSICAL_KEYS[1]))?,
            charges: (
                self.charge1_e.ok_or_else(|| missing(PHYSICAL_KEYS[2]))?,
                self.charge2_e.ok_or_else(|| missing(PHYSICAL_KEYS[3]))?,
            ),
            separation: self.separation_m.ok_or_else(|| missing(PHYSICAL_KEYS[4]))?,
            trap_frequency: TAU * self.trap_frequency_hz.ok_or_else(|| missing(PHYSICAL_KEYS[5]))?,
            temperature: self.temperature_k.ok_or_else(|| missing(PHYSICAL_KEYS[6]))?,
            backaction_ratio: self.kba_over_omega_x,
            thermal_ratio: None,
            damping_ratio: self.gamma_over_omega_m,
            alpha: self.alpha,
            omega_mod: self.omega_mod_over_omega_m,
            eta: self.eta,
            strategy: self.strategy,
            q: self.q_over_omega_m,
        }))
    }

    /// Replaces g, K_th and the charge ratio by their derived values. Values
    /// given explicitly in `table` must agree with the derived ones.
    fn resolve_physical(&mut self, table: &toml::Table) -> Result<()> {
        let Some(p) = self.physical_params()? else {
            return Ok(());
        };
        let derived = derive_physical(&p).map_err(|e| config_err("radius_m", e.to_string()))?;
        let pairs = [
            ("g_over_omega_m", derived.config.g),
            ("kth_over_omega_m", derived.config.kth),
            ("charge_ratio", derived.config.charge_ratio),
        ];
        for (key, value) in pairs {
            if let Some(given) = table.get(key).and_then(|v| {
                v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
            }) {
                if (given - value).abs() > 1e-9 * value.abs().max(1.0) {
                    return Err(config_err(
                        key,
                        format!("{given} conflicts with {value} derived from the physical keys"),
                    ));
                }
            }
        }
        self.g_over_omega_m = derived.config.g;
        self.kth_over_omega_m = derived.config.kth;
        self.charge_ratio = derived.config.charge_ratio;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            alpha: self.alpha,
            omega_mod: self.omega_mod_over_omega_m,
            g: self.g_over_omega_m,
            eta: self.eta,
            kba_ratio: self.kba_over_omega_x,
            kth: self.kth_over_omega_m,
            gamma: self.gamma_over_omega_m,
            strategy: self.strategy,
            charge_ratio: self.charge_ratio,
            q: self.q_over_omega_m,
            state_cost: self.state_cost,
        }
    }

    /// Integrator steps per modulation period, honoring `dt_times_omega_m`.
    pub fn effective_steps(&self) -> Result<usize> {
        let Some(dt) = self.dt_times_omega_m else {
            return Ok(self.steps_per_period);
        };
        require(dt.is_finite() && dt > 0.0, "dt_times_omega_m", "must be > 0")?;
        let period = TAU / self.omega_mod_over_omega_m;
        let ratio = period / dt;
        let n = ratio.round();
        if n < 2.0 || (ratio - n).abs() > 1e-6 * ratio {
            return Err(config_err(
                "dt_times_omega_m",
                format!("must divide the modulation period 2 pi / Omega = {period} into at least 2 steps"),
            ));
        }
        Ok(n as usize)
    }

    pub fn numerics(&self) -> Result<Numerics> {
        Ok(Numerics {
            steps_per_period: self.effective_steps()?,
            tol: self.tol,
            max_periods: self.max_periods,
            divergence: self.divergence_threshold,
        })
    }

    /// Mode actually executed; presets resolve `reproduce` to their own mode.
    pub fn effective_mode(&self) -> Result<Mode> {
        match (self.mode, &self.target) {
            (Mode::Reproduce, Some(t)) => preset(t).map(|p| p.mode),
            (Mode::Reproduce, None) => Err(config_err("target", "required when mode = \"reproduce\"")),
            (m, _) => Ok(m),
        }
    }

    fn x_axis(&self) -> Result<AxisSpec> {
        let param = self.x_param.ok_or_else(|| config_err("x_param", "required for scans"))?;
        Ok(AxisSpec {
            param,
            min: self.x_min.ok_or_else(|| config_err("x_min", "required for scans"))?,
            max: self.x_max.ok_or_else(|| config_err("x_max", "required for scans"))?,
            count: self.x_count.ok_or_else(|| config_err("x_count", "required for scans"))?,
        })
    }

    fn y_axis(&self) -> Result<Option<AxisSpec>> {
        let Some(param) = self.y_param else {
            for (key, set) in [
                ("y_min", self.y_min.is_some()),
                ("y_max", self.y_max.is_some()),
                ("y_count", self.y_count.is_some()),
            ] {
                require(!set, key, "given without y_param")?;
            }
            return Ok(None);
        };
        Ok(Some(AxisSpec {
            param,
            min: self.y_min.ok_or_else(|| config_err("y_min", "required with y_param"))?,
            max: self.y_max.ok_or_else(|| config_err("y_max", "required with y_param"))?,
            count: self.y_count.ok_or_else(|| config_err("y_count", "required with y_param"))?,
        }))
    }

    /// Checks every key against its constraint; errors name the key.
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        require(finite(self.alpha) && (0.0..1.0).contains(&self.alpha), "alpha", "must satisfy 0 <= alpha < 1")?;
        require(
            finite(self.omega_mod_over_omega_m) && self.omega_mod_over_omega_m > 0.0,
            "omega_mod_over_omega_m",
            "must be > 0",
        )?;
        require(finite(self.g_over_omega_m), "g_over_omega_m", "must be finite")?;
        require(finite(self.eta) && (0.0..=1.0).contains(&self.eta), "eta", "must satisfy 0 <= eta <= 1")?;
        for (key, v) in [
            ("kba_over_omega_x", self.kba_over_omega_x),
            ("kth_over_omega_m", self.kth_over_omega_m),
            ("gamma_over_omega_m", self.gamma_over_omega_m),
        ] {
            require(finite(v) && v >= 0.0, key, "must be >= 0")?;
        }
        require(finite(self.charge_ratio), "charge_ratio", "must be finite")?;
        if self.strategy == Strategy::Identical {
            require(
                self.charge_ratio.abs() != 1.0,
                "charge_ratio",
                "must differ from +-1 with identical feedback (the differential mode is uncontrollable)",
            )?;
        }
        require(finite(self.q_over_omega_m) && self.q_over_omega_m > 0.0, "q_over_omega_m", "must be > 0")?;
        require(finite(self.state_cost) && self.state_cost > 0.0, "state_cost", "must be > 0")?;
        require(self.steps_per_period >= 2, "steps_per_period", "must be >= 2")?;
        let steps = self.effective_steps()?;
        require(finite(self.tol) && self.tol > 0.0, "tol", "must be > 0")?;
        require(self.max_periods >= 1, "max_periods", "must be >= 1")?;
        require(self.divergence_threshold > 0.0, "divergence_threshold", "must be > 0")?;
        require(self.periods >= 1, "periods", "must be >= 1")?;
        require(self.record_every >= 1, "record_every", "must be >= 1")?;
        require(self.seed <= i64::MAX as u64, "seed", "must be <= 2^63 - 1")?;
        if let Some(t) = self.threads {
            require(t >= 1, "threads", "must be >= 1")?;
        }
        require(!self.out_dir.is_empty(), "out_dir", "must not be empty")?;
        if self.has_physical() {
            self.physical_params()?;
        }
        match self.effective_mode()? {
            Mode::Trajectory | Mode::Ensemble => {
                let key = if self.dt_times_omega_m.is_some() {
                    "dt_times_omega_m"
                } else {
                    "steps_per_period"
                };
                require(steps >= 1000, key, "time step must not exceed 1e-3 of the modulation period")?;
                if self.effective_mode()? == Mode::Ensemble {
                    require(self.n_trajectories >= 2, "n_trajectories", "must be >= 2")?;
                }
            }
            Mode::Scan => {
                let x = self.x_axis()?;
                require(x.count >= 1, "x_count", "must be >= 1")?;
                require(x.min.is_finite() && x.max.is_finite(), "x_min", "bounds must be finite")?;
                let metric = self.metric.ok_or_else(|| config_err("metric", "required for scans"))?;
                match (metric, self.y_axis()?) {
                    (ScanMetric::Squeezing, Some(_)) => {
                        return Err(config_err("y_param", "not used by the squeezing sweep"))
                    }
                    (ScanMetric::Squeezing, None) => {}
                    (_, None) => return Err(config_err("y_param", "required for 2-D scans")),
                    (_, Some(y)) => {
                        require(y.count >= 1, "y_count", "must be >= 1")?;
                        require(y.min.is_finite() && y.max.is_finite(), "y_min", "bounds must be finite")?;
                    }
                }
            }
            Mode::Steady | Mode::Reproduce => {}
        }
        Ok(())
    }
}

fn caption_base(mode: Mode) -> ExperimentSpec {
    ExperimentSpec {
        mode,
        alpha: 0.0,
        omega_mod_over_omega_m: 2.0,
        eta: 1.0,
        kba_over_omega_x: 0.05,
        kth_over_omega_m: 2.5e-3,
        gamma_over_omega_m: 1e-10,
        ..ExperimentSpec::default()
    }
}

fn grid_scan(
    base: ExperimentSpec,
    metric: ScanMetric,
    x: (ScanParam, f64, f64, usize),
    y: (ScanParam, f64, f64, usize),
) -> ExperimentSpec {
    ExperimentSpec {
        metric: Some(metric),
        x_param: Some(x.0),
        x_min: Some(x.1),
        x_max: Some(x.2),
        x_count: Some(x.3),
        y_param: Some(y.0),
        y_min: Some(y.1),
        y_max: Some(y.2),
        y_count: Some(y.3),
        ..base
    }
}

fn sweep(base: ExperimentSpec, x: (ScanParam, f64, f64, usize)) -> ExperimentSpec {
    ExperimentSpec {
        metric: Some(ScanMetric::Squeezing),
        x_param: Some(x.0),
        x_min: Some(x.1),
        x_max: Some(x.2),
        x_count: Some(x.3),
        ..base
    }
}

/// Fully populated spec for a figure preset.
pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let scan = caption_base(Mode::Scan);
    let steady = ExperimentSpec {
        compare_unmodulated: true,
        periods: 5,
        ..caption_base(Mode::Steady)
    };
    let feedback = |spec: ExperimentSpec, strategy: Strategy, alpha: f64| ExperimentSpec {
        strategy,
        alpha,
        charge_ratio: 3.0,
        q_over_omega_m: 0.1,
        ..spec
    };
    let g_axis = (ScanParam::G, -0.3, 0.3, 41);
    let eta_axis = (ScanParam::Eta, 0.0, 1.0, 41);
    let spec = match name {
        "fig1a" | "fig1b" => {
            let alpha = if name == "fig1a" { 0.0 } else { 0.2 };
            grid_scan(
                ExperimentSpec { alpha, ..scan },
                ScanMetric::ConditionalEn,
                g_axis,
                eta_axis,
            )
        }
        "fig1c" | "fig1d" => ExperimentSpec {
            alpha: 0.2,
            g_over_omega_m: if name == "fig1c" { 0.2 } else { -0.2 },
            unconditional: false,
            ..steady
        },
        "fig2a" | "fig2b" | "fig2c" | "fig2d" => {
            let strategy = if matches!(name, "fig2a" | "fig2b") {
                Strategy::Identical
            } else {
                Strategy::Independent
            };
            let alpha = if matches!(name, "fig2a" | "fig2c") { 0.0 } else { 0.2 };
            grid_scan(
                feedback(scan, strategy, alpha),
                ScanMetric::UnconditionalEn,
                g_axis,
                eta_axis,
            )
        }
        "fig2e" | "fig2f" => ExperimentSpec {
            g_over_omega_m: if name == "fig2e" { 0.2 } else { -0.2 },
            ..feedback(steady, Strategy::Independent, 0.2)
        },
        "fig3" => ExperimentSpec {
            alpha: 0.2,
            ellipse_points: Some(vec![[0.86, 2.18], [0.2, 2.0], [0.2, 2.6]]),
            ..grid_scan(
                scan,
                ScanMetric::ConditionalEn,
                (ScanParam::OmegaMod, 1.0, 6.0, 61),
                (ScanParam::G, -0.2, 1.0, 61),
            )
        },
        "fig4a" => grid_scan(
            scan,
            ScanMetric::ConditionalEn,
            (ScanParam::G, 0.0, 1.0, 41),
            (ScanParam::Alpha, 0.0, 0.5, 41),
        ),
        "fig4b" => sweep(
            ExperimentSpec { alpha: 0.2, ..scan },
            (ScanParam::G, 0.0, 1.0, 41),
        ),
        "fig4c" => sweep(
            ExperimentSpec {
                g_over_omega_m: 0.2,
                ..scan
            },
            (ScanParam::Alpha, 0.0, 0.5, 41),
        ),
        other => {
            return Err(config_err(
                "target",
                format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
            ))
        }
    };
    Ok(ExperimentSpec {
        out_dir: name.to_string(),
        ..spec
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Numeric columns with an optional trailing status column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub status: Option<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, metadata: &serde_json::Value) -> std::io::Result<()> {
        writeln!(w, "# {}", serde_json::to_string(metadata)?)?;
        let mut header = self.columns.join(",");
        if self.status.is_some() {
            header.push_str(",status");
        }
        writeln!(w, "{header}")?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut line = row
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            if let Some(status) = &self.status {
                line.push(',');
                line.push_str(&status[k]);
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_json(&self, metadata: &serde_json::Value) -> serde_json::Value {
        let rows: Vec<Vec<Option<f64>>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
            .collect();
        serde_json::json!({
            "metadata": metadata,
            "columns": self.columns,
            "rows": rows,
            "status": self.status,
        })
    }
}

/// One file written by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub outputs: Vec<OutputEntry>,
    pub failures: BTreeMap<String, usize>,
    pub wall_time_s: f64,
}

struct Outputs<'a> {
    dir: PathBuf,
    format: OutputFormat,
    metadata: serde_json::Value,
    entries: Vec<OutputEntry>,
    failures: BTreeMap<String, usize>,
    spec: &'a ExperimentSpec,
}

impl Outputs<'_> {
    fn register(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.entries.push(OutputEntry {
            path: name.to_string(),
            sha256: hex_digest(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        f(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        self.register(name)
    }

    fn table(&mut self, stem: &str, table: &Table, extra: serde_json::Value) -> Result<()> {
        let mut meta = self.metadata.clone();
        merge_json(&mut meta, extra);
        let name = format!("{stem}.{}", self.format.extension());
        match self.format {
            OutputFormat::Csv => self.write_with(&name, |w| table.write_csv(w, &meta)),
            OutputFormat::Json => {
                let doc = table.to_json(&meta);
                self.write_with(&name, |w| {
                    serde_json::to_writer_pretty(&mut *w, &doc).map_err(std::io::Error::other)
                })
            }
        }
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
            writeln!(w)
        })
    }

    fn fail(&mut self, class: &str) {
        *self.failures.entry(class.to_string()).or_insert(0) += 1;
    }
}

fn merge_json(base: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(b), serde_json::Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
}

/// Executes `spec`, writing its outputs and `manifest.json` into
/// `spec.out_dir`. A manifest is written on failure too when possible.
pub fn run(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let started = Instant::now();
    let dir = PathBuf::from(&spec.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Outputs {
        dir: dir.clone(),
        format: spec.format,
        metadata: serde_json::json!({
            "mode": spec.effective_mode()?.name(),
            "target": spec.target,
            "config_hash": spec.config_hash()?,
            "parameters": serde_json::to_value(spec.canonical())
                .map_err(|e| Error::validation(e.to_string()))?,
        }),
        entries: Vec::new(),
        failures: BTreeMap::new(),
        spec,
    };
    let result = match spec.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_err("threads", e.to_string()))?
            .install(|| execute(&mut out)),
        None => execute(&mut out),
    };
    let wall_time_s = started.elapsed().as_secs_f64();
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "dependencies": {
            "nalgebra": "0.35",
            "rand_chacha": "0.9",
            "rayon": "1",
        },
        "status": if result.is_ok() { "ok" } else { "error" },
        "error": result.as_ref().err().map(|e| e.to_string()),
        "mode": spec.effective_mode()?.name(),
        "inputs": serde_json::to_value(spec).map_err(|e| Error::validation(e.to_string()))?,
        "inputs_toml": spec.to_toml_string()?,
        "config_hash": spec.config_hash()?,
        "threads": spec.threads.unwrap_or_else(rayon::current_num_threads),
        "wall_time_s": wall_time_s,
        "failures": out.failures,
        "outputs": out.entries,
    });
    let path = dir.join("manifest.json");
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(e.to_string()))
        .and_then(|s| std::fs::write(&path, s + "\n").map_err(|e| Error::io(&path, e)));
    result?;
    written?;
    Ok(RunReport {
        out_dir: dir,
        outputs: out.entries,
        failures: out.failures,
        wall_time_s,
    })
}

fn execute(out: &mut Outputs) -> Result<()> {
    match out.spec.effective_mode()? {
        Mode::Steady => run_steady(out),
        Mode::Trajectory => run_trajectory(out),
        Mode::Ensemble => run_ensemble(out),
        Mode::Scan => run_scan(out),
        Mode::Reproduce => Err(config_err("target", "preset resolves to reproduce")),
    }
}

struct SteadyColumns {
    en_c: Vec<f64>,
    /// Sampled every second conditional sample.
    en_u: Option<Vec<f64>>,
}

fn steady_columns(
    cfg: &ModelConfig,
    num: &Numerics,
    spec: &ExperimentSpec,
) -> Result<(SteadyColumns, crate::riccati::PeriodicSolution)> {
    let sol = periodic_steady_state(cfg, num)?;
    let en_c = entanglement_time_series(&sol.samples)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let en_u = if spec.unconditional {
        let gains = control_gains(cfg, num, spec.gain_mode)?;
        let excess = periodic_excess_noise(&sol, &gains, cfg, num)?;
        let series: Vec<(f64, CovMatrix4)> =
            excess.times.iter().copied().zip(excess.v_u.iter().copied()).collect();
        Some(
            entanglement_time_series(&series)?
                .into_iter()
                .map(|(_, e)| e)
                .collect(),
        )
    } else {
        None
    };
    Ok((SteadyColumns { en_c, en_u }, sol))
}

fn mean_over(values: &[f64], times: &[f64], period: f64) -> Result<f64> {
    let series: Vec<(f64, f64)> = times.iter().copied().zip(values.iter().copied()).collect();
    period_average(&series, period)
}

fn run_steady(out: &mut Outputs) -> Result<()> {
    let spec = out.spec;
    let cfg = spec.model_config();
    let num = spec.numerics()?;
    let (cols, sol) = steady_columns(&cfg, &num, spec)?;
    let squeeze = squeezing_time_series(&sol.samples)?;
    let baseline = if spec.compare_unmodulated {
        let cfg0 = ModelConfig { alpha: 0.0, ..cfg };
        Some(steady_columns(&cfg0, &num, spec)?.0)
    } else {
        None
    };

    let mut names = vec!["time", "en_c"];
    if cols.en_u.is_some() {
        names.push("en_u");
    }
    names.extend(["squeeze_plus_db", "squeeze_minus_db"]);
    if let Some(b) = &baseline {
        names.push("en_c_unmodulated");
        if b.en_u.is_some() {
            names.push("en_u_unmodulated");
        }
    }
    let mut table = Table::new(&names);
    let stride = 2 * spec.record_every;
    for p in 0..spec.periods {
        for k in (0..sol.len()).step_by(stride) {
            let mut row = vec![p as f64 * sol.period + sol.samples[k].0, cols.en_c[k]];
            if let Some(u) = &cols.en_u {
                row.push(u[k / 2]);
            }
            row.extend([squeeze[k].1, squeeze[k].2]);
            if let Some(b) = &baseline {
                row.push(b.en_c[k]);
                if let Some(u) = &b.en_u {
                    row.push(u[k / 2]);
                }
            }
            table.rows.push(row);
        }
    }

    let times: Vec<f64> = sol.samples.iter().map(|s| s.0).collect();
    let half_times: Vec<f64> = times.iter().step_by(2).copied().collect();
    let avg = |v: &[f64]| mean_over(v, &times, sol.period);
    let avg_half = |v: &[f64]| mean_over(v, &half_times, sol.period);
    let sp: Vec<f64> = squeeze.iter().map(|s| s.1).collect();
    let sm: Vec<f64> = squeeze.iter().map(|s| s.2).collect();
    let det = effective_detunings(&cfg);
    let mut summary = serde_json::json!({
        "period": sol.period,
        "periods_to_converge": sol.periods,
        "residual": sol.residual,
        "mean_en_c": avg(&cols.en_c)?,
        "mean_squeeze_plus_db": avg(&sp)?,
        "mean_squeeze_minus_db": avg(&sm)?,
        "detuning_plus": det.plus,
        "detuning_minus": det.minus,
        "final_covariance": sol.samples[0].1.matrix().as_slice(),
    });
    if let Some(u) = &cols.en_u {
        merge_json(&mut summary, serde_json::json!({ "mean_en_u": avg_half(u)? }));
    }
    if let Some(b) = &baseline {
        merge_json(&mut summary, serde_json::json!({ "mean_en_c_unmodulated": avg(&b.en_c)? }));
        if let Some(u) = &b.en_u {
            merge_json(&mut summary, serde_json::json!({ "mean_en_u_unmodulated": avg_half(u)? }));
        }
    }
    out.table("series", &table, serde_json::json!({ "summary": summary.clone() }))?;
    out.json("summary.json", &summary)
}

fn sim_setup(
    spec: &ExperimentSpec,
) -> Result<(
    ModelConfig,
    crate::riccati::PeriodicSolution,
    crate::riccati::GainSchedule,
    SimSpec,
)> {
    let cfg = spec.model_config();
    let num = spec.numerics()?;
    let sol = periodic_steady_state(&cfg, &num)?;
    let gains = control_gains(&cfg, &num, spec.gain_mode)?;
    let dt = sol.period / num.steps_per_period as f64;
    let sim = SimSpec {
        t0: 0.0,
        t1: spec.periods as f64 * sol.period,
        dt,
        normalization: spec.normalization,
    };
    Ok((cfg, sol, gains, sim))
}

/// File name of a dumped trajectory.
pub fn trajectory_file_name(seed: u64, index: u64) -> String {
    format!("trajectory_{seed}_{index:05}.txt")
}

fn dump_trajectories(
    out: &mut Outputs,
    setup: &(
        ModelConfig,
        crate::riccati::PeriodicSolution,
        crate::riccati::GainSchedule,
        SimSpec,
    ),
) -> Result<()> {
    use rayon::prelude::*;
    let spec = out.spec;
    let (cfg, sol, gains, sim) = setup;
    let records: Vec<_> = (0..spec.dump_trajectories as u64)
        .into_par_iter()
        .map(|index| {
            simulate_closed_loop(cfg, sol, gains, sim, spec.seed, index).map_err(|e| {
                Error::Trajectory {
                    index,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;
    for rec in records {
        let name = trajectory_file_name(rec.seed, rec.index);
        out.write_with(&name, |w| rec.write_columns(w))?;
    }
    Ok(())
}

fn run_trajectory(out: &mut Outputs) -> Result<()> {
    let setup = sim_setup(out.spec)?;
    dump_trajectories(out, &setup)
}

const UPPER: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];
const LABELS: [&str; 4] = ["x1", "p1", "x2", "p2"];

fn run_ensemble(out: &mut Outputs) -> Result<()> {
    let spec = out.spec;
    let setup = sim_setup(spec)?;
    let (cfg, sol, gains, sim) = &setup;
    let stats = ensemble_statistics(
        cfg,
        sol,
        gains,
        sim,
        spec.n_trajectories,
        spec.seed,
        spec.record_every,
    )?;
    let ode = excess_noise_evolution(sol, gains, cfg, sim.t0, sim.t1, sim.dt)?;

    let mut names: Vec<String> = vec!["time".into()];
    names.extend(LABELS.iter().map(|l| format!("mean_{l}")));
    names.extend(LABELS.iter().map(|l| format!("mean_se_{l}")));
    for prefix in ["cov", "cov_se", "v_ex"] {
        names.extend(UPPER.iter().map(|(i, j)| format!("{prefix}_{}_{}", LABELS[*i], LABELS[*j])));
    }
    let mut table = Table {
        columns: names,
        ..Table::default()
    };
    let mut max_z: f64 = 0.0;
    let mut within = 0usize;
    let mut compared = 0usize;
    let mut min_nu = f64::INFINITY;
    for (r, t) in stats.times.iter().enumerate() {
        let v_ex = ode.v_ex[r * spec.record_every].matrix();
        let cov = &stats.cov[r];
        let se = &stats.cov_se[r];
        let mut row = vec![*t];
        row.extend(stats.mean[r].iter());
        row.extend(stats.mean_se[r].iter());
        row.extend(UPPER.iter().map(|&(i, j)| cov[(i, j)]));
        row.extend(UPPER.iter().map(|&(i, j)| se[(i, j)]));
        row.extend(UPPER.iter().map(|&(i, j)| v_ex[(i, j)]));
        table.rows.push(row);
        if r == 0 {
            continue;
        }
        for &(i, j) in &UPPER {
            if se[(i, j)] > 0.0 {
                let z = (cov[(i, j)] - v_ex[(i, j)]).abs() / se[(i, j)];
                max_z = max_z.max(z);
                compared += 1;
                if z <= 3.0 {
                    within += 1;
                }
            }
        }
        let idx = ((t / sol.spacing()).round() as usize) % sol.len();
        let vu = CovMatrix4::symmetrized(sol.at(idx).matrix() + cov);
        min_nu = min_nu.min(crate::gaussian::symplectic_eigenvalues(&vu)[0]);
    }
    let summary = serde_json::json!({
        "n_trajectories": stats.n_trajectories,
        "seed": stats.seed_base,
        "dt": sim.dt,
        "max_abs_z": max_z,
        "entries_within_3_se": within,
        "entries_compared": compared,
        "min_symplectic_eigenvalue_vc_plus_empirical": min_nu,
    });
    out.table("ensemble", &table, serde_json::json!({ "summary": summary.clone() }))?;
    out.json("summary.json", &summary)?;
    dump_trajectories(out, &setup)
}

fn run_scan(out: &mut Outputs) -> Result<()> {
    let spec = out.spec;
    let cfg = spec.model_config();
    let opts = EvalOptions {
        numerics: spec.numerics()?,
        gain_mode: spec.gain_mode,
    };
    let x = spec.x_axis()?;
    let metric = spec.metric.ok_or_else(|| config_err("metric", "required for scans"))?;
    match (metric.grid_metric(), spec.y_axis()?) {
        (Some(m), Some(y)) => {
            let grid = scan_2d(&cfg, &x, &y, m, &opts)?;
            for f in &grid.failures {
                out.fail(&f.class);
            }
            let mut meta = out.metadata.clone();
            merge_json(
                &mut meta,
                serde_json::json!({
                    "resolution": [grid.x.values.len(), grid.y.values.len()],
                    "metric": m.name(),
                    "computed": grid.computed_count(),
                    "failures": grid.failure_counts(),
                }),
            );
            let name = format!("grid.{}", spec.format.extension());
            match spec.format {
                OutputFormat::Csv => out.write_with(&name, |w| grid.write_csv(w, &meta))?,
                OutputFormat::Json => {
                    let doc = serde_json::json!({ "metadata": meta, "grid": grid.to_json() });
                    out.write_with(&name, |w| {
                        serde_json::to_writer_pretty(&mut *w, &doc).map_err(std::io::Error::other)
                    })?
                }
            }
        }
        (None, None) => {
            let curves = squeezing_vs_param(&cfg, &x, &opts)?;
            let mut table = Table::new(&[x.param.name(), "squeeze_plus_db", "squeeze_minus_db"]);
            let mut status = vec!["ok".to_string(); curves.values.len()];
            for (k, class, _) in &curves.failures {
                status[*k] = class.clone();
                out.fail(class);
            }
            for k in 0..curves.values.len() {
                table
                    .rows
                    .push(vec![curves.values[k], curves.s_plus[k], curves.s_minus[k]]);
            }
            table.status = Some(status);
            out.table(
                "squeezing",
                &table,
                serde_json::json!({ "resolution": [curves.values.len()] }),
            )?;
        }
        _ => return Err(config_err("metric", "does not match the configured axes")),
    }
    if let Some(points) = &spec.ellipse_points {
        write_ellipses(out, &cfg, &opts.numerics, points)?;
    }
    Ok(())
}

const ELLIPSE_POINTS: usize = 64;

fn write_ellipses(
    out: &mut Outputs,
    cfg: &ModelConfig,
    num: &Numerics,
    points: &[[f64; 2]],
) -> Result<()> {
    let mut table = Table::new(&["point", "g_over_omega_m", "omega_mod_over_omega_m", "mode", "x", "p"]);
    let mut status = Vec::new();
    for (k, [g, omega]) in points.iter().enumerate() {
        let c = ModelConfig {
            g: *g,
            omega_mod: *omega,
            ..*cfg
        };
        let blocks = periodic_steady_state(&c, num).map(|sol| normal_mode_blocks(&sol.samples[0].1));
        match blocks {
            Ok(b) => {
                for (mode, sigma) in [(1.0, b.sigma_plus), (-1.0, b.sigma_minus)] {
                    for [x, p] in uncertainty_ellipse(&sigma, ELLIPSE_POINTS)? {
                        table.rows.push(vec![k as f64, *g, *omega, mode, x, p]);
                        status.push("ok".to_string());
                    }
                }
            }
            Err(e) => {
                out.fail(e.class());
                table.rows.push(vec![k as f64, *g, *omega, f64::NAN, f64::NAN, f64::NAN]);
                status.push(e.class().to_string());
            }
        }
    }
    table.status = Some(status);
    out.table(
        "ellipses",
        &table,
        serde_json::json!({ "note": "mode 1 is c+, -1 is c-; ellipse at the start of the converged period" }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in PRESETS {
            let spec = preset(name).unwrap();
            let text = spec.to_toml_string().unwrap();
            assert_eq!(ExperimentSpec::from_toml_str(&text).unwrap(), spec, "{name}");
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(preset("fig9"), Err(Error::Config { .. })));
    }

    #[test]
    fn negative_alpha_names_key_constraint_and_line() {
        let err = ExperimentSpec::from_toml_str("mode = \"steady\"\n\nalpha = -1\n").unwrap_err();
        match err {
            Error::Config { line, key, message } => {
                assert_eq!(key, "alpha");
                assert_eq!(line, Some(3));
                assert!(message.contains("0 <= alpha < 1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_bad_type_report_line() {
        let err = ExperimentSpec::from_toml_str("mode = \"steady\"\nalpah = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), ref key, .. } if key == "alpah"), "{err}");
        let err = ExperimentSpec::from_toml_str("mode = \"steady\"\neta = \"high\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), ref key, .. } if key == "eta"), "{err}");
    }

    #[test]
    fn mode_is_required() {
        let err = ExperimentSpec::from_toml_str("alpha = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "mode"));
    }

    #[test]
    fn reproduce_overlays_user_keys_on_preset() {
        let spec = ExperimentSpec::from_toml_str(
            "mode = \"reproduce\"\ntarget = \"fig1b\"\nx_count = 3\ny_count = 2\n",
        )
        .unwrap();
        assert_eq!(spec.effective_mode().unwrap(), Mode::Scan);
        assert_eq!(spec.alpha, 0.2);
        assert_eq!(spec.x_count, Some(3));
        let again = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn caption_parameters() {
        let b = preset("fig1b").unwrap();
        assert_eq!(b.alpha, 0.2);
        assert_eq!(b.metric, Some(ScanMetric::ConditionalEn));
        assert_eq!((b.x_param, b.y_param), (Some(ScanParam::G), Some(ScanParam::Eta)));
        let d = preset("fig2d").unwrap();
        assert_eq!(d.strategy, Strategy::Independent);
        assert_eq!(d.q_over_omega_m, 0.1);
        assert!(d.alpha > 0.0);
        let a = preset("fig4a").unwrap();
        assert_eq!((a.x_param, a.y_param), (Some(ScanParam::G), Some(ScanParam::Alpha)));
    }

    #[test]
    fn dt_must_divide_the_period() {
        let mut spec = ExperimentSpec {
            dt_times_omega_m: Some(std::f64::consts::PI / 1000.0),
            ..ExperimentSpec::default()
        };
        assert_eq!(spec.effective_steps().unwrap(), 1000);
        spec.dt_times_omega_m = Some(0.0123);
        assert!(matches!(spec.validate(), Err(Error::Config { ref key, .. }) if key == "dt_times_omega_m"));
    }

    #[test]
    fn physical_keys_derive_coupling() {
        let text = "mode = \"steady\"\nradius_m = 5e-8\ndensity_kg_per_m3 = 1850.0\n\
                    charge1_e = 30\ncharge2_e = 30\nseparation_m = 3e-6\n\
                    trap_frequency_hz = 29600.0\ntemperature_k = 300.0\n";
        let spec = ExperimentSpec::from_toml_str(text).unwrap();
        assert!(spec.g_over_omega_m < 0.0);
        assert_eq!(spec.charge_ratio, 1.0);
        let again = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, spec);
        let partial = "mode = \"steady\"\nradius_m = 5e-8\n";
        assert!(matches!(
            ExperimentSpec::from_toml_str(partial),
            Err(Error::Config { .. })
        ));
        let conflict = format!("{text}g_over_omega_m = 0.2\n");
        let err = ExperimentSpec::from_toml_str(&conflict).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, line: Some(9), .. } if key == "g_over_omega_m"), "{err}");
    }

    #[test]
    fn table_csv_has_metadata_header() {
        let mut t = Table::new(&["a", "b"]);
        t.rows.push(vec![1.0, 0.5]);
        t.status = Some(vec!["ok".into()]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &serde_json::json!({"k": 1})).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# {\"k\":1}\na,b,status\n1,0.5,ok\n");
    }
}
