use std::path::Path;

use echo_imager::experiments::{EchoVerifyOptions, ReplicationPlan, Strategy, SweepSettings};
use echo_imager::modes::{PointSource, Scene};
use echo_imager::protocols::{NoiseConfig, NoiseStudy, ProbeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    RayleighSweep,
    Mle,
    NoiseStudy,
    Table1,
    EchoVerify,
    Fisher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Two equal sources at ±d/2 when `sources` is absent.
    #[serde(default = "default_separation")]
    pub d_over_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<PointSource>>,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "default_rate")]
    pub emission: f64,
    #[serde(default)]
    pub absorption: f64,
    #[serde(default)]
    pub correlation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { d_over_sigma: 0.1, sources: None, sigma: 1.0, emission: 0.01, absorption: 0.0, correlation: 0.0 }
    }
}

impl SceneConfig {
    pub fn build(&self) -> echo_imager::Result<Scene> {
        let scene = match &self.sources {
            Some(src) => Scene::new(src.clone(), self.sigma, self.emission, self.absorption)?,
            None => Scene::two_point(self.d_over_sigma * self.sigma, self.sigma, self.emission, self.absorption)?,
        };
        if self.correlation != 0.0 {
            scene.with_correlation(self.correlation)
        } else {
            Ok(scene)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_pixels")]
    pub pixels_per_sigma: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig { strategy: Strategy::Spade, truncation: 8, pixels_per_sigma: 20, half_width: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { trials: 1_000_000, seed: 0, replications: 200, output: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_grid")]
    pub d_over_sigma: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { d_over_sigma: default_grid(), strategies: default_strategies() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    #[serde(default = "default_ns")]
    pub n_s: Vec<f64>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "yes")]
    pub oracle: bool,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config { n_s: default_ns(), rates: default_rates(), separation: 0.1, oracle: true }
    }
}

/// Complete, versioned description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default = "default_probe")]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub table1: Table1Config,
    #[serde(default)]
    pub noise_study: NoiseStudy,
    #[serde(default)]
    pub echo_verify: EchoVerifyOptions,
}

fn default_separation() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}
fn default_rate() -> f64 {
    0.01
}
fn default_strategy() -> Strategy {
    Strategy::Spade
}
fn default_truncation() -> usize {
    8
}
fn default_pixels() -> usize {
    20
}
fn default_half_width() -> f64 {
    6.0
}
fn default_trials() -> u64 {
    1_000_000
}
fn default_replications() -> usize {
    200
}
fn default_grid() -> Vec<f64> {
    vec![0.01, 0.02, 0.04, 0.06, 0.08, 0.1]
}
fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Direct, Strategy::Spade, Strategy::Echo]
}
fn default_ns() -> Vec<f64> {
    vec![1.0, 4.0]
}
fn default_rates() -> Vec<f64> {
    vec![0.01, 0.05]
}
fn yes() -> bool {
    true
}
fn default_probe() -> ProbeConfig {
    ProbeConfig::twin_beam(1.0)
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config { path: path.into(), message: message.into() }
}

fn positive(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be ≥ 0, got {v}")))
    }
}

fn positive_list(path: &str, vs: &[f64]) -> Result<(), CliError> {
    if vs.is_empty() {
        return Err(invalid(path, "must not be empty"));
    }
    vs.iter().enumerate().try_for_each(|(i, v)| positive(&format!("{path}[{i}]"), *v))
}

impl ScenarioConfig {
    pub fn new(experiment: Experiment) -> Self {
        ScenarioConfig {
            version: SCHEMA_VERSION,
            experiment,
            scene: SceneConfig::default(),
            probe: default_probe(),
            noise: NoiseConfig::none(),
            measurement: MeasurementConfig::default(),
            run: RunConfig::default(),
            sweep: SweepConfig::default(),
            table1: Table1Config::default(),
            noise_study: NoiseStudy::default(),
            echo_verify: EchoVerifyOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            invalid(if path == "." { String::new() } else { path }, format!("line {} column {}: {inner}", inner.line(), inner.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config { path: p, message } => {
                CliError::Config { path: p, message: format!("{}: {message}", path.display()) }
            }
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid("version", format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.version)));
        }
        let s = &self.scene;
        positive("scene.sigma", s.sigma)?;
        non_negative("scene.emission", s.emission)?;
        non_negative("scene.absorption", s.absorption)?;
        non_negative("scene.d_over_sigma", s.d_over_sigma)?;
        if !(-1.0..=1.0).contains(&s.correlation) {
            return Err(invalid("scene.correlation", "must lie in [-1, 1]"));
        }
        if let Some(src) = &s.sources {
            if src.is_empty() {
                return Err(invalid("scene.sources", "must not be empty"));
            }
            for (i, p) in src.iter().enumerate() {
                non_negative(&format!("scene.sources[{i}].weight"), p.weight)?;
                if !p.position.is_finite() {
                    return Err(invalid(format!("scene.sources[{i}].position"), "must be finite"));
                }
            }
        }
        s.build().map_err(|e| invalid("scene", e.to_string()))?;
        let m = &self.measurement;
        if m.truncation == 0 {
            return Err(invalid("measurement.truncation", "must be ≥ 1"));
        }
        if m.pixels_per_sigma == 0 {
            return Err(invalid("measurement.pixels_per_sigma", "must be ≥ 1"));
        }
        positive("measurement.half_width", m.half_width)?;
        self.probe.validate(m.truncation).map_err(|e| invalid("probe", e.to_string()))?;
        self.noise.validate().map_err(|e| invalid("noise", e.to_string()))?;
        if self.run.trials == 0 {
            return Err(invalid("run.trials", "must be ≥ 1"));
        }
        if self.run.replications == 1 {
            return Err(invalid("run.replications", "use 0 (no Monte Carlo) or at least 2"));
        }
        positive_list("sweep.d_over_sigma", &self.sweep.d_over_sigma)?;
        if self.sweep.strategies.is_empty() {
            return Err(invalid("sweep.strategies", "must not be empty"));
        }
        if self.table1.n_s.is_empty() {
            return Err(invalid("table1.n_s", "must not be empty"));
        }
        for (i, n) in self.table1.n_s.iter().enumerate() {
            non_negative(&format!("table1.n_s[{i}]"), *n)?;
        }
        positive_list("table1.rates", &self.table1.rates)?;
        positive("table1.separation", self.table1.separation)?;
        let ns = &self.noise_study;
        non_negative("noise_study.gamma_up", ns.gamma_up)?;
        non_negative("noise_study.gamma_down", ns.gamma_down)?;
        non_negative("noise_study.squeeze_r", ns.squeeze_r)?;
        positive("noise_study.step", ns.step)?;
        let ev = &self.echo_verify;
        if ev.samples == 0 {
            return Err(invalid("echo_verify.samples", "must be ≥ 1"));
        }
        if ev.pairs == 0 {
            return Err(invalid("echo_verify.pairs", "must be ≥ 1"));
        }
        positive("echo_verify.max_norm", ev.max_norm)?;
        non_negative("echo_verify.r_max", ev.r_max)?;
        positive("echo_verify.leak_tol", ev.leak_tol)?;
        Ok(())
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            emission: self.scene.emission,
            sigma: self.scene.sigma,
            probe: self.probe.clone(),
            truncation: self.measurement.truncation,
            pixels_per_sigma: self.measurement.pixels_per_sigma,
            half_width: self.measurement.half_width,
            plan: ReplicationPlan { trials: self.run.trials, replications: self.run.replications, seed: self.run.seed },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"version": 1, "experiment": "rayleigh_sweep"}"#).unwrap();
        assert_eq!(cfg, ScenarioConfig::new(Experiment::RayleighSweep));
    }

    #[test]
    fn bad_sigma_names_field() {
        let err = ScenarioConfig::from_json(r#"{"version": 1, "experiment": "mle", "scene": {"sigma": 0}}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "scene.sigma"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn type_errors_carry_path_and_line() {
        let text = "{\n  \"version\": 1,\n  \"experiment\": \"mle\",\n  \"run\": {\"trials\": \"many\"}\n}";
        let err = ScenarioConfig::from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.trials") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ScenarioConfig::from_json(r#"{"version": 1, "experiment": "mle", "scene": {"sigmaa": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("sigmaa"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = ScenarioConfig::from_json(r#"{"version": 7, "experiment": "mle"}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref path, .. } if path == "version"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ScenarioConfig::new(Experiment::Mle);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
