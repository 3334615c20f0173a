//! Run configuration: strict JSON with unknown-key rejection.

use std::path::{Path, PathBuf};

use radner_core::field::GridSpec;
use radner_core::verification::{default_menu, Perturbation, VerifyOptions, MIN_PATHS};
use radner_core::{AgentParams, DividendPreset, MarketModel, TruncationConfig, TruncationMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub truncation: TruncationBlock,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verify: VerifyBlock,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub agents: Agents,
    pub horizon: f64,
    #[serde(rename = "D0")]
    pub d0: f64,
    pub dividend: DividendConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Agents {
    pub agent1: AgentParams,
    pub agent2: AgentParams,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DividendConfig {
    pub preset: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    /// Bound on the drift and (inverse) volatility.
    #[serde(rename = "bound_M")]
    pub bound_m: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Fractions of the horizon.
    pub checkpoints: Vec<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 42,
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationBlock {
    pub mode: TruncationMode,
    /// Fixed level, or the first rung of the auto ladder.
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "N_max")]
    pub n_max: u32,
}

impl Default for TruncationBlock {
    fn default() -> Self {
        Self {
            mode: TruncationMode::Auto,
            n: 4,
            n_max: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
    pub formats: Vec<Format>,
    /// Number of equilibrium paths written to `paths.csv`.
    pub export_paths: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec![Format::Csv, Format::Json],
            export_paths: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyBlock {
    pub perturbations: Vec<Perturbation>,
    pub identity_samples: usize,
    pub refine_clearing: bool,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            perturbations: default_menu(),
            identity_samples: 1000,
            refine_clearing: true,
        }
    }
}

/// Parses a config, reporting the JSON path of the first offending field.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{} is not UTF-8: {e}", path.display())))?;
    Ok((parse_config(text)?, bytes))
}

fn range_error(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if g.n_time < 1 {
            return Err(range_error("grid.n_time", "must be >= 1"));
        }
        if g.n_space < 4 {
            return Err(range_error("grid.n_space", "must be >= 4"));
        }
        if !(g.coverage_k.is_finite() && g.coverage_k > 0.0) {
            return Err(range_error("grid.coverage_k", "must be finite and > 0"));
        }
        if !(g.cfl_safety > 0.0 && g.cfl_safety <= 1.0) {
            return Err(range_error("grid.cfl_safety", "must lie in (0, 1]"));
        }
        if self.mc.n_paths < 1 {
            return Err(range_error("mc.n_paths", "must be >= 1"));
        }
        if self.mc.checkpoints.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(range_error("mc.checkpoints", "fractions of the horizon must lie in [0, 1]"));
        }
        let t = &self.truncation;
        if t.n < 1 || t.n_max < t.n {
            return Err(range_error("truncation", format!("need 1 <= N <= N_max, got N = {}, N_max = {}", t.n, t.n_max)));
        }
        if self.output.formats.is_empty() {
            return Err(range_error("output.formats", "choose at least one of csv, json"));
        }
        for p in &self.verify.perturbations {
            p.validate().map_err(|e| range_error("verify.perturbations", e))?;
        }
        self.market_model()?;
        Ok(())
    }

    /// Builds the core model; preset parameter errors carry their JSON path.
    pub fn market_model(&self) -> Result<MarketModel, CliError> {
        let d = &self.model.dividend;
        let tagged = serde_json::json!({ "preset": d.preset, "params": d.params });
        let preset: DividendPreset = serde_path_to_error::deserialize(tagged).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("model.dividend.{path}: {}", e.into_inner()))
        })?;
        let a = &self.model.agents;
        MarketModel::new(a.agent1, a.agent2, self.model.horizon, self.model.d0, preset, d.bound_m)
            .map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn truncation_config(&self) -> TruncationConfig {
        let t = self.truncation;
        match t.mode {
            TruncationMode::Fixed => TruncationConfig::fixed(t.n),
            TruncationMode::Auto => TruncationConfig {
                n: t.n,
                ..TruncationConfig::auto(t.n_max)
            },
        }
    }

    pub fn verify_options(&self, corrupt_kappa: Option<f64>) -> Result<VerifyOptions, CliError> {
        if self.mc.n_paths < MIN_PATHS {
            return Err(range_error("mc.n_paths", format!("verification needs at least {MIN_PATHS} paths, got {}", self.mc.n_paths)));
        }
        Ok(VerifyOptions {
            checkpoints: self.mc.checkpoints.clone(),
            seed: self.mc.seed,
            corrupt_kappa,
            corrupt_driver_sign: false,
            perturbations: self.verify.perturbations.clone(),
            identity_samples: self.verify.identity_samples,
            refine_clearing: self.verify.refine_clearing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P_STAR: &str = r#"{
        "model": {
            "agents": {
                "agent1": {"alpha": 2.0, "rho": 0.0, "theta0": 0.5},
                "agent2": {"alpha": 2.0, "rho": 0.0, "theta0": 0.5}
            },
            "horizon": 1.0,
            "D0": 1.0,
            "dividend": {"preset": "constant", "params": {"mu": 0.0, "sigma": 1.0}, "bound_M": 1.0}
        }
    }"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse_config(P_STAR).unwrap();
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(c.mc.n_paths, 10_000);
        assert_eq!(c.truncation.n_max, 64);
        assert_eq!(c.output.formats, vec![Format::Csv, Format::Json]);
        let m = c.market_model().unwrap();
        assert!(m.is_constant());
    }

    #[test]
    fn missing_bound_reports_path() {
        let text = P_STAR.replace(r#", "bound_M": 1.0"#, "");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.dividend") && msg.contains("bound_M"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = P_STAR.replace(r#""horizon": 1.0"#, r#""horizon": 1.0, "horizn": 2.0"#);
        assert!(parse_config(&text).unwrap_err().to_string().contains("horizn"));
        let text = P_STAR.replace(r#""sigma": 1.0"#, r#""sigma": 1.0, "sigm": 1.0"#);
        let msg = parse_config(&text).unwrap_err().to_string();
        assert!(msg.contains("model.dividend") && msg.contains("sigm"), "{msg}");
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let text = P_STAR.replace(r#""constant""#, r#""cubic""#);
        assert!(parse_config(&text).unwrap_err().to_string().contains("cubic"));
    }

    #[test]
    fn range_checks() {
        let text = P_STAR.replace(r#""horizon": 1.0"#, r#""horizon": -1.0"#);
        assert!(parse_config(&text).unwrap_err().to_string().contains("horizon"));
        let text = P_STAR.replacen("{\n        \"model\"", "{\"grid\": {\"cfl_safety\": 1.5},\n        \"model\"", 1);
        assert!(parse_config(&text).unwrap_err().to_string().contains("cfl_safety"));
    }

    #[test]
    fn verify_needs_enough_paths() {
        let mut c = parse_config(P_STAR).unwrap();
        c.mc.n_paths = 999;
        assert_eq!(c.verify_options(None).unwrap_err().exit_code(), 2);
    }
}
