//! Sectioned `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use hmc_colloc::GammaPolicy;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub density: DensitySection,
    pub sampler: SamplerSection,
    pub ode: OdeSection,
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub chains: usize,
    /// Directory for emitted files; nothing is written when unset.
    pub output: Option<PathBuf>,
    /// Worker threads; 0 means available parallelism.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            chains: 1,
            output: None,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    /// `½ Σ λ_i (x_i − μ_i)²`.
    Gaussian,
    /// `Σ x_i²/2 + log cosh x_i`, with `m₂ = 1`, `M₂ = 2`.
    Softabs,
    /// `Σ φ_i(a_iᵀx) + m₂‖x‖²/2` from a matrix file.
    Glm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Logistic,
    PseudoHuber,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub kind: DensityKind,
    pub dim: usize,
    pub precision: Option<Vec<f64>>,
    pub mean: Option<Vec<f64>>,
    /// Matrix file, relative paths resolved against the config file.
    pub matrix: Option<PathBuf>,
    pub loss: LossName,
    pub huber_delta: f64,
    pub m2: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self {
            kind: DensityKind::Gaussian,
            dim: 1,
            precision: None,
            mean: None,
            matrix: None,
            loss: LossName::Logistic,
            huber_delta: 1.0,
            m2: 1.0,
        }
    }
}

/// Step size: a number, or `"cap"` for `m₂^{1/4}/(2M₂^{3/4})`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum StepSetting {
    Value(f64),
    Named(StepName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepName {
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    #[default]
    Certified,
    Measured,
}

impl From<PolicyName> for GammaPolicy {
    fn from(p: PolicyName) -> Self {
        match p {
            PolicyName::Certified => GammaPolicy::Certified,
            PolicyName::Measured => GammaPolicy::Measured,
        }
    }
}

impl PolicyName {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Certified => "certified",
            PolicyName::Measured => "measured",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub eps: f64,
    /// Failure probability of the GLM drift event.
    pub eta: f64,
    pub x0: Option<Vec<f64>>,
    pub h: Option<StepSetting>,
    pub iterations: Option<usize>,
    pub delta: Option<f64>,
    pub ode_accuracy: Option<f64>,
    pub c_h: Option<f64>,
    pub c_delta: Option<f64>,
    pub gamma_policy: PolicyName,
    pub monitor_multiplier: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            eta: 0.1,
            x0: None,
            h: None,
            iterations: None,
            delta: None,
            ode_accuracy: None,
            c_h: None,
            c_delta: None,
            gamma_policy: PolicyName::Certified,
            monitor_multiplier: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeName {
    /// `x′ = x`, `x(0) = 1`.
    Exp,
    /// `x″ = −x`, `x(0) = 1`, `x′(0) = 0`.
    Oscillator,
    /// `s″ = −AAᵀφ′(s) − m₂s` for the configured GLM.
    GlmS,
}

impl OdeName {
    pub fn as_str(self) -> &'static str {
        match self {
            OdeName::Exp => "exp",
            OdeName::Oscillator => "oscillator",
            OdeName::GlmS => "glm-s",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeSection {
    pub problem: OdeName,
    pub horizon: f64,
    pub eps: f64,
    pub degree: usize,
    pub pieces: usize,
    pub segments: Option<usize>,
    /// Number of equally spaced output times, endpoints included.
    pub grid: usize,
    pub gamma_policy: PolicyName,
    /// Initial position and velocity in x-space for `glm-s`.
    pub x0: Option<Vec<f64>>,
    pub v0: Option<Vec<f64>>,
}

impl Default for OdeSection {
    fn default() -> Self {
        Self {
            problem: OdeName::Exp,
            horizon: 1.0,
            eps: 1e-8,
            degree: 8,
            pieces: 1,
            segments: None,
            grid: 11,
            gamma_policy: PolicyName::Measured,
            x0: None,
            v0: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub contraction_trials: usize,
    pub bias_chains: usize,
    pub basis_max_degree: usize,
    pub basis_max_pieces: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            contraction_trials: 200,
            bias_chains: 128,
            basis_max_degree: 12,
            basis_max_pieces: 16,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let (Some(base), Some(m)) = (base, cfg.density.matrix.as_mut()) {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    /// Field-level checks that do not need a density.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("sampler.eps", self.sampler.eps)?;
        positive("density.m2", self.density.m2)?;
        positive("ode.horizon", self.ode.horizon)?;
        positive("ode.eps", self.ode.eps)?;
        positive("sampler.monitor_multiplier", self.sampler.monitor_multiplier)?;
        if !(self.sampler.eta > 0.0 && self.sampler.eta < 1.0) {
            return Err(CliError::Config(format!(
                "sampler.eta must lie in (0, 1), got {}",
                self.sampler.eta
            )));
        }
        for (name, v) in [
            ("sampler.delta", self.sampler.delta),
            ("sampler.ode_accuracy", self.sampler.ode_accuracy),
            ("sampler.c_h", self.sampler.c_h),
            ("sampler.c_delta", self.sampler.c_delta),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if let Some(StepSetting::Value(h)) = self.sampler.h {
            positive("sampler.h", h)?;
        }
        if self.run.chains == 0 {
            return Err(CliError::Config("run.chains must be at least 1".into()));
        }
        if self.sampler.iterations == Some(0) {
            return Err(CliError::Config("sampler.iterations must be at least 1".into()));
        }
        if self.ode.pieces == 0 || self.ode.grid < 2 || self.ode.segments == Some(0) {
            return Err(CliError::Config(
                "ode.pieces and ode.segments must be positive and ode.grid at least 2".into(),
            ));
        }
        if self.density.kind == DensityKind::Glm && self.density.matrix.is_none() {
            return Err(CliError::Config("density.kind = \"glm\" needs density.matrix".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("", None).unwrap();
        assert_eq!(c.run.chains, 1);
        assert_eq!(c.density.kind, DensityKind::Gaussian);
        assert_eq!(c.ode.problem, OdeName::Exp);
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            [run]
            seed = 9
            chains = 4
            [density]
            kind = "glm"
            matrix = "a.txt"
            loss = "pseudo-huber"
            [sampler]
            h = "cap"
            gamma_policy = "measured"
            [ode]
            problem = "glm-s"
        "#;
        let c = ExperimentConfig::from_toml(text, Some(Path::new("/data"))).unwrap();
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.density.matrix.as_deref(), Some(Path::new("/data/a.txt")));
        assert_eq!(c.density.loss, LossName::PseudoHuber);
        assert_eq!(c.sampler.h, Some(StepSetting::Named(StepName::Cap)));
        assert_eq!(c.sampler.gamma_policy, PolicyName::Measured);
        assert_eq!(c.ode.problem, OdeName::GlmS);
        let c = ExperimentConfig::from_toml("[sampler]\nh = 0.25", None).unwrap();
        assert_eq!(c.sampler.h, Some(StepSetting::Value(0.25)));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_toml("[run]\nsed = 1", None).is_err());
        assert!(ExperimentConfig::from_toml("[sampler]\nh = \"big\"", None).is_err());
        let c = ExperimentConfig::from_toml("[sampler]\neps = -1.0", None).unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml("[density]\nkind = \"glm\"", None).unwrap();
        assert!(c.validate().is_err());
    }
}
