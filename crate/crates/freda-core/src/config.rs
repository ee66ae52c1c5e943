//! Run-level configuration shared by the CLI and the harness: method and
//! scenario selectors, the corruption recipe, and the adapter knobs, with
//! JSON round-tripping for config files and report echoes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freda::FredaConfig;
use crate::stream::{CorruptionKind, CorruptionSpec};

/// Adaptation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Frozen source model with stored statistics.
    Source,
    /// Test-batch normalization.
    Tbn,
    /// Cluster-decentralized test-batch normalization.
    TbnDec,
    /// Entropy minimization over BN affine parameters.
    Tent,
    /// Frequency-driven decentralized adaptation.
    Freda,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Tbn => "tbn",
            Method::TbnDec => "tbn-dec",
            Method::Tent => "tent",
            Method::Freda => "freda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Method::Source),
            "tbn" => Ok(Method::Tbn),
            "tbn-dec" => Ok(Method::TbnDec),
            "tent" => Ok(Method::Tent),
            "freda" => Ok(Method::Freda),
            other => Err(Error::config(
                "method",
                format!("unknown method {other:?}; use source|tbn|tbn-dec|tent|freda"),
            )),
        }
    }
}

/// Stream composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Every sample draws its domain independently at random.
    Mixed,
    /// Domains appear one after another in list order.
    Continual,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Mixed => "mixed",
            Scenario::Continual => "continual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Scenario::Mixed),
            "continual" => Ok(Scenario::Continual),
            other => Err(Error::config(
                "scenario",
                format!("unknown scenario {other:?}; use mixed|continual"),
            )),
        }
    }
}

fn default_corruptions() -> Vec<String> {
    ["gaussian_noise", "gaussian_blur", "contrast", "pixelate"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// Everything one run needs besides the checkpoint and the exemplar dataset.
/// Missing JSON keys keep their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub scenario: Scenario,
    /// Corruption names; severity below applies to all of them.
    pub corruptions: Vec<String>,
    pub severity: u8,
    /// Total stream length (split evenly across domains in the continual
    /// scenario).
    pub length: usize,
    pub seed: u64,
    /// Emit the entropy-minimization baseline's predictions from before its
    /// update instead of after (the default convention is post-update).
    pub predict_before_update: bool,
    /// Adapter knobs. `lr` and `batch_size` apply to every method.
    pub freda: FredaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Freda,
            scenario: Scenario::Mixed,
            corruptions: default_corruptions(),
            severity: 5,
            length: 8000,
            seed: 0,
            predict_before_update: false,
            freda: FredaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Resolves the corruption list against the configured severity.
    pub fn corruption_specs(&self) -> Result<Vec<CorruptionSpec>> {
        if self.corruptions.is_empty() {
            return Err(Error::config("corruptions", "need at least one corruption"));
        }
        self.corruptions
            .iter()
            .map(|name| {
                let kind = CorruptionKind::parse(name)
                    .map_err(|e| Error::config("corruptions", e.to_string()))?;
                CorruptionSpec::new(kind, self.severity)
            })
            .collect()
    }

    /// Full validation; returns the resolved corruption specs on success.
    pub fn validate(&self, num_classes: usize) -> Result<Vec<CorruptionSpec>> {
        let specs = self.corruption_specs()?;
        if self.scenario == Scenario::Mixed && specs.len() < 2 {
            return Err(Error::config(
                "corruptions",
                "mixed scenario needs at least 2 domains",
            ));
        }
        if self.scenario == Scenario::Continual && self.length % specs.len() != 0 {
            return Err(Error::config(
                "length",
                format!(
                    "continual scenario needs length divisible by the {} domains",
                    specs.len()
                ),
            ));
        }
        self.freda.validate(num_classes)?;
        Ok(specs)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
