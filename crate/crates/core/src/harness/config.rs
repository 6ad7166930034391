use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::HeadId;
use crate::classifier::HeadClassification;
use crate::compression::{PolicyConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::model::{plant_mix, plant_patterns, synth_model, ExecMode, PatternSpec, SyntheticModel};
use crate::schedule::{build_schedule, ScaleSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub a: u64,
    #[serde(rename = "K")]
    pub scales: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub pattern: PatternSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub planted: Vec<PlantedHead>,
    /// Plant every head: this fraction Vertical, the rest MultiDiagonal.
    /// Applied before `planted`, which can override individual heads.
    #[serde(default)]
    pub planted_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Average per-head budget `B`.
    pub average: usize,
    /// Fix `B_C` directly instead of deriving it from `ratio`.
    #[serde(default)]
    pub contextual: Option<usize>,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Contextual fraction used in the split; defaults to the classified fraction.
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_ratio() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassificationSource {
    Path(PathBuf),
    Inline(HeadClassification),
}

impl ClassificationSource {
    pub fn resolve(&self) -> Result<HeadClassification> {
        match self {
            ClassificationSource::Path(p) => HeadClassification::load(p),
            ClassificationSource::Inline(c) => Ok(c.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Lowest-variance contextual heads first.
    Contextual,
    /// Highest-variance structural heads first.
    Structural,
    /// Every head in index order.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub head_type: MaskTarget,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub attention_maps: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    /// Seed of the input and chaining noise.
    pub seed: u64,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub budget: Option<BudgetConfig>,
    #[serde(default)]
    pub classification: Option<ClassificationSource>,
    #[serde(default)]
    pub masking: Option<MaskConfig>,
    #[serde(default)]
    pub mode: ExecMode,
    /// Also run the uncompressed reference and report divergence.
    #[serde(default = "default_true")]
    pub compare_reference: bool,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl RunConfig {
    /// Minimal uncompressed configuration.
    pub fn new(
        a: u64,
        scales: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        seed: u64,
    ) -> Self {
        RunConfig {
            schedule: ScheduleConfig { a, scales },
            model: ModelConfig {
                layers,
                heads,
                model_dim: heads * head_dim,
                head_dim,
                seed,
                planted: Vec::new(),
                planted_fraction: None,
            },
            seed,
            policy: PolicyConfig::new(PolicyKind::None),
            budget: None,
            classification: None,
            masking: None,
            mode: ExecMode::Full,
            compare_reference: true,
            outputs: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        build_schedule(self.schedule.a, self.schedule.scales)
    }

    pub fn build_model(&self, schedule: &ScaleSchedule) -> Result<SyntheticModel> {
        let m = &self.model;
        let mut model = synth_model(m.layers, m.heads, m.model_dim, m.head_dim, m.seed)?;
        if let Some(f) = m.planted_fraction {
            model = plant_mix(model, schedule, f, m.seed)?;
        }
        let specs = m
            .planted
            .iter()
            .map(|p| (HeadId::new(p.layer, p.head), p.pattern.clone()))
            .collect();
        plant_patterns(model, specs)
    }

    /// The config without its output section, as echoed into traces and hashed.
    pub fn echo(&self) -> RunConfig {
        RunConfig {
            outputs: OutputConfig {
                attention_maps: self.outputs.attention_maps,
                ..OutputConfig::default()
            },
            ..self.clone()
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical (key-sorted) JSON echo.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.echo()).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `rho = 1 - B / T_K`, clamped at 0.
    pub fn compression_ratio(&self, schedule: &ScaleSchedule) -> f64 {
        match (&self.budget, self.policy.kind) {
            (_, PolicyKind::None) | (None, _) => 0.0,
            (Some(b), _) => (1.0 - b.average as f64 / schedule.total_tokens() as f64).max(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_json() {
        let text = r#"{
            "schedule": {"a": 2, "K": 4},
            "model": {"layers": 1, "heads": 2, "model_dim": 8, "head_dim": 4, "seed": 1,
                      "planted": [{"layer": 0, "head": 1, "pattern": {"kind": "vertical", "columns": [0, 2]}}]},
            "seed": 5,
            "policy": {"kind": "head_aware"},
            "budget": {"average": 40},
            "classification": "heads.json"
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        assert_eq!(c.policy.kind, PolicyKind::HeadAware);
        assert_eq!(c.policy.n_obs, 32);
        assert_eq!(c.budget.as_ref().unwrap().ratio, 2.0);
        assert!(matches!(
            c.classification,
            Some(ClassificationSource::Path(_))
        ));
        assert!(c.compare_reference);
        let s = c.schedule().unwrap();
        assert!((c.compression_ratio(&s) - (1.0 - 40.0 / 85.0)).abs() < 1e-12);
        let m = c.build_model(&s).unwrap();
        assert_eq!(m.planted().len(), 1);
    }

    #[test]
    fn hash_ignores_output_paths() {
        let mut a = RunConfig::new(2, 3, 1, 1, 4, 7);
        let mut b = a.clone();
        a.outputs.trace = Some("x.json".into());
        b.outputs.trace = Some("y.json".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn bad_json_is_config_error() {
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
    }
}
