//! Declarative run configuration (TOML files) and the replayable run
//! manifest (JSON). Command-line flags only override file values, so a
//! manifest plus the binary reproduces a run exactly.

use crate::data::{TaskKind, TaskSpec};
use crate::distill::{
    Ablation, CosineGranularity, DistillConfig, OptimizerKind, PerturbScope, TrainOptions,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

/// `[task]`: which synthetic dataset a run trains and evaluates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// Generator name: `parity`, `pair-match` or `regression`.
    pub name: String,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub generator_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl TaskSection {
    pub fn task_spec(&self) -> Result<TaskSpec> {
        let kind = match self.name.as_str() {
            "parity" => TaskKind::SingleClassify,
            "pair-match" => TaskKind::PairClassify,
            "regression" => TaskKind::Regression,
            other => {
                return Err(Error::Config(format!(
                    "unknown task {other:?}; expected parity, pair-match or regression"
                )))
            }
        };
        let spec = TaskSpec {
            name: self.name.clone(),
            kind,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            num_classes: self.num_classes,
            generator_seed: self.generator_seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `[model]` / `[student]`: encoder geometry that is not implied by the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
}

impl ModelSection {
    pub fn encoder_config(&self, task: &TaskSection) -> EncoderConfig {
        EncoderConfig {
            vocab_size: task.vocab_size,
            max_len: task.seq_len,
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            num_classes: task.num_classes,
        }
    }
}

fn default_batch() -> usize {
    16
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

/// `[train]`: plain training loop settings for the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl TrainSection {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }
}

/// Full config file for `train-teacher`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl TeacherRunConfig {
    pub fn from_toml_str(text: &str) -> Result<TeacherRunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<TeacherRunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

fn default_negatives() -> usize {
    15
}
fn default_tau() -> f64 {
    1.1
}
fn default_split() -> f64 {
    0.8
}
fn default_stage2() -> (f64, f64, f64) {
    (1.0, 1.0, 3.0)
}
fn default_true() -> bool {
    true
}
fn default_scope() -> PerturbScope {
    PerturbScope::Whole
}
fn default_granularity() -> CosineGranularity {
    CosineGranularity::Whole
}
fn default_ablation() -> Ablation {
    Ablation::Full
}

/// `[distill]`: everything the distillation pipeline needs beyond the
/// task and the student geometry. Defaults follow the reference setup:
/// 15 in-batch negatives, batch 16, temperature 1.1, an 80/20 stage
/// split and stage-2 weights 1:1:3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub teacher_checkpoint: PathBuf,
    /// Teacher layer (1-indexed) per student layer; omitted means the
    /// uniform-skip default.
    #[serde(default)]
    pub layer_map: Option<Vec<usize>>,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_split")]
    pub stage_split: f64,
    #[serde(default = "default_stage2")]
    pub stage2_weights: (f64, f64, f64),
    #[serde(default = "default_true")]
    pub perturbation: bool,
    #[serde(default = "default_scope")]
    pub perturb_scope: PerturbScope,
    #[serde(default = "default_granularity")]
    pub cosine_granularity: CosineGranularity,
    #[serde(default = "default_true")]
    pub hard_loss_literal: bool,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Full config file for `distill`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub task: TaskSection,
    pub student: ModelSection,
    pub distill: DistillSection,
}

impl DistillRunConfig {
    pub fn from_toml_str(text: &str) -> Result<DistillRunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<DistillRunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Resolve the library-level pipeline config against a teacher depth.
    pub fn distill_config(&self, teacher_layers: usize) -> Result<DistillConfig> {
        let d = &self.distill;
        let layer_map = match &d.layer_map {
            Some(m) => m.clone(),
            None => crate::distill::default_layer_map(teacher_layers, self.student.num_layers)?,
        };
        Ok(DistillConfig {
            layer_map,
            negatives: d.negatives,
            batch_size: d.batch_size,
            tau: d.tau,
            stage_split: d.stage_split,
            stage2_weights: d.stage2_weights,
            perturbation: d.perturbation,
            perturb_scope: d.perturb_scope,
            cosine_granularity: d.cosine_granularity,
            hard_loss_literal: d.hard_loss_literal,
            ablation: d.ablation,
            optimizer: d.optimizer,
            learning_rate: d.learning_rate,
            total_steps: d.total_steps,
            seed: d.seed,
        })
    }
}

/// Extract only the `[task]` table from any run config file.
pub fn load_task_section(path: &Path) -> Result<TaskSection> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let task = value
        .get("task")
        .ok_or_else(|| Error::Config("config file has no [task] table".into()))?;
    task.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
    pub steps: usize,
}

/// A complete record of one run: resolved configuration, artifact paths,
/// timings and final metrics. Replaying the configuration reproduces the
/// artifacts bit for bit; timing fields are informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub label: String,
    pub task: TaskSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    pub artifacts: BTreeMap<String, String>,
    pub timing: RunTiming,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn from_json_str(text: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEACHER_TOML: &str = r#"
[task]
name = "parity"
seq_len = 8
vocab_size = 8
num_classes = 2
generator_seed = 7
train_size = 64
eval_size = 16

[model]
num_layers = 2
hidden_size = 8
num_heads = 2
ffn_size = 16

[train]
steps = 5
learning_rate = 1e-3
seed = 1
out_dir = "out/teacher"
"#;

    #[test]
    fn teacher_config_parses_with_defaults() {
        let cfg = TeacherRunConfig::from_toml_str(TEACHER_TOML).unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.task.task_spec().unwrap().kind, TaskKind::SingleClassify);
        let enc = cfg.model.encoder_config(&cfg.task);
        assert_eq!(enc.max_len, 8);
        assert_eq!(enc.num_classes, 2);
    }

    #[test]
    fn missing_field_names_the_field() {
        let broken = TEACHER_TOML.replace("seq_len = 8\n", "");
        let err = TeacherRunConfig::from_toml_str(&broken).unwrap_err();
        assert!(err.to_string().contains("seq_len"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let broken = TEACHER_TOML.replace("steps = 5", "steps = 5\nbogus = 1");
        assert!(TeacherRunConfig::from_toml_str(&broken).is_err());
    }

    const DISTILL_TOML: &str = r#"
[task]
name = "parity"
seq_len = 8
vocab_size = 8
num_classes = 2
generator_seed = 7
train_size = 64
eval_size = 16

[student]
num_layers = 2
hidden_size = 8
num_heads = 2
ffn_size = 16

[distill]
teacher_checkpoint = "out/teacher/checkpoint"
learning_rate = 1e-3
total_steps = 10
seed = 3
out_dir = "out/distill"
"#;

    #[test]
    fn distill_defaults_follow_reference_setup() {
        let cfg = DistillRunConfig::from_toml_str(DISTILL_TOML).unwrap();
        assert_eq!(cfg.distill.negatives, 15);
        assert_eq!(cfg.distill.batch_size, 16);
        assert_eq!(cfg.distill.tau, 1.1);
        assert_eq!(cfg.distill.stage_split, 0.8);
        assert_eq!(cfg.distill.stage2_weights, (1.0, 1.0, 3.0));
        assert!(cfg.distill.perturbation);
        assert_eq!(cfg.distill.ablation, Ablation::Full);
        let resolved = cfg.distill_config(4).unwrap();
        assert_eq!(resolved.layer_map, vec![2, 4]);
    }

    #[test]
    fn ablation_names_parse_from_toml() {
        for (name, expect) in [
            ("full", Ablation::Full),
            ("drop-cosnce", Ablation::DropCosNce),
            ("drop-soft", Ablation::DropSoft),
            ("drop-hard", Ablation::DropHard),
            ("mse-intermediate", Ablation::MseIntermediate),
            ("no-two-stage", Ablation::NoTwoStage),
            ("no-perturbation", Ablation::NoPerturbation),
        ] {
            let toml_text =
                DISTILL_TOML.replace("seed = 3", &format!("seed = 3\nablation = \"{name}\""));
            let cfg = DistillRunConfig::from_toml_str(&toml_text).unwrap();
            assert_eq!(cfg.distill.ablation, expect, "{name}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = TeacherRunConfig::from_toml_str(TEACHER_TOML).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".to_string(), 0.97);
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            command: "train-teacher".into(),
            label: "teacher".into(),
            task: cfg.task.clone(),
            teacher: Some(cfg.model.encoder_config(&cfg.task)),
            student: None,
            train: Some(cfg.train.clone()),
            distill: None,
            artifacts: BTreeMap::new(),
            timing: RunTiming { wall_seconds: 1.5, steps: 5 },
            metrics,
        };
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        let back = RunManifest::from_json_str(&text).unwrap();
        assert_eq!(back, manifest);
    }
}
