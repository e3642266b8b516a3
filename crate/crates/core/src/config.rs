//! Declarative experiment configuration: one TOML file with `data`, `model`,
//! `train` and `eval` sections. CLI flags override individual keys; the
//! `MUVIE_SEED` environment variable overrides both the data and train seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::Ablation;
use crate::model::{ModelConfig, Task};
use crate::training::{LossWeights, TrainOptions, TwoStageSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("missing `{0}` section")]
    MissingSection(&'static str),
    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesConfig {
    pub train: usize,
    pub test: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            train: 8,
            test: 1,
            frames: 16,
            width: 64,
            height: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<String>,
    pub scenes: Option<ScenesConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub tasks: Vec<String>,
    pub d_scene: usize,
    pub d_task: usize,
    pub d_prompt: usize,
    pub heads: usize,
    pub hidden: usize,
    pub cva_depth: usize,
    pub cta_depth: usize,
    pub angle_frequencies: usize,
    pub samples_per_ray: usize,
    pub ablation: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            tasks: d.tasks.iter().map(|t| t.name().to_string()).collect(),
            d_scene: d.d_scene,
            d_task: d.d_task,
            d_prompt: d.d_prompt,
            heads: d.heads,
            hidden: d.hidden,
            cva_depth: d.cva_depth,
            cta_depth: d.cta_depth,
            angle_frequencies: d.angle_frequencies,
            samples_per_ray: d.samples_per_ray,
            ablation: "full".into(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub rays_per_iter: usize,
    pub source_views: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub setting2: bool,
    pub log_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainOptions::default();
        Self {
            stage1_iters: d.schedule.stage1_iters,
            stage2_iters: d.schedule.stage2_iters,
            rays_per_iter: d.rays_per_iter,
            source_views: d.source_views,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            seed: d.seed,
            setting2: d.setting2,
            log_every: d.log_every,
            loss_weights: d.loss_weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub source_views: usize,
    pub chunk: usize,
    pub dump_images: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            source_views: 5,
            chunk: 1024,
            dump_images: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// Built-in defaults (8 train + 1 test scene, 16 frames each).
    pub fn default_with_scenes() -> Self {
        let mut cfg = Config::default();
        cfg.data.scenes = Some(ScenesConfig::default());
        cfg.apply_env();
        cfg
    }

    /// `MUVIE_SEED` overrides the data and train seeds.
    pub fn apply_env(&mut self) {
        if let Ok(s) = std::env::var("MUVIE_SEED") {
            if let Ok(seed) = s.parse::<u64>() {
                self.train.seed = seed;
                if let Some(scenes) = &mut self.data.scenes {
                    scenes.seed = seed;
                }
            }
        }
    }

    pub fn scenes(&self) -> Result<&ScenesConfig, ConfigError> {
        self.data
            .scenes
            .as_ref()
            .ok_or(ConfigError::MissingSection("data.scenes"))
    }

    pub fn data_root(&self) -> &str {
        self.data.root.as_deref().unwrap_or("data")
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let tasks: Vec<Task> = self
            .model
            .tasks
            .iter()
            .map(|name| {
                Task::parse(name).ok_or_else(|| ConfigError::BadValue {
                    key: "model.tasks".into(),
                    reason: format!("unknown task '{name}'"),
                })
            })
            .collect::<Result<_, _>>()?;
        let ablation = parse_ablation(&self.model.ablation).ok_or_else(|| ConfigError::BadValue {
            key: "model.ablation".into(),
            reason: format!(
                "'{}' is not one of full, no-cva, no-cta",
                self.model.ablation
            ),
        })?;
        Ok(ModelConfig {
            tasks,
            d_scene: self.model.d_scene,
            d_task: self.model.d_task,
            d_prompt: self.model.d_prompt,
            heads: self.model.heads,
            hidden: self.model.hidden,
            cva_depth: self.model.cva_depth,
            cta_depth: self.model.cta_depth,
            angle_frequencies: self.model.angle_frequencies,
            samples_per_ray: self.model.samples_per_ray,
            ablation,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            schedule: TwoStageSchedule {
                stage1_iters: self.train.stage1_iters,
                stage2_iters: self.train.stage2_iters,
            },
            rays_per_iter: self.train.rays_per_iter,
            source_views: self.train.source_views,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            loss_weights: self.train.loss_weights.clone(),
            seed: self.train.seed,
            setting2: self.train.setting2,
            log_every: self.train.log_every,
        }
    }
}

pub fn parse_ablation(s: &str) -> Option<Ablation> {
    match s {
        "full" => Some(Ablation::Full),
        "no-cva" => Some(Ablation::NoCva),
        "no-cta" => Some(Ablation::NoCta),
        _ => None,
    }
}
