//! Declarative training plans for an external trainer: the two-stage
//! progressive adaptation schedule and the token-level distillation setup.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOTAL_STEPS: u64 = 1000;
pub const DEFAULT_EMBED_FRAC: f64 = 0.5;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
/// 1024 sequences of 2048 tokens.
pub const DEFAULT_BATCH_TOKENS: u64 = 2_097_152;
pub const DEFAULT_MAX_SEQ_LEN: u64 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterGroup {
    Embedding,
    LmHead,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Half-open `[start, end)` in optimizer steps.
    pub step_range: [u64; 2],
    pub parameter_groups: Vec<ParameterGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub name: String,
    pub betas: [f64; 2],
}

impl Default for Optimizer {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            betas: [0.9, 0.999],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub total_steps: u64,
    pub embed_frac: f64,
    pub learning_rate: f64,
    pub batch_tokens: u64,
    pub max_seq_len: u64,
    pub optimizer: Optimizer,
    /// Interpreted by the trainer (warmup, decay, …); `null` means its default.
    pub lr_schedule: Option<serde_json::Value>,
    pub stages: Vec<Stage>,
}

/// Stage 1 tunes only the embedding and LM head for
/// `round(embed_frac · total_steps)` steps; stage 2 tunes everything.
pub fn emit_two_stage_plan(total_steps: u64, embed_frac: f64, learning_rate: f64, batch_tokens: u64) -> Result<AdaptationPlan> {
    if total_steps < 2 {
        return Err(Error::invalid(format!("total_steps must be at least 2, got {total_steps}")));
    }
    if !(0.0..=1.0).contains(&embed_frac) {
        return Err(Error::invalid(format!("embed_frac must be in [0, 1], got {embed_frac}")));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
    }
    if batch_tokens == 0 {
        return Err(Error::invalid("batch_tokens must be positive"));
    }
    let boundary = (embed_frac * total_steps as f64).round() as u64;
    let mut stages = Vec::new();
    if boundary > 0 {
        stages.push(Stage {
            name: "embedding_and_head".into(),
            step_range: [0, boundary],
            parameter_groups: vec![ParameterGroup::Embedding, ParameterGroup::LmHead],
        });
    }
    if boundary < total_steps {
        stages.push(Stage {
            name: "full".into(),
            step_range: [boundary, total_steps],
            parameter_groups: vec![ParameterGroup::Embedding, ParameterGroup::LmHead, ParameterGroup::Internal],
        });
    }
    Ok(AdaptationPlan {
        total_steps,
        embed_frac,
        learning_rate,
        batch_tokens,
        max_seq_len: DEFAULT_MAX_SEQ_LEN,
        optimizer: Optimizer::default(),
        lr_schedule: None,
        stages,
    })
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        emit_two_stage_plan(DEFAULT_TOTAL_STEPS, DEFAULT_EMBED_FRAC, DEFAULT_LEARNING_RATE, DEFAULT_BATCH_TOKENS)
            .expect("defaults are valid")
    }
}

impl AdaptationPlan {
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, s) in self.stages.iter().enumerate() {
            let [a, b] = s.step_range;
            if a != next || b <= a {
                return Err(Error::format(format!("stage {i} range [{a}, {b}) breaks the partition")));
            }
            next = b;
            let last = i + 1 == self.stages.len();
            let all = s.parameter_groups.contains(&ParameterGroup::Internal);
            if !last && all {
                return Err(Error::format("only the final stage may tune internal parameters"));
            }
        }
        if next != self.total_steps {
            return Err(Error::format(format!("stages cover {next} of {} steps", self.total_steps)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("plan JSON: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path.as_ref(), &self.to_json())
    }
}

pub const DEFAULT_TASK_SAMPLE_FRACTION: f64 = 0.15;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_KD_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teacher_id: String,
    pub student_id: String,
    /// Coefficient of the teacher–student KL term added to the LM loss.
    pub kd_weight: f64,
    /// Fraction of training samples that receive the KL term.
    pub task_sample_fraction: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillOverrides {
    pub kd_weight: Option<f64>,
    pub task_sample_fraction: Option<f64>,
    pub temperature: Option<f64>,
}

pub fn emit_distill_config(teacher: &str, student: &str, overrides: DistillOverrides) -> Result<DistillConfig> {
    let cfg = DistillConfig {
        teacher_id: teacher.to_owned(),
        student_id: student.to_owned(),
        kd_weight: overrides.kd_weight.unwrap_or(DEFAULT_KD_WEIGHT),
        task_sample_fraction: overrides.task_sample_fraction.unwrap_or(DEFAULT_TASK_SAMPLE_FRACTION),
        temperature: overrides.temperature.unwrap_or(DEFAULT_TEMPERATURE),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::invalid(format!("kd_weight must be non-negative, got {}", self.kd_weight)));
        }
        if !(0.0..=1.0).contains(&self.task_sample_fraction) {
            return Err(Error::invalid(format!(
                "task_sample_fraction must be in [0, 1], got {}",
                self.task_sample_fraction
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// With no distillation samples the plan is plain language modeling.
    pub fn is_pure_lm(&self) -> bool {
        self.task_sample_fraction == 0.0 || self.kd_weight == 0.0
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("distill JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path.as_ref(), &self.to_json())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plan serializes");
    s.push('\n');
    s
}

fn save(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}
