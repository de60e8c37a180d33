//! Experiment configuration: one TOML file describing data, model, loss,
//! optimizer, schedule, and seeds.
//!
//! Unknown keys are rejected at parse time, every section is validated
//! before any command runs, and the same file drives both training modes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderArch, Phase};
use crate::error::{QkiError, Result};
use crate::loss::LossConfig;
use crate::synth::SynthConfig;
use crate::trainer::{OptimizerConfig, PhaseSchedule, PhaseSpec};

/// Synthetic dataset shape and augmentation strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_keys: usize,
    pub d_in: usize,
    pub n_clusters: usize,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default = "default_shift_scale")]
    pub shift_scale: f64,
    #[serde(default = "default_n_eval_queries")]
    pub n_eval_queries: usize,
    #[serde(default = "default_n_distractors")]
    pub n_distractors: usize,
}

fn default_noise_scale() -> f64 {
    0.1
}
fn default_mask_fraction() -> f64 {
    0.25
}
fn default_scale_range() -> [f64; 2] {
    [0.9, 1.1]
}
fn default_shift_scale() -> f64 {
    4.0
}
fn default_n_eval_queries() -> usize {
    500
}
fn default_n_distractors() -> usize {
    250
}

/// Encoder widths. The baseline featurizer projects to `proj_dim` before
/// its component fit; when omitted it defaults to twice the output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone_hidden: usize,
    pub d_mid: usize,
    pub head_hidden: usize,
    pub d_out: usize,
    #[serde(default)]
    pub proj_dim: Option<usize>,
    #[serde(default = "default_proj_scale")]
    pub proj_scale: f64,
}

fn default_proj_scale() -> f64 {
    1.0
}

/// Loss knobs; every field defaults to the standard setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub m_per_positive: usize,
    pub w_pos: f64,
    pub w_neg: f64,
    pub eps_clamp: f64,
    pub per_row_mining: bool,
}

impl Default for LossSection {
    fn default() -> LossSection {
        let d = LossConfig::default();
        LossSection {
            tau: d.tau,
            m_per_positive: d.m_per_positive,
            w_pos: d.w_pos,
            w_neg: d.w_neg,
            eps_clamp: d.eps_clamp,
            per_row_mining: d.per_row_mining,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr0: f64,
    /// Cosine decay horizon in steps (restarts each phase).
    pub cosine_steps: u64,
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> OptimizerSection {
        OptimizerSection {
            lr0: 1e-3,
            cosine_steps: 600,
            alpha: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Rows per chunk in bulk-evaluated stores and dataset files.
    pub chunk_size: u32,
    /// Rebuild frozen-side database descriptors every this many steps.
    pub db_refresh_every: u64,
}

impl Default for TrainingSection {
    fn default() -> TrainingSection {
        TrainingSection {
            chunk_size: 1024,
            db_refresh_every: 1,
        }
    }
}

/// Explicit seeds for every random stream family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    /// Keys, augmentations, and the held-out split.
    pub data: u64,
    /// Encoder layer and featurizer initialization.
    pub model_init: u64,
    /// Batch ordering across phases.
    pub schedule: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePhaseConfig {
    /// "Q" or "K".
    pub kind: String,
    pub max_steps: u64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub plateau_window: usize,
    #[serde(default)]
    pub plateau_min_rel_improve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub phases: Vec<SchedulePhaseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Where `gen-data` writes and `train` reads the dataset files.
    pub data_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> PathsSection {
        PathsSection {
            data_dir: PathBuf::from("data"),
        }
    }
}

/// The whole experiment in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub seeds: SeedsSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl ExperimentConfig {
    /// Parse and fully validate a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QkiError::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| QkiError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace every seed with values derived from one override.
    pub fn override_seeds(&mut self, seed: u64) {
        self.seeds.data = seed;
        self.seeds.model_init = seed.wrapping_add(1);
        self.seeds.schedule = seed.wrapping_add(2);
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_keys: self.data.n_keys,
            d_in: self.data.d_in,
            n_clusters: self.data.n_clusters,
            noise_scale: self.data.noise_scale,
            mask_fraction: self.data.mask_fraction,
            scale_range: self.data.scale_range,
            shift_scale: self.data.shift_scale,
            seed: self.seeds.data,
        }
    }

    pub fn arch(&self) -> EncoderArch {
        EncoderArch {
            d_in: self.data.d_in,
            backbone_hidden: self.model.backbone_hidden,
            d_mid: self.model.d_mid,
            head_hidden: self.model.head_hidden,
            d_out: self.model.d_out,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.model.proj_dim.unwrap_or(2 * self.model.d_out)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.loss.tau,
            m_per_positive: self.loss.m_per_positive,
            w_pos: self.loss.w_pos,
            w_neg: self.loss.w_neg,
            eps_clamp: self.loss.eps_clamp,
            per_row_mining: self.loss.per_row_mining,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr0: self.optimizer.lr0,
            cosine_steps: self.optimizer.cosine_steps,
            alpha: self.optimizer.alpha,
            batch_size: self.optimizer.batch_size,
        }
    }

    pub fn phase_schedule(&self) -> Result<PhaseSchedule> {
        let mut phases = Vec::with_capacity(self.schedule.phases.len());
        for (i, p) in self.schedule.phases.iter().enumerate() {
            let kind = match p.kind.as_str() {
                "Q" => Phase::QPhase,
                "K" => Phase::KPhase,
                other => {
                    return Err(QkiError::Config(format!(
                        "schedule phase {i}: kind must be \"Q\" or \"K\", got \"{other}\""
                    )))
                }
            };
            phases.push(PhaseSpec {
                kind,
                max_steps: p.max_steps,
                eval_every: p.eval_every,
                plateau_window: p.plateau_window,
                plateau_min_rel_improve: p.plateau_min_rel_improve,
            });
        }
        Ok(PhaseSchedule {
            phases,
            seed: self.seeds.schedule,
        })
    }

    /// Step budget the baseline run mirrors: the sum of all phase budgets.
    pub fn total_schedule_steps(&self) -> u64 {
        self.schedule.phases.iter().map(|p| p.max_steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.arch().validate()?;
        self.loss_config().validate()?;
        self.optimizer_config().validate()?;
        self.phase_schedule()?.validate()?;
        if self.proj_dim() < self.model.d_out {
            return Err(QkiError::Config(format!(
                "proj_dim ({}) must be at least d_out ({})",
                self.proj_dim(),
                self.model.d_out
            )));
        }
        if !(self.model.proj_scale > 0.0) {
            return Err(QkiError::Config(format!(
                "proj_scale must be positive, got {}",
                self.model.proj_scale
            )));
        }
        if self.data.n_eval_queries == 0 {
            return Err(QkiError::Config("n_eval_queries must be >= 1".into()));
        }
        if self.optimizer.batch_size > self.data.n_keys {
            return Err(QkiError::Config(format!(
                "batch_size ({}) exceeds n_keys ({})",
                self.optimizer.batch_size, self.data.n_keys
            )));
        }
        if self.training.chunk_size == 0 {
            return Err(QkiError::Config("chunk_size must be >= 1".into()));
        }
        if self.training.db_refresh_every == 0 {
            return Err(QkiError::Config("db_refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}
