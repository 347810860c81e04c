use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::TimeDistribution;
use crate::lora::LoraTargetSet;
use crate::optim::AdamConfig;
use crate::synth::{DataConfig, TaskKind};

/// How adapter task matrices are selected per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// One `B_i` per task, sample `s` uses `B_{task(s)}`.
    #[default]
    PerTask,
    /// A single `B` shared by every task.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    #[serde(default)]
    pub targets: LoraTargetSet,
    #[serde(default)]
    pub routing: Routing,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            targets: LoraTargetSet::default(),
            routing: Routing::PerTask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Euler steps used for sampling.
    pub steps: usize,
    #[serde(default = "toy_t_dist")]
    pub t_dist: TimeDistribution,
}

fn toy_t_dist() -> TimeDistribution {
    TimeDistribution::LogitNormal {
        mean: 0.0,
        std: 1.0,
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            t_dist: toy_t_dist(),
        }
    }
}

/// Learning-rate schedule, restarted at the start of each training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `final_ratio * lr` over the phase.
    Cosine { final_ratio: f64 },
}

impl LrSchedule {
    /// Learning rate at `step` of a phase lasting `len` steps.
    pub fn lr(self, base: f64, step: usize, len: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_ratio } => {
                let p = if len <= 1 {
                    0.0
                } else {
                    step as f64 / (len - 1) as f64
                };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos());
                base * (final_ratio + (1.0 - final_ratio) * c)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    pub batch: usize,
    /// Full-model steps before the base is frozen.
    pub base_pretrain_steps: usize,
    /// Adapter steps on the frozen base.
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "log_every")]
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "toy_schedule")]
    pub schedule: LrSchedule,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn toy_schedule() -> LrSchedule {
    LrSchedule::Cosine { final_ratio: 0.05 }
}
fn log_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            batch: 8,
            base_pretrain_steps: 1500,
            steps: 500,
            seed: 0,
            log_every: log_every(),
            checkpoint_every: 0,
            schedule: toy_schedule(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.base_pretrain_steps + self.steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecraftConfig {
    /// Tasks whose sequences train the conditional adapter.
    pub tasks: Vec<TaskKind>,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Adapter weights folded into the base before conditional training;
    /// `None` weights the conditional tasks equally.
    #[serde(default)]
    pub merge_omega: Option<Vec<f64>>,
}

impl Default for RecraftConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Blocks],
            lr: 1e-3,
            batch: 8,
            steps: 1000,
            seed: 1,
            merge_omega: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_task: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 32,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

/// Everything a run needs. Every section and every key is optional in JSON
/// and defaults to the toy setup; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub recraft: RecraftConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.model.channels != 1 {
            return fail("synthetic frames are single-channel; model.channels must be 1".into());
        }
        if self.model.task_vocab != self.data.tasks.len() {
            return fail(format!(
                "model.task_vocab {} differs from the {} data tasks",
                self.model.task_vocab,
                self.data.tasks.len()
            ));
        }
        let mut seen = self.data.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.data.tasks.len() {
            return fail("data.tasks lists a task twice".into());
        }
        if self.lora.rank == 0 {
            return fail("lora.rank must be positive".into());
        }
        if self.train.batch == 0 || self.recraft.batch == 0 || self.flow.steps == 0 {
            return fail("batch sizes and sampler steps must be positive".into());
        }
        for (name, v) in [
            ("train.lr", self.train.lr),
            ("train.eps", self.train.eps),
            ("recraft.lr", self.recraft.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        if let LrSchedule::Cosine { final_ratio } = self.train.schedule {
            if !(0.0..=1.0).contains(&final_ratio) {
                return fail("train.schedule.final_ratio must lie in [0, 1]".into());
            }
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if let Some(&missing) = self
            .recraft
            .tasks
            .iter()
            .find(|t| !self.data.tasks.contains(t))
        {
            return fail(format!("recraft task {missing} is not a data task"));
        }
        if let Some(w) = &self.recraft.merge_omega {
            if w.len() != self.data.tasks.len() {
                return fail("recraft.merge_omega needs one weight per task".into());
            }
        }
        if self.eval.samples_per_task == 0 {
            return fail("eval.samples_per_task must be positive".into());
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides; `value` is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = self.to_json();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            let (leaf, path) = parts.split_last().expect("split yields one part");
            for part in path {
                node = node
                    .get_mut(*part)
                    .filter(|n| n.is_object())
                    .ok_or_else(|| Error::Config(format!("unknown config section in `{key}`")))?;
            }
            // unknown leaf keys are rejected when the result is deserialized
            node.as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?
                .insert(leaf.to_string(), value);
        }
        let config: Config =
            serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.data
            .tasks
            .iter()
            .map(|t| t.name().to_string())
            .collect()
    }

    pub fn task_id(&self, task: TaskKind) -> Result<usize> {
        self.data
            .tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::InvalidArgument(format!("task {task} is not configured")))
    }

    /// Weights for merging stage-1 adapters before conditional training.
    pub fn recraft_merge_omega(&self) -> Vec<f64> {
        self.recraft.merge_omega.clone().unwrap_or_else(|| {
            let share = 1.0 / self.recraft.tasks.len() as f64;
            self.data
                .tasks
                .iter()
                .map(|t| {
                    if self.recraft.tasks.contains(t) {
                        share
                    } else {
                        0.0
                    }
                })
                .collect()
        })
    }
}
