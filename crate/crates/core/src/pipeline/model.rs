use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Config, Routing};
use crate::checkpoint::Checkpoint;
use crate::dit::{Ctx, DiT, ParamStore};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::lora::{LoraApplication, LoraSet, TaskWeights};
use crate::numerics::{Graph, Var};

const LORA_PREFIX: &str = "lora.";
const ADAM_PREFIX: &str = "adam.";

/// What produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Base plus task adapters.
    Stage1,
    /// Adapters folded into the base.
    Merged,
    /// Merged base plus the tail-conditioned adapter.
    Recraft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraMeta {
    pub rank: usize,
    pub tasks: Vec<String>,
    pub targets: Vec<String>,
    pub routing: Routing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: usize,
    pub adam_t: u64,
    pub losses: Vec<f64>,
    pub lora: Option<LoraMeta>,
    /// Loss curve of the stage this checkpoint was built on.
    #[serde(default)]
    pub parent_losses: Vec<f64>,
}

/// A DiT with its weights and optional adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dit: DiT,
    pub params: ParamStore<f32>,
    pub lora: Option<LoraSet<f32>>,
    pub routing: Routing,
}

impl Model {
    pub fn new(dit: DiT, params: ParamStore<f32>) -> Self {
        Self {
            dit,
            params,
            lora: None,
            routing: Routing::PerTask,
        }
    }

    /// Per-sample adapter weights for `tasks` under this model's routing.
    pub fn task_weights(&self, tasks: &[usize]) -> Result<Option<TaskWeights>> {
        let Some(lora) = &self.lora else {
            return Ok(None);
        };
        let n = lora.tasks.len();
        Ok(Some(match self.routing {
            Routing::PerTask => TaskWeights::one_hot(tasks, n)?,
            Routing::Shared => TaskWeights::one_hot(&vec![0; tasks.len()], n)?,
        }))
    }

    pub fn lora_meta(&self) -> Option<LoraMeta> {
        self.lora.as_ref().map(|l| LoraMeta {
            rank: l.rank,
            tasks: l.tasks.clone(),
            targets: l.adapters.keys().cloned().collect(),
            routing: self.routing,
        })
    }

    /// Tensors for a checkpoint: base weights under their own names, adapters
    /// under `lora.`.
    pub fn tensors(&self) -> Vec<(String, crate::Tensor<f32>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        if let Some(l) = &self.lora {
            out.extend(l.named_tensors().into_iter().map(|(k, v)| (k, v.clone())));
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Config, CheckpointMeta)> {
        let config: Config = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let dit = DiT::new(config.model.clone())?;
        let params: ParamStore<f32> = ckpt
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(LORA_PREFIX) && !k.starts_with(ADAM_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        // only names and shapes are compared
        let expected = dit.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint", t.shape(), got.shape()));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Config(
                "checkpoint has unexpected base tensors".into(),
            ));
        }
        let mut model = Model::new(dit, params);
        if let Some(lm) = &meta.lora {
            let lora = LoraSet::from_named(lm.rank, lm.tasks.clone(), &lm.targets, |n| {
                ckpt.tensors.get(n).cloned()
            })?;
            model.lora = Some(lora);
            model.routing = lm.routing;
        }
        Ok((model, config, meta))
    }
}

impl VelocityField<f32> for Model {
    fn velocity(&self, g: &mut Graph<f32>, z_t: Var, t: &[f64], tasks: &[usize]) -> Result<Var> {
        let bound = self.params.bind(g, |_| false);
        let app = match (&self.lora, self.task_weights(tasks)?) {
            (Some(l), Some(weights)) => Some(LoraApplication {
                bound: l.bind(g, false),
                weights,
            }),
            _ => None,
        };
        self.dit
            .forward(g, Ctx::new(&bound, app.as_ref()), z_t, t, tasks)
    }
}
