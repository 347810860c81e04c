use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Config, Routing};
use super::model::{CheckpointMeta, Model, Stage};
use crate::checkpoint::{Checkpoint, RngState};
use crate::dit::{Ctx, DiT};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, CfmDraw, TimeDistribution};
use crate::lora::{LoraApplication, LoraSet};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::optim::Adam;
use crate::recraft::{build_condition_mask, recraft_loss, ConditionMask};
use crate::synth::{batch_tensor, GridRecord};

/// Training objective for one step.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Flow matching over the whole grid.
    Cfm,
    /// Flow matching with the tail cell clean and excluded.
    Recraft(&'a ConditionMask),
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op, .. } => Error::Divergence {
            step,
            what: format!("non-finite value from `{op}`"),
        },
        other => other,
    }
}

/// Builds the objective on `g` for `model` with adapters bound for training
/// (when present) and the base bound as trainable when `train_base`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    dit: &DiT,
    params: &crate::ParamStore<T>,
    lora: Option<&LoraSet<T>>,
    routing: Routing,
    train_base: bool,
    x0: &Tensor<T>,
    tasks: &[usize],
    objective: Objective,
    dist: TimeDistribution,
    rng: &mut R,
) -> Result<(CfmDraw<T>, crate::dit::BoundParams, Option<LoraApplication>)> {
    let bound = params.bind(g, |_| train_base);
    let app = match lora {
        Some(l) => {
            let routed: Vec<usize> = match routing {
                Routing::PerTask => tasks.to_vec(),
                Routing::Shared => vec![0; tasks.len()],
            };
            Some(LoraApplication {
                bound: l.bind(g, true),
                weights: crate::lora::TaskWeights::one_hot(&routed, l.tasks.len())?,
            })
        }
        None => None,
    };
    let field = |g: &mut Graph<T>, z: Var, t: &[f64], tk: &[usize]| {
        dit.forward(g, Ctx::new(&bound, app.as_ref()), z, t, tk)
    };
    let draw = match objective {
        Objective::Cfm => cfm_loss(g, &field, x0, tasks, dist, rng)?,
        Objective::Recraft(mask) => recraft_loss(g, &field, x0, tasks, mask, dist, rng)?,
    };
    Ok((draw, bound, app))
}

/// One optimizer step. Updates the base when `train_base`, otherwise only the
/// adapters. Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    train_base: bool,
    adam: &mut Adam<f32>,
    x0: &Tensor<f32>,
    tasks: &[usize],
    objective: Objective,
    dist: TimeDistribution,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let (draw, bound, app) = build_loss(
        &mut g,
        &model.dit,
        &model.params,
        model.lora.as_ref(),
        model.routing,
        train_base,
        x0,
        tasks,
        objective,
        dist,
        rng,
    )
    .map_err(diverged(step))?;
    let loss = g.value(draw.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            what: format!("loss is {loss}"),
        });
    }
    let grads = g.backward(draw.loss).map_err(diverged(step))?;
    adam.tick();
    if train_base {
        let mut vars: Vec<(&str, Var)> = bound.iter().collect();
        vars.sort_by_key(|(n, _)| *n);
        for (name, var) in vars {
            adam.update(name, model.params.get_mut(name)?, &grads.wrt(var))?;
        }
    }
    if let (Some(lora), Some(app)) = (model.lora.as_mut(), app.as_ref()) {
        for (target, adapter) in lora.adapters.iter_mut() {
            let vars = &app.bound.adapters[target];
            adam.update(
                &format!("lora.{target}.A"),
                &mut adapter.a,
                &grads.wrt(vars.a),
            )?;
            for (i, b) in adapter.b.iter_mut().enumerate() {
                adam.update(&format!("lora.{target}.B.{i}"), b, &grads.wrt(vars.b[i]))?;
            }
        }
    }
    Ok(loss)
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub model: Model,
    pub adam: Adam<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub losses: Vec<f64>,
    pub parent_losses: Vec<f64>,
}

impl TrainState {
    pub fn to_checkpoint(&self, config: &Config) -> Checkpoint {
        let mut ckpt = Checkpoint {
            config: config.to_json(),
            rng: Some(RngState::capture(&self.rng)),
            ..Checkpoint::default()
        };
        ckpt.tensors.extend(self.model.tensors());
        ckpt.tensors.extend(self.adam.state_tensors());
        let meta = CheckpointMeta {
            stage: self.stage,
            step: self.step,
            adam_t: self.adam.t,
            losses: self.losses.clone(),
            lora: self.model.lora_meta(),
            parent_losses: self.parent_losses.clone(),
        };
        ckpt.meta = serde_json::to_value(meta).expect("metadata serializes");
        ckpt
    }

    /// Resumes from a checkpoint written by [`TrainState::to_checkpoint`];
    /// `config` may extend the step budget but must describe the same model.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &Config) -> Result<Self> {
        let (model, saved, meta) = Model::from_checkpoint(ckpt)?;
        if saved.model != config.model || saved.lora != config.lora {
            return Err(Error::Config(
                "resume config describes a different model".into(),
            ));
        }
        let rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no rng state".into()))?
            .restore()?;
        let adam_config = match meta.stage {
            Stage::Recraft => recraft_adam(config),
            _ => config.train.adam(),
        };
        let adam = Adam::from_state(adam_config, meta.adam_t, &ckpt.with_prefix(""));
        Ok(Self {
            stage: meta.stage,
            model,
            adam,
            step: meta.step,
            rng,
            losses: meta.losses,
            parent_losses: meta.parent_losses,
        })
    }
}

fn recraft_adam(config: &Config) -> crate::optim::AdamConfig {
    crate::optim::AdamConfig {
        lr: config.recraft.lr,
        ..config.train.adam()
    }
}

fn sample_batch(
    records: &[&GridRecord],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let picked: Vec<&GridRecord> = (0..batch)
        .map(|_| records[rng.gen_range(0..records.len())])
        .collect();
    let tasks = picked.iter().map(|r| r.task_id).collect();
    Ok((batch_tensor(&picked)?, tasks))
}

/// Fresh stage-1 state: randomly initialized base, no adapters yet.
pub fn stage1_init(config: &Config) -> Result<TrainState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let dit = DiT::new(config.model.clone())?;
    let params = dit.init_params(&mut rng)?;
    let mut model = Model::new(dit, params);
    model.routing = config.lora.routing;
    Ok(TrainState {
        stage: Stage::Stage1,
        model,
        adam: Adam::new(config.train.adam()),
        step: 0,
        rng,
        losses: Vec::new(),
        parent_losses: Vec::new(),
    })
}

fn adapter_tasks(config: &Config) -> Vec<String> {
    match config.lora.routing {
        Routing::PerTask => config.task_names(),
        Routing::Shared => vec!["shared".to_string()],
    }
}

/// Runs stage 1 until `train.base_pretrain_steps + train.steps` steps are
/// done: the full model first, then the task adapters on the frozen base.
/// `on_step` sees the state after every step.
pub fn stage1_run(
    config: &Config,
    train: &[GridRecord],
    state: &mut TrainState,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<()> {
    let records: Vec<&GridRecord> = train.iter().collect();
    let switch = config.train.base_pretrain_steps;
    while state.step < config.train.total_steps() {
        if state.step >= switch && state.model.lora.is_none() {
            let lora = LoraSet::init(
                &state.model.params,
                &config.lora.targets,
                &adapter_tasks(config),
                config.lora.rank,
                &mut state.rng,
            )?;
            state.model.lora = Some(lora);
            state.model.routing = config.lora.routing;
            state.adam = Adam::new(config.train.adam());
        }
        let train_base = state.model.lora.is_none();
        let (phase_step, phase_len) = if train_base {
            (state.step, switch)
        } else {
            (state.step - switch, config.train.steps)
        };
        state.adam.config.lr = config
            .train
            .schedule
            .lr(config.train.lr, phase_step, phase_len);
        let (x0, tasks) = sample_batch(&records, config.train.batch, &mut state.rng)?;
        let loss = train_step(
            &mut state.model,
            train_base,
            &mut state.adam,
            &x0,
            &tasks,
            Objective::Cfm,
            config.flow.t_dist,
            &mut state.rng,
            state.step,
        )?;
        state.losses.push(loss);
        state.step += 1;
        on_step(state, loss)?;
    }
    Ok(())
}

/// Folds adapters into the base with weights `omega`; the result carries no
/// adapter or optimizer tensors.
pub fn merge_checkpoint(ckpt: &Checkpoint, omega: &[f64]) -> Result<Checkpoint> {
    let (model, config, meta) = Model::from_checkpoint(ckpt)?;
    let params = match &model.lora {
        Some(lora) => lora.merge(&model.params, omega)?,
        None => model.params.clone(),
    };
    let mut out = Checkpoint {
        config: config.to_json(),
        ..Checkpoint::default()
    };
    out.tensors
        .extend(params.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let meta = CheckpointMeta {
        stage: Stage::Merged,
        step: 0,
        adam_t: 0,
        losses: Vec::new(),
        lora: None,
        parent_losses: meta.losses,
    };
    out.meta = serde_json::to_value(meta).expect("metadata serializes");
    Ok(out)
}

/// Conditional-stage state on top of a merged checkpoint: frozen base, fresh
/// per-task adapters.
pub fn recraft_init(config: &Config, merged: &Checkpoint) -> Result<TrainState> {
    let (mut model, _, meta) = Model::from_checkpoint(merged)?;
    if meta.stage != Stage::Merged || model.lora.is_some() {
        return Err(Error::Config(
            "conditional training needs a merged checkpoint".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.recraft.seed);
    model.lora = Some(LoraSet::init(
        &model.params,
        &config.lora.targets,
        &config.task_names(),
        config.lora.rank,
        &mut rng,
    )?);
    model.routing = Routing::PerTask;
    Ok(TrainState {
        stage: Stage::Recraft,
        model,
        adam: Adam::new(recraft_adam(config)),
        step: 0,
        rng,
        losses: Vec::new(),
        parent_losses: meta.parent_losses,
    })
}

/// Trains the conditional adapter for `recraft.steps` steps on the
/// configured tasks.
pub fn recraft_run(
    config: &Config,
    train: &[GridRecord],
    state: &mut TrainState,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<()> {
    let records: Vec<&GridRecord> = train
        .iter()
        .filter(|r| config.recraft.tasks.contains(&r.task))
        .collect();
    let mask = build_condition_mask(&config.model)?;
    while state.step < config.recraft.steps {
        let (x0, tasks) = sample_batch(&records, config.recraft.batch, &mut state.rng)?;
        let loss = train_step(
            &mut state.model,
            false,
            &mut state.adam,
            &x0,
            &tasks,
            Objective::Recraft(&mask),
            config.flow.t_dist,
            &mut state.rng,
            state.step,
        )?;
        state.losses.push(loss);
        state.step += 1;
        on_step(state, loss)?;
    }
    Ok(())
}
