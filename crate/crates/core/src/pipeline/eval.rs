use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::model::{Model, Stage};
use super::train::{build_loss, Objective};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::layout::{decompose, to_pixel_space, unstack_grids, SerpentineOrder};
use crate::numerics::{Graph, Real, Tensor};
use crate::recraft::{build_condition_mask, recraft_sample};
use crate::synth::{batch_tensor, monotonicity, Dataset, GridRecord, TaskKind, MONOTONICITY_DELTA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub monotonicity: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationScore {
    /// Mean score of the same frames in a random non-identity order.
    pub monotonicity: f64,
    /// Fraction of samples scoring strictly higher than their permutation.
    pub win_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecraftScore {
    /// Mean squared error of generated vs. true penultimate frames.
    pub tail_mse: f64,
    /// Fraction of conditions whose generated penultimate frame is closer to
    /// its own true frame than to a mismatched sample's.
    pub paired_win_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskScore>,
    pub recraft: Option<RecraftScore>,
    pub config: Config,
    pub permuted: BTreeMap<String, PermutationScore>,
    /// Held-out flow-matching loss per task; empty for ground truth.
    pub eval_losses: BTreeMap<String, f64>,
    pub order: SerpentineOrder,
    pub seeds: BTreeMap<String, u64>,
    pub loss_curve: Vec<f64>,
    pub parent_loss_curve: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        if !self.all_finite() {
            return Err(Error::InvalidArgument(
                "report holds a non-finite number".into(),
            ));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn all_finite(&self) -> bool {
        let tasks = self.tasks.values().all(|s| s.monotonicity.is_finite());
        let perm = self
            .permuted
            .values()
            .all(|p| p.monotonicity.is_finite() && p.win_rate.is_finite());
        let rc = self
            .recraft
            .as_ref()
            .is_none_or(|r| r.tail_mse.is_finite() && r.paired_win_rate.is_finite());
        let losses = self
            .eval_losses
            .values()
            .chain(&self.loss_curve)
            .chain(&self.parent_loss_curve)
            .all(|v| v.is_finite());
        tasks && perm && rc && losses
    }
}

/// Where evaluated sequences come from.
pub enum Source<'a> {
    /// Validation sequences themselves.
    GroundTruth,
    Model(&'a Model, Stage),
}

/// A uniformly random permutation of `0..k` other than the identity.
pub fn random_nonidentity_perm<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<usize> {
    let identity: Vec<usize> = (0..k).collect();
    if k < 2 {
        return identity;
    }
    loop {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity {
            return p;
        }
    }
}

/// Paired comparison of each sequence against a random reordering of itself.
pub fn permutation_test<R: Rng + ?Sized>(
    sequences: &[Vec<Tensor<f32>>],
    rng: &mut R,
) -> (f64, PermutationScore) {
    let n = sequences.len() as f64;
    let mut own = 0.0;
    let mut perm = 0.0;
    let mut wins = 0usize;
    for seq in sequences {
        let p = random_nonidentity_perm(seq.len(), rng);
        let shuffled: Vec<Tensor<f32>> = p.iter().map(|&i| seq[i].clone()).collect();
        let a = monotonicity(seq, MONOTONICITY_DELTA);
        let b = monotonicity(&shuffled, MONOTONICITY_DELTA);
        own += a;
        perm += b;
        if a > b {
            wins += 1;
        }
    }
    (
        own / n,
        PermutationScore {
            monotonicity: perm / n,
            win_rate: wins as f64 / n,
        },
    )
}

/// Unconditional samples for one task: `[n]` sequences of pixel-space frames.
pub fn sample_sequences(
    model: &Model,
    task_id: usize,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    let config = &model.dit.config;
    let shape = config.image_shape(n);
    let z = euler_sample(model, &shape, &vec![task_id; n], sampler)?;
    let order = SerpentineOrder::for_config(config)?;
    unstack_grids(&z)?
        .iter()
        .map(|g| decompose(&to_pixel_space(g), &order))
        .collect()
}

/// Mean flow-matching loss of `model` over `records` with draws fixed by
/// `seed`, in chunks of at most 32.
pub fn held_out_loss(
    model: &Model,
    records: &[&GridRecord],
    objective: Objective,
    config: &Config,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in records.chunks(32) {
        let x0: Tensor<f32> = batch_tensor(chunk)?;
        let tasks: Vec<usize> = chunk.iter().map(|r| r.task_id).collect();
        let mut g = Graph::new();
        let (draw, _, _) = build_loss(
            &mut g,
            &model.dit,
            &model.params,
            model.lora.as_ref(),
            model.routing,
            false,
            &x0,
            &tasks,
            objective,
            config.flow.t_dist,
            &mut rng,
        )?;
        g.check()?;
        total += g.value(draw.loss).item().as_f64() * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

/// Tail-conditioned generation on held-out sequences of `tasks`.
pub fn recraft_consistency(
    model: &Model,
    data: &Dataset,
    tasks: &[TaskKind],
    per_task: usize,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RecraftScore> {
    let config = &model.dit.config;
    let mut own = Vec::new();
    let mut wins = 0usize;
    for &task in tasks {
        let records: Vec<&GridRecord> = data
            .val
            .iter()
            .filter(|r| r.task == task)
            .take(per_task)
            .collect();
        if records.len() < 2 {
            return Err(Error::Data(format!(
                "need at least two held-out {task} samples"
            )));
        }
        let truth = records
            .iter()
            .map(|r| data.frames(r))
            .collect::<Result<Vec<_>>>()?;
        let k = truth[0].len();
        let tails: Vec<Tensor<f32>> = truth.iter().map(|f| f[k - 1].clone()).collect();
        let ids: Vec<usize> = records.iter().map(|r| r.task_id).collect();
        let generated = recraft_sample(model, config, &tails, &ids, sampler)?;
        for (i, gen) in generated.iter().enumerate() {
            let j = loop {
                let j = rng.gen_range(0..records.len());
                if j != i {
                    break j;
                }
            };
            let matched = mse(&gen[k - 2], &truth[i][k - 2]);
            let other = mse(&gen[k - 2], &truth[j][k - 2]);
            own.push(matched);
            if matched < other {
                wins += 1;
            }
        }
    }
    Ok(RecraftScore {
        tail_mse: own.iter().sum::<f64>() / own.len() as f64,
        paired_win_rate: wins as f64 / own.len() as f64,
    })
}

/// Builds the evaluation report. Sampling seeds derive from `eval.seed`;
/// loss curves are left for the caller to fill from checkpoint metadata.
pub fn evaluate(config: &Config, data: &Dataset, source: Source) -> Result<EvalReport> {
    let order = SerpentineOrder::for_config(&config.model)?;
    let n = config.eval.samples_per_task;
    let mut perm_rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let mut tasks = BTreeMap::new();
    let mut permuted = BTreeMap::new();
    let mut eval_losses = BTreeMap::new();
    let mut recraft = None;
    for (task_id, &task) in config.data.tasks.iter().enumerate() {
        let sequences = match &source {
            Source::GroundTruth => data
                .val
                .iter()
                .filter(|r| r.task == task)
                .take(n)
                .map(|r| data.frames(r))
                .collect::<Result<Vec<_>>>()?,
            Source::Model(model, _) => {
                let sampler = SamplerConfig {
                    steps: config.flow.steps,
                    seed: config.eval.seed.wrapping_add(task_id as u64),
                };
                sample_sequences(model, task_id, n, &sampler)?
            }
        };
        if sequences.is_empty() {
            return Err(Error::Data(format!("no held-out {task} sequences")));
        }
        let (mono, perm) = permutation_test(&sequences, &mut perm_rng);
        tasks.insert(
            task.name().to_string(),
            TaskScore {
                monotonicity: mono,
                n: sequences.len(),
            },
        );
        permuted.insert(task.name().to_string(), perm);
    }
    if let Source::Model(model, stage) = &source {
        let mask = build_condition_mask(&config.model)?;
        let objective = match stage {
            Stage::Recraft => Objective::Recraft(&mask),
            _ => Objective::Cfm,
        };
        for &task in &config.data.tasks {
            if *stage == Stage::Recraft && !config.recraft.tasks.contains(&task) {
                continue;
            }
            let records: Vec<&GridRecord> = data.val.iter().filter(|r| r.task == task).collect();
            if records.is_empty() {
                continue;
            }
            let loss = held_out_loss(model, &records, objective, config, config.eval.seed)?;
            eval_losses.insert(task.name().to_string(), loss);
        }
        if *stage == Stage::Recraft {
            let sampler = SamplerConfig {
                steps: config.flow.steps,
                seed: config.eval.seed,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed ^ 0x5eed);
            recraft = Some(recraft_consistency(
                model,
                data,
                &config.recraft.tasks,
                n,
                &sampler,
                &mut rng,
            )?);
        }
    }
    let mut seeds = BTreeMap::new();
    seeds.insert("data".to_string(), config.data.seed);
    seeds.insert("train".to_string(), config.train.seed);
    seeds.insert("recraft".to_string(), config.recraft.seed);
    seeds.insert("eval".to_string(), config.eval.seed);
    Ok(EvalReport {
        tasks,
        recraft,
        config: config.clone(),
        permuted,
        eval_losses,
        order,
        seeds,
        loss_curve: Vec::new(),
        parent_loss_curve: Vec::new(),
    })
}
