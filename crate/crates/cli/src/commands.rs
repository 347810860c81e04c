use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use makeseq_core::checkpoint::Checkpoint;
use makeseq_core::flow::{euler_sample, Denoiser, SamplerConfig};
use makeseq_core::gradsuite;
use makeseq_core::io::{read_pgm, write_atomic, write_pgm};
use makeseq_core::layout::{compose, decompose, to_pixel_space, unstack_grids};
use makeseq_core::pipeline::{
    evaluate, merge_checkpoint, recraft_init, recraft_run, stage1_init, stage1_run, CheckpointMeta,
    Config, Model, Routing, Source, Stage, TrainState,
};
use makeseq_core::recraft::recraft_sample;
use makeseq_core::synth::{gen_dataset, Dataset, DatasetManifest, TaskKind};
use makeseq_core::{Error, SerpentineOrder, Tensor};

use crate::ConfigArgs;

/// Largest relative error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

/// 2 for data and file problems, 3 for numeric divergence, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Data(_) | Error::Format { .. } | Error::Io(_) => 2,
                Error::Divergence { .. } | Error::NonFinite { .. } => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn load_config(args: &ConfigArgs, fallback: Option<&Config>) -> anyhow::Result<Config> {
    let base = match (&args.config, fallback) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(c)) => c.clone(),
        (None, None) => Config::default(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn load_model(path: &Path) -> anyhow::Result<(Model, Config, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    Model::from_checkpoint(&ckpt).with_context(|| format!("loading {}", path.display()))
}

fn checkpoint_config(path: &Path) -> anyhow::Result<Config> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Model::from_checkpoint(&ckpt)?.1)
}

/// Loads the dataset and checks it was generated for `config`.
fn load_data(config: &Config, dir: Option<PathBuf>) -> anyhow::Result<Dataset> {
    let dir = dir.unwrap_or_else(|| config.paths.data_dir.clone());
    let data = Dataset::load(&dir)?;
    let m = &data.manifest;
    let c = &config.model;
    if m.tasks != config.data.tasks
        || m.frame_size != c.frame_size
        || (m.grid_rows, m.grid_cols) != (c.grid_rows, c.grid_cols)
    {
        return Err(Error::Data(format!(
            "dataset in {} does not match the configured tasks, frame size or grid",
            dir.display()
        ))
        .into());
    }
    Ok(data)
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn task_id(config: &Config, name: &str) -> anyhow::Result<usize> {
    Ok(config.task_id(name.parse::<TaskKind>()?)?)
}

/// Parses `name=w,...` (missing names weigh 0) or a plain list of weights.
pub fn parse_omega(weights: &str, names: &[String]) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = weights.split(',').map(str::trim).collect();
    if parts.iter().all(|p| !p.contains('=')) {
        let w = parts
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| anyhow!("bad weight `{p}`")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        if w.len() != names.len() {
            bail!("{} weights for tasks {names:?}", w.len());
        }
        return Ok(w);
    }
    let mut w = vec![0.0; names.len()];
    for p in parts {
        let (name, value) = p
            .split_once('=')
            .ok_or_else(|| anyhow!("mixed weight list `{weights}`"))?;
        let i = names
            .iter()
            .position(|n| n == name.trim())
            .ok_or_else(|| anyhow!("unknown task `{name}`; adapters have {names:?}"))?;
        w[i] = value
            .trim()
            .parse()
            .map_err(|_| anyhow!("bad weight `{value}`"))?;
    }
    Ok(w)
}

fn write_sequence(
    dir: &Path,
    frames: &[Tensor<f32>],
    order: &SerpentineOrder,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{i}.pgm")), f)?;
    }
    write_pgm(&dir.join("grid.pgm"), &compose(frames, order)?)?;
    Ok(())
}

pub fn gen_data(args: &ConfigArgs, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let config = load_config(args, None)?;
    let order = SerpentineOrder::for_config(&config.model)?;
    let manifest = DatasetManifest::plan(&config.data, &order, config.model.frame_size)?;
    let dir = out.unwrap_or_else(|| config.paths.data_dir.clone());
    let data = gen_dataset(&manifest, &dir)?;
    for task in &config.data.tasks {
        let train = data.train.iter().filter(|r| r.task == *task).count();
        let val = data.val.iter().filter(|r| r.task == *task).count();
        println!("{task}: {train} train, {val} val");
    }
    println!(
        "wrote {} sequences to {}",
        data.train.len() + data.val.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn log_step(state: &TrainState, loss: f64, every: usize, total: usize) {
    if state.step == 1 || (every > 0 && state.step.is_multiple_of(every)) || state.step == total {
        eprintln!("step {:>6}/{total}  loss {loss:.6}", state.step);
    }
}

pub fn train(
    args: &ConfigArgs,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let fallback = resume.as_deref().map(checkpoint_config).transpose()?;
    let config = load_config(args, fallback.as_ref())?;
    let data = load_data(&config, data)?;
    let mut state = match &resume {
        Some(path) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(path)?, &config)?;
            if s.stage != Stage::Stage1 {
                bail!("{} is not a stage-1 checkpoint", path.display());
            }
            s
        }
        None => stage1_init(&config)?,
    };
    let out = out.unwrap_or_else(|| config.paths.run_dir.join("stage1.psdt"));
    create_parent(&out)?;
    let total = config.train.total_steps();
    let every = config.train.checkpoint_every;
    stage1_run(&config, &data.train, &mut state, |s, loss| {
        log_step(s, loss, config.train.log_every, total);
        if every > 0 && s.step % every == 0 {
            s.to_checkpoint(&config).save(&out)?;
        }
        Ok(())
    })?;
    state.to_checkpoint(&config).save(&out)?;
    println!("wrote {} at step {}", out.display(), state.step);
    Ok(ExitCode::SUCCESS)
}

pub fn merge_lora(ckpt: &Path, weights: Option<&str>, out: &Path) -> anyhow::Result<ExitCode> {
    let source = Checkpoint::load(ckpt)?;
    let (model, config, _) = Model::from_checkpoint(&source)?;
    let omega = match (&model.lora, weights) {
        (None, _) => Vec::new(),
        (Some(l), Some(s)) => parse_omega(s, &l.tasks)?,
        (Some(_), None) if model.routing == Routing::Shared => vec![1.0],
        (Some(_), None) => config.recraft_merge_omega(),
    };
    let merged = merge_checkpoint(&source, &omega)?;
    create_parent(out)?;
    merged.save(out)?;
    println!("wrote {} (weights {omega:?})", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn sample(
    ckpt: &Path,
    task: &str,
    seed: u64,
    steps: Option<usize>,
    omega: Option<&str>,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let (model, config, _) = load_model(ckpt)?;
    let id = task_id(&config, task)?;
    let sampler = SamplerConfig {
        steps: steps.unwrap_or(config.flow.steps),
        seed,
    };
    let shape = config.model.image_shape(1);
    let z = match omega {
        Some(weights) => {
            let lora = model
                .lora
                .as_ref()
                .ok_or_else(|| anyhow!("--omega needs a checkpoint with adapters"))?;
            let w = parse_omega(weights, &lora.tasks)?;
            let field = Denoiser::new(&model.dit, &model.params).with_lora(lora, w);
            euler_sample(&field, &shape, &[id], &sampler)?
        }
        None => euler_sample(&model, &shape, &[id], &sampler)?,
    };
    let order = SerpentineOrder::for_config(&config.model)?;
    let grid = to_pixel_space(&unstack_grids(&z)?[0]);
    write_sequence(out, &decompose(&grid, &order)?, &order)?;
    println!("wrote {} frames to {}", order.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train_recraft(
    base: &Path,
    args: &ConfigArgs,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let merged = Checkpoint::load(base)?;
    let base_config = Model::from_checkpoint(&merged)?.1;
    let config = load_config(args, Some(&base_config))?;
    if config.model != base_config.model {
        return Err(Error::Config(format!(
            "model config differs from the one in {}",
            base.display()
        ))
        .into());
    }
    let data = load_data(&config, data)?;
    let mut state = match &resume {
        Some(path) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(path)?, &config)?;
            if s.stage != Stage::Recraft {
                bail!("{} is not a conditional-stage checkpoint", path.display());
            }
            s
        }
        None => recraft_init(&config, &merged)?,
    };
    let out = out.unwrap_or_else(|| config.paths.run_dir.join("recraft.psdt"));
    create_parent(&out)?;
    let total = config.recraft.steps;
    let every = config.train.checkpoint_every;
    recraft_run(&config, &data.train, &mut state, |s, loss| {
        log_step(s, loss, config.train.log_every, total);
        if every > 0 && s.step % every == 0 {
            s.to_checkpoint(&config).save(&out)?;
        }
        Ok(())
    })?;
    state.to_checkpoint(&config).save(&out)?;
    println!("wrote {} at step {}", out.display(), state.step);
    Ok(ExitCode::SUCCESS)
}

pub fn recraft(
    ckpt: &Path,
    image: &Path,
    task: &str,
    seed: u64,
    steps: Option<usize>,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let (model, config, _) = load_model(ckpt)?;
    let id = task_id(&config, task)?;
    let order = SerpentineOrder::for_config(&config.model)?;
    let image_data: Tensor<f32> = read_pgm(image)?;
    let f = config.model.frame_size;
    let grid = [config.model.image_height(), config.model.image_width()];
    let tail = if image_data.shape() == [f, f] {
        image_data
    } else if image_data.shape() == grid {
        // a whole grid: condition on its last frame
        decompose(&image_data, &order)?
            .pop()
            .expect("non-empty order")
    } else {
        return Err(Error::Data(format!(
            "{} is {:?}, expected a {f}x{f} frame or a {grid:?} grid",
            image.display(),
            image_data.shape()
        ))
        .into());
    };
    let sampler = SamplerConfig {
        steps: steps.unwrap_or(config.flow.steps),
        seed,
    };
    let frames = recraft_sample(&model, &config.model, &[tail], &[id], &sampler)?;
    write_sequence(out, &frames[0], &order)?;
    println!("wrote {} frames to {}", order.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    ckpt: Option<&Path>,
    args: &ConfigArgs,
    data: Option<PathBuf>,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let loaded = ckpt.map(load_model).transpose()?;
    let config = load_config(args, loaded.as_ref().map(|(_, c, _)| c))?;
    let data = load_data(&config, data)?;
    let mut report = match &loaded {
        Some((model, saved, meta)) => {
            if saved.model != config.model {
                return Err(Error::Config("eval config describes a different model".into()).into());
            }
            let mut r = evaluate(&config, &data, Source::Model(model, meta.stage))?;
            r.loss_curve = meta.losses.clone();
            r.parent_loss_curve = meta.parent_losses.clone();
            r
        }
        None => evaluate(&config, &data, Source::GroundTruth)?,
    };
    report.config = config;
    create_parent(out)?;
    write_atomic(out, report.to_json()?.as_bytes())?;
    for (task, score) in &report.tasks {
        let perm = &report.permuted[task];
        println!(
            "{task}: monotonicity {:.4} (permuted {:.4}, win rate {:.4})",
            score.monotonicity, perm.monotonicity, perm.win_rate
        );
    }
    if let Some(r) = &report.recraft {
        println!(
            "recraft: tail mse {:.5}, paired win rate {:.4}",
            r.tail_mse, r.paired_win_rate
        );
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(args: &ConfigArgs, seeds: u64) -> anyhow::Result<ExitCode> {
    let config = load_config(args, None)?;
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in 0..seeds.max(1) {
        cases.extend(gradsuite::op_cases(seed)?);
    }
    cases.extend(gradsuite::loss_cases(&config.model, 0)?);
    let mut worst: f64 = 0.0;
    for c in &cases {
        println!(
            "{:<20} max rel error {:.3e} over {} coordinates",
            c.name, c.report.max_rel_error, c.report.checked
        );
        worst = worst.max(c.report.max_rel_error);
    }
    println!(
        "{} checks, worst {worst:.3e}, {:.1}s",
        cases.len(),
        start.elapsed().as_secs_f64()
    );
    if worst >= GRAD_TOLERANCE {
        eprintln!("error: relative error {worst:.3e} is not below {GRAD_TOLERANCE:e}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}
