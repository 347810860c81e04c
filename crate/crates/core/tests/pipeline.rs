use makeseq_core::checkpoint::Checkpoint;
use makeseq_core::pipeline::{
    evaluate, merge_checkpoint, recraft_init, recraft_run, stage1_init, stage1_run, Config, Model,
    Routing, Source, Stage, TrainState,
};
use makeseq_core::synth::{Dataset, DatasetManifest, TaskKind};
use makeseq_core::{Error, SerpentineOrder};

fn tiny_run() -> Config {
    Config::from_json(
        r#"{
            "model": {"embed_dim": 16, "heads": 2, "depth": 1, "patch_size": 4,
                      "frame_size": 16, "grid_rows": 2, "grid_cols": 2, "task_vocab": 3,
                      "mlp_ratio": 2},
            "train": {"lr": 0.003, "batch": 4, "base_pretrain_steps": 6, "steps": 4, "seed": 3},
            "recraft": {"tasks": ["blocks"], "lr": 0.001, "batch": 4, "steps": 3, "seed": 1},
            "data": {"train_per_task": 8, "val_per_task": 3, "seed": 4},
            "eval": {"samples_per_task": 3, "seed": 2},
            "flow": {"steps": 4}
        }"#,
    )
    .unwrap()
}

fn dataset(config: &Config) -> Dataset {
    let order = SerpentineOrder::for_config(&config.model).unwrap();
    Dataset::generate(DatasetManifest::plan(&config.data, &order, config.model.frame_size).unwrap())
        .unwrap()
}

fn trained(config: &Config, data: &Dataset) -> TrainState {
    let mut state = stage1_init(config).unwrap();
    stage1_run(config, &data.train, &mut state, |_, _| Ok(())).unwrap();
    state
}

#[test]
fn resume_reproduces_the_loss_trajectory_bit_exactly() {
    let config = tiny_run();
    let data = dataset(&config);
    let full = trained(&config, &data);
    assert_eq!(full.losses.len(), 10);

    // stop inside each phase, round-trip through bytes, continue
    for stop in [3, 8] {
        let short = Config {
            train: makeseq_core::pipeline::TrainConfig {
                steps: stop.max(6) - 6,
                base_pretrain_steps: stop.min(6),
                ..config.train.clone()
            },
            ..config.clone()
        };
        let mut state = stage1_init(&config).unwrap();
        let mut saved = None;
        stage1_run(&config, &data.train, &mut state, |s, _| {
            if s.step == stop {
                saved = Some(s.to_checkpoint(&short).to_bytes()?);
                return Err(Error::InvalidArgument("stop".into()));
            }
            Ok(())
        })
        .unwrap_err();
        let bytes = saved.unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let mut resumed = TrainState::from_checkpoint(&ckpt, &config).unwrap();
        assert_eq!(resumed.step, stop);
        stage1_run(&config, &data.train, &mut resumed, |_, _| Ok(())).unwrap();
        let a: Vec<u64> = full.losses.iter().map(|l| l.to_bits()).collect();
        let b: Vec<u64> = resumed.losses.iter().map(|l| l.to_bits()).collect();
        assert_eq!(a, b, "resumed at {stop}");
        assert_eq!(resumed.model, full.model);
    }
}

#[test]
fn base_is_frozen_once_adapters_exist() {
    let config = tiny_run();
    let data = dataset(&config);
    let mut state = stage1_init(&config).unwrap();
    let mut base_at_switch = None;
    stage1_run(&config, &data.train, &mut state, |s, _| {
        if s.step == config.train.base_pretrain_steps {
            base_at_switch = Some(s.model.params.clone());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(Some(state.model.params.clone()), base_at_switch);
    let lora = state.model.lora.as_ref().unwrap();
    assert_eq!(lora.tasks, ["stroke", "fill", "blocks"]);
    assert!(lora
        .named_tensors()
        .iter()
        .any(|(n, t)| n.contains(".B.") && t.max_abs() > 0.0));
}

#[test]
fn checkpoint_round_trip_keeps_adapters_bit_exact() {
    let config = tiny_run();
    let data = dataset(&config);
    let state = trained(&config, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.psdt");
    state.to_checkpoint(&config).save(&path).unwrap();
    let (model, saved, meta) = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model, state.model);
    assert_eq!(saved, config);
    assert_eq!(meta.stage, Stage::Stage1);
    assert_eq!(meta.step, 10);
}

#[test]
fn merge_folds_adapters_and_conditional_stage_trains() {
    let config = tiny_run();
    let data = dataset(&config);
    let state = trained(&config, &data);
    let ckpt = state.to_checkpoint(&config);
    let merged = merge_checkpoint(&ckpt, &config.recraft_merge_omega()).unwrap();
    assert!(merged
        .tensors
        .keys()
        .all(|k| !k.starts_with("lora.") && !k.starts_with("adam.")));
    let zero = merge_checkpoint(&ckpt, &[0.0; 3]).unwrap();
    for (name, t) in state.model.params.iter() {
        assert_eq!(zero.tensors[name], *t);
    }
    // stage-1 checkpoints are refused as a conditional base
    assert!(recraft_init(&config, &ckpt).is_err());

    let mut rc = recraft_init(&config, &merged).unwrap();
    assert_eq!(rc.parent_losses, state.losses);
    let before = rc.model.params.clone();
    recraft_run(&config, &data.train, &mut rc, |_, _| Ok(())).unwrap();
    assert_eq!(rc.losses.len(), 3);
    assert_eq!(rc.model.params, before);

    let report = evaluate(&config, &data, Source::Model(&rc.model, Stage::Recraft)).unwrap();
    let again = evaluate(&config, &data, Source::Model(&rc.model, Stage::Recraft)).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
    assert!(report.recraft.is_some());
    assert_eq!(report.eval_losses.keys().collect::<Vec<_>>(), ["blocks"]);
}

#[test]
fn ground_truth_report_scores_one() {
    let config = tiny_run();
    let data = dataset(&config);
    let report = evaluate(&config, &data, Source::GroundTruth).unwrap();
    for task in TaskKind::ALL {
        assert_eq!(report.tasks[task.name()].monotonicity, 1.0);
        assert_eq!(report.permuted[task.name()].win_rate, 1.0);
    }
    assert!(report.eval_losses.is_empty());
}

#[test]
fn shared_routing_uses_one_adapter_matrix() {
    let mut config = tiny_run();
    config.lora.routing = Routing::Shared;
    config.lora.rank = 8;
    let data = dataset(&config);
    let state = trained(&config, &data);
    let lora = state.model.lora.as_ref().unwrap();
    assert_eq!(lora.tasks, ["shared"]);

    let per_task = trained(&tiny_run(), &data);
    assert_eq!(
        lora.num_scalars(),
        per_task.model.lora.as_ref().unwrap().num_scalars()
    );
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let config = tiny_run()
        .with_overrides(&["train.lr=1e30", "train.schedule={\"kind\":\"constant\"}"])
        .unwrap();
    let data = dataset(&config);
    let mut state = stage1_init(&config).unwrap();
    let err = stage1_run(&config, &data.train, &mut state, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}
