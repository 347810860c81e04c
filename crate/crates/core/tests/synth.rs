use std::fs;

use makeseq_core::io::{decode_pgm, encode_pgm};
use makeseq_core::synth::{
    coverage, gen_dataset, min_new_pixels, monotonicity, DataConfig, Dataset, DatasetManifest,
    TaskKind, MONOTONICITY_DELTA,
};
use makeseq_core::{serpentine_order, Tensor};
use proptest::prelude::*;

fn task() -> impl Strategy<Value = TaskKind> {
    prop::sample::select(TaskKind::ALL.to_vec())
}

fn small_data(seed: u64) -> DataConfig {
    DataConfig {
        train_per_task: 6,
        val_per_task: 3,
        seed,
        ..DataConfig::default()
    }
}

#[test]
fn tasks_are_separable() {
    let n = 64;
    let means: Vec<Vec<f64>> = TaskKind::ALL
        .iter()
        .map(|t| {
            let mut acc = vec![0.0; 256];
            for seed in 0..n {
                let s = t.generate(seed, 4, 16).unwrap();
                for (a, &v) in acc.iter_mut().zip(s.frames[3].data()) {
                    *a += f64::from(v) / n as f64;
                }
            }
            acc
        })
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let l1: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 256.0;
            assert!(
                l1 > 0.01,
                "{:?} vs {:?}: {l1}",
                TaskKind::ALL[i],
                TaskKind::ALL[j]
            );
        }
    }
}

#[test]
fn ground_truth_scores_one_and_reversed_scores_zero() {
    let order = serpentine_order(2, 2).unwrap();
    let data =
        Dataset::generate(DatasetManifest::plan(&small_data(1), &order, 16).unwrap()).unwrap();
    for rec in data.train.iter().chain(&data.val) {
        let frames = data.frames(rec).unwrap();
        assert_eq!(monotonicity(&frames, MONOTONICITY_DELTA), 1.0);
        let rev: Vec<_> = frames.into_iter().rev().collect();
        assert_eq!(monotonicity(&rev, MONOTONICITY_DELTA), 0.0);
    }
}

#[test]
fn dataset_on_disk_round_trips_and_regenerates_identically() {
    let order = serpentine_order(2, 2).unwrap();
    let manifest = DatasetManifest::plan(&small_data(2), &order, 16).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let made = gen_dataset(&manifest, d1.path()).unwrap();
    gen_dataset(&manifest, d2.path()).unwrap();
    let loaded = Dataset::load(d1.path()).unwrap();
    assert_eq!(loaded, made);
    let mut names: Vec<_> = fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), manifest.samples.len() + 1);
    for name in names {
        let a = fs::read(d1.path().join(&name)).unwrap();
        let b = fs::read(d2.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}

#[test]
fn train_and_val_seeds_are_disjoint() {
    let order = serpentine_order(3, 3).unwrap();
    let m = DatasetManifest::plan(&small_data(5), &order, 16).unwrap();
    assert_eq!(m.frames, 9);
    assert!(m.train_seeds.iter().all(|s| !m.val_seeds.contains(s)));
    assert_eq!(m.counts["stroke"], 9);
}

#[test]
fn corrupt_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.json"), "{").unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(makeseq_core::Error::Data(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_frame_adds_visible_coverage(seed in any::<u64>(), task in task(), nine in any::<bool>()) {
        let k = if nine { 9 } else { 4 };
        let s = task.generate(seed, k, 16).unwrap();
        prop_assert_eq!(s.frames.len(), k);
        let step = min_new_pixels(16) as f64 / 256.0;
        prop_assert!(coverage(&s.frames[0]) >= step - 1e-12);
        for w in s.frames.windows(2) {
            prop_assert!(coverage(&w[1]) - coverage(&w[0]) >= step - 1e-12);
            // covered pixels stay covered
            for (a, b) in w[0].data().iter().zip(w[1].data()) {
                prop_assert!(*a <= 0.5 || *b > 0.5);
            }
        }
        prop_assert_eq!(monotonicity(&s.frames, MONOTONICITY_DELTA), 1.0);
    }

    #[test]
    fn generation_is_deterministic_and_quantized(seed in any::<u64>(), task in task()) {
        let a = task.generate(seed, 4, 16).unwrap();
        prop_assert_eq!(&a, &task.generate(seed, 4, 16).unwrap());
        for f in &a.frames {
            for &v in f.data() {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!((v * 255.0).round() / 255.0, v);
            }
        }
    }

    #[test]
    fn pgm_round_trip_is_exact(seed in any::<u64>(), task in task()) {
        let order = serpentine_order(2, 2).unwrap();
        let grid = task.generate(seed, 4, 16).unwrap().grid(&order).unwrap();
        let bytes = encode_pgm(&grid).unwrap();
        let back: Tensor<f32> = decode_pgm(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn larger_frames_also_grow(seed in 0u64..1000, task in task()) {
        let s = task.generate(seed, 4, 24).unwrap();
        prop_assert_eq!(monotonicity(&s.frames, MONOTONICITY_DELTA), 1.0);
    }
}
