use makeseq_core::dit::Ctx;
use makeseq_core::flow::{eval_velocity, Denoiser};
use makeseq_core::lora::{AsymLora, LoraApplication, LoraSet, LoraTargetSet, TaskWeights};
use makeseq_core::{DiT, Graph, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 2,
        depth: 2,
        patch_size: 2,
        frame_size: 4,
        task_vocab: 3,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

/// Base with every weight nudged off its zero init and adapters with
/// non-zero `B`.
fn trained_like<T: makeseq_core::Real>(seed: u64) -> (DiT, ParamStore<T>, LoraSet<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dit = DiT::new(tiny()).unwrap();
    let mut params = dit.init_params::<T, _>(&mut rng).unwrap();
    for (_, t) in params.iter_mut() {
        *t = t
            .add(&Tensor::randn(t.shape().to_vec(), 0.1, &mut rng))
            .unwrap();
    }
    let tasks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut lora = LoraSet::init(&params, &LoraTargetSet::default(), &tasks, 4, &mut rng).unwrap();
    for (_, t) in lora.named_tensors_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut rng);
    }
    (dit, params, lora)
}

fn max_rel(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let scale = a
        .data()
        .iter()
        .fold(0f64, |m, &v| m.max(f64::from(v).abs()));
    let diff = a.data().iter().zip(b.data()).fold(0f64, |m, (&x, &y)| {
        m.max((f64::from(x) - f64::from(y)).abs())
    });
    diff / scale
}

#[test]
fn merged_forward_matches_runtime_over_sixteen_batches() {
    let (dit, params, lora) = trained_like::<f32>(3);
    let omega = [0.7, 0.0, 1.3];
    let merged = lora.merge(&params, &omega).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..16 {
        let z = Tensor::randn(dit.config.image_shape(4).to_vec(), 1.0, &mut rng);
        let t = [0.1, 0.4, 0.6, 0.95];
        let tasks = [0, 1, 2, 1];
        let base = eval_velocity(&Denoiser::new(&dit, &merged), &z, &t, &tasks).unwrap();
        let runtime = Denoiser::new(&dit, &params).with_lora(&lora, omega.to_vec());
        let rt = eval_velocity(&runtime, &z, &t, &tasks).unwrap();
        assert!(max_rel(&base, &rt) < 1e-5, "{}", max_rel(&base, &rt));
    }
}

#[test]
fn zero_omega_runtime_is_the_base_forward() {
    let (dit, params, lora) = trained_like::<f32>(4);
    let z = Tensor::randn(
        dit.config.image_shape(2).to_vec(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let plain = eval_velocity(&Denoiser::new(&dit, &params), &z, &[0.3, 0.8], &[0, 2]).unwrap();
    let zero = Denoiser::new(&dit, &params).with_lora(&lora, vec![0.0; 3]);
    let off = eval_velocity(&zero, &z, &[0.3, 0.8], &[0, 2]).unwrap();
    assert_eq!(plain, off);
}

#[test]
fn absent_tasks_get_exactly_zero_b_gradients() {
    let (dit, params, lora) = trained_like::<f64>(5);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let app = LoraApplication {
        bound: lora.bind(&mut g, true),
        weights: TaskWeights::one_hot(&[1, 1], 3).unwrap(),
    };
    let z = g.constant(Tensor::randn(
        dit.config.image_shape(2).to_vec(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(1),
    ));
    let v = dit
        .forward(
            &mut g,
            Ctx::new(&bound, Some(&app)),
            z,
            &[0.2, 0.7],
            &[1, 1],
        )
        .unwrap();
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    for (name, ad) in &app.bound.adapters {
        for (i, &b) in ad.b.iter().enumerate() {
            let grad = grads.wrt(b);
            let nonzero = grad.data().iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, i == 1, "{name} B.{i}");
        }
        assert!(grads.wrt(ad.a).data().iter().any(|&x| x != 0.0));
    }
    for (name, var) in bound.iter() {
        assert!(
            grads
                .get(var)
                .is_none_or(|g| g.data().iter().all(|&x| x == 0.0)),
            "{name}"
        );
    }
}

#[test]
fn different_omega_changes_the_output() {
    let (dit, params, lora) = trained_like::<f32>(6);
    let z = Tensor::randn(
        dit.config.image_shape(1).to_vec(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(2),
    );
    let a = Denoiser::new(&dit, &params).with_lora(&lora, vec![1.0, 0.0, 0.0]);
    let b = Denoiser::new(&dit, &params).with_lora(&lora, vec![0.0, 1.0, 0.0]);
    let va = eval_velocity(&a, &z, &[0.5], &[0]).unwrap();
    let vb = eval_velocity(&b, &z, &[0.5], &[0]).unwrap();
    assert_ne!(va, vb);
}

#[test]
fn mixed_batch_a_gradient_is_the_sum_of_per_task_batches() {
    let (dit, params, lora) = trained_like::<f64>(7);
    let z_all = Tensor::randn(
        dit.config.image_shape(2).to_vec(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(3),
    );
    let grad_a = |idx: &[usize], tasks: &[usize]| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let app = LoraApplication {
            bound: lora.bind(&mut g, true),
            weights: TaskWeights::one_hot(tasks, 3).unwrap(),
        };
        let parts: Vec<Tensor<f64>> = idx.iter().map(|&i| z_all.slice(0, i, 1).unwrap()).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let z = g.constant(Tensor::concat(&refs, 0).unwrap());
        let t = vec![0.4; idx.len()];
        let v = dit
            .forward(&mut g, Ctx::new(&bound, Some(&app)), z, &t, tasks)
            .unwrap();
        let loss = g.sum(v);
        let grads = g.backward(loss).unwrap();
        let a = app.bound.adapters["blocks.0.attn.q.weight"].a;
        grads.wrt(a)
    };
    let both = grad_a(&[0, 1], &[0, 2]);
    let sum = grad_a(&[0], &[0]).add(&grad_a(&[1], &[2])).unwrap();
    for (x, y) in both.data().iter().zip(sum.data()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

fn adapter(seed: u64, tasks: usize) -> AsymLora<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ad = AsymLora::init("w", 6, 5, 3, tasks, &mut rng);
    for b in ad.b.iter_mut() {
        *b = Tensor::randn(vec![6, 3], 1.0, &mut rng);
    }
    ad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_scales_exactly_by_powers_of_two(
        seed in any::<u64>(),
        omega in prop::collection::vec(-4.0f64..4.0, 3),
        k in -8i32..8,
    ) {
        let ad = adapter(seed, 3);
        let alpha = 2f64.powi(k);
        let scaled: Vec<f64> = omega.iter().map(|w| alpha * w).collect();
        let lhs = ad.delta(&scaled).unwrap();
        let rhs = ad.delta(&omega).unwrap().scale(alpha);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn delta_is_the_ordered_sum_of_single_task_deltas(
        seed in any::<u64>(),
        omega in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let ad = adapter(seed, 3);
        let mut acc = Tensor::zeros(vec![6, 5]);
        for (i, &w) in omega.iter().enumerate() {
            let mut one = vec![0.0; 3];
            one[i] = w;
            acc = acc.add(&ad.delta(&one).unwrap()).unwrap();
        }
        prop_assert_eq!(ad.delta(&omega).unwrap(), acc);
    }

    #[test]
    fn zero_omega_merge_is_bit_identical(seed in any::<u64>()) {
        let (_, params, lora) = trained_like::<f64>(seed);
        let merged = lora.merge(&params, &[0.0; 3]).unwrap();
        for ((n1, a), (n2, b)) in params.iter().zip(merged.iter()) {
            prop_assert_eq!(n1, n2);
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "{} changed", n1);
        }
    }

    #[test]
    fn runtime_matches_merged_weight(
        seed in any::<u64>(),
        omega in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let ad = adapter(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let w0 = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let x = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let merged = w0.add(&ad.delta(&omega).unwrap()).unwrap();
        let want = x.matmul(&merged.transpose2().unwrap()).unwrap();
        let got = ad.apply_runtime(&x, &w0, &omega).unwrap();
        let scale = want.max_abs().max(1.0);
        for (a, b) in want.data().iter().zip(got.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn single_task_delta_has_rank_at_most_r(seed in any::<u64>()) {
        // rows of B A lie in the row space of A: projecting onto the
        // orthogonal complement of A's rows leaves nothing
        let ad = adapter(seed, 1);
        let d = ad.delta(&[1.0]).unwrap();
        let a = ad.a.clone();
        let (r, n) = (a.shape()[0], a.shape()[1]);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in 0..r {
            let mut v: Vec<f64> = a.data()[i * n..(i + 1) * n].to_vec();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.iter().map(|x| x / norm).collect());
        }
        let scale = d.max_abs();
        for row in d.data().chunks(n) {
            let mut v = row.to_vec();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            prop_assert!(v.iter().all(|x| x.abs() < 1e-9 * scale));
        }
    }
}
