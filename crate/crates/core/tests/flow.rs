use makeseq_core::flow::{
    cfm_loss, euler_integrate, euler_sample, initial_noise, interpolate, target_velocity,
    SamplerConfig, TimeDistribution,
};
use makeseq_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(vec![1, v.len()], v).unwrap()
}

#[test]
fn oracle_model_has_zero_loss() {
    // with t and eps fixed by the rng, replaying the draw gives the exact target
    let x0 = Tensor::randn(vec![2, 1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut probe = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let zero = |g: &mut Graph<f64>, z: Var, _: &[f64], _: &[usize]| Ok(g.scale(z, 0.0));
    let draw = cfm_loss(
        &mut g,
        &zero,
        &x0,
        &[0, 0],
        TimeDistribution::Uniform,
        &mut probe,
    )
    .unwrap();
    let target = draw.target.clone();
    let oracle =
        move |g: &mut Graph<f64>, _: Var, _: &[f64], _: &[usize]| Ok(g.constant(target.clone()));
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = cfm_loss(
        &mut g,
        &oracle,
        &x0,
        &[0, 0],
        TimeDistribution::Uniform,
        &mut rng,
    )
    .unwrap();
    assert_eq!(g.value(d.loss).item(), 0.0);
}

#[test]
fn zero_model_loss_is_mean_squared_velocity() {
    let x0 = Tensor::randn(vec![3, 1, 4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let zero = |g: &mut Graph<f64>, z: Var, _: &[f64], _: &[usize]| Ok(g.scale(z, 0.0));
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = cfm_loss(
        &mut g,
        &zero,
        &x0,
        &[0, 0, 0],
        TimeDistribution::Uniform,
        &mut rng,
    )
    .unwrap();
    let want = d.target.data().iter().map(|v| v * v).sum::<f64>() / d.target.numel() as f64;
    assert!((g.value(d.loss).item() - want).abs() < 1e-12);
}

#[test]
fn exp_decay_error_shrinks_with_steps() {
    // v = z, integrated from t = 1 to 0: z(0) = z(1) / e
    let field = |_: &mut Graph<f64>, z: Var, _: &[f64], _: &[usize]| Ok(z);
    for steps in [8, 32, 128] {
        let z = euler_integrate(&field, vec_tensor(&[1.0]), &[0], steps, None).unwrap();
        let err = (z.data()[0] - (-1f64).exp()).abs();
        assert!(err < 2.0 / steps as f64, "steps {steps}: {err}");
    }
}

#[test]
fn sampler_is_seeded() {
    let field = |g: &mut Graph<f64>, z: Var, _: &[f64], _: &[usize]| Ok(g.scale(z, 0.5));
    let cfg = SamplerConfig { steps: 4, seed: 3 };
    let a = euler_sample(&field, &[2, 1, 4, 4], &[0, 0], &cfg).unwrap();
    let b = euler_sample(&field, &[2, 1, 4, 4], &[0, 0], &cfg).unwrap();
    assert_eq!(a, b);
    let c = euler_sample(
        &field,
        &[2, 1, 4, 4],
        &[0, 0],
        &SamplerConfig { seed: 4, ..cfg },
    )
    .unwrap();
    assert_ne!(a, c);
    let noise: Tensor<f64> = initial_noise(&[2, 1, 4, 4], 3);
    assert_eq!(noise.shape(), a.shape());
}

#[test]
fn frozen_elements_never_move() {
    let field = |g: &mut Graph<f64>, z: Var, _: &[f64], _: &[usize]| Ok(g.add_scalar(z, 1.0));
    let z1 = Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let out = euler_integrate(&field, z1, &[0, 0], 5, Some(&[false, true, false])).unwrap();
    assert_eq!(out.at(&[0, 1]), 2.0);
    assert_eq!(out.at(&[1, 1]), 5.0);
    assert_ne!(out.at(&[0, 0]), 1.0);
}

proptest! {
    #[test]
    fn endpoints_are_exact(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let (x0, eps) = (vec_tensor(&a), vec_tensor(&b));
        prop_assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps.clone());
    }

    #[test]
    fn euler_recovers_data_on_the_true_straight_field(
        v in prop::collection::vec((-3f64..3.0, -3f64..3.0), 1..16),
        steps in 1usize..200,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let (x0, eps) = (vec_tensor(&a), vec_tensor(&b));
        let u = target_velocity(&x0, &eps).unwrap();
        let field = |g: &mut Graph<f64>, _: Var, _: &[f64], _: &[usize]| Ok(g.constant(u.clone()));
        let out = euler_integrate(&field, eps.clone(), &[0], steps, None).unwrap();
        // one rounding per step on values of magnitude <= 9
        let bound = 9.0 * 4.0 * steps as f64 * f64::EPSILON;
        for (got, want) in out.data().iter().zip(x0.data()) {
            prop_assert!((got - want).abs() <= bound, "{} vs {}", got, want);
        }
    }

    #[test]
    fn euler_is_bit_exact_on_dyadic_constant_fields(
        v in prop::collection::vec((-64i32..64, -64i32..64), 1..16),
        log_steps in 0u32..8,
    ) {
        let a: Vec<f64> = v.iter().map(|p| p.0 as f64 / 8.0).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1 as f64 / 8.0).collect();
        let (x0, eps) = (vec_tensor(&a), vec_tensor(&b));
        let u = target_velocity(&x0, &eps).unwrap();
        let field = |g: &mut Graph<f64>, _: Var, _: &[f64], _: &[usize]| Ok(g.constant(u.clone()));
        let out = euler_integrate(&field, eps.clone(), &[0], 1 << log_steps, None).unwrap();
        prop_assert_eq!(out, x0);
    }

    #[test]
    fn velocity_is_the_path_slope(
        a in -5f64..5.0, b in -5f64..5.0, t in 0.01f64..0.99,
    ) {
        let (x0, eps) = (vec_tensor(&[a]), vec_tensor(&[b]));
        let h = 1e-6;
        let up = interpolate(&x0, &eps, t + h).unwrap().data()[0];
        let dn = interpolate(&x0, &eps, t - h).unwrap().data()[0];
        let u = target_velocity(&x0, &eps).unwrap().data()[0];
        prop_assert!(((up - dn) / (2.0 * h) - u).abs() < 1e-6);
    }

    #[test]
    fn logit_normal_stays_in_the_open_unit_interval(seed in any::<u64>(), mean in -2f64..2.0) {
        let dist = TimeDistribution::LogitNormal { mean, std: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let t = dist.sample(&mut rng);
            prop_assert!((0.0..=1.0).contains(&t));
        }
    }
}
