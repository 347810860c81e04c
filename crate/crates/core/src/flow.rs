//! Rectified-flow noising, the conditional flow-matching loss and the Euler
//! sampler.
//!
//! Convention: `z_t = (1 - t) x0 + t eps`, target velocity `u = eps - x0`,
//! sampling integrates from pure noise at `t = 1` down to data at `t = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dit::{Ctx, DiT, ParamStore};
use crate::error::{Error, Result};
use crate::lora::{LoraApplication, LoraSet, TaskWeights};
use crate::numerics::{Graph, Real, Tensor, Var};

/// A velocity predictor `v(z_t, t, task)` evaluated on a graph.
pub trait VelocityField<T: Real> {
    fn velocity(&self, g: &mut Graph<T>, z_t: Var, t: &[f64], tasks: &[usize]) -> Result<Var>;
}

impl<T, F> VelocityField<T> for F
where
    T: Real,
    F: Fn(&mut Graph<T>, Var, &[f64], &[usize]) -> Result<Var>,
{
    fn velocity(&self, g: &mut Graph<T>, z_t: Var, t: &[f64], tasks: &[usize]) -> Result<Var> {
        self(g, z_t, t, tasks)
    }
}

/// A frozen model (optionally with adapters combined by fixed weights `omega`)
/// used for sampling and evaluation.
pub struct Denoiser<'a, T> {
    pub dit: &'a DiT,
    pub params: &'a ParamStore<T>,
    pub lora: Option<(&'a LoraSet<T>, Vec<f64>)>,
}

impl<'a, T: Real> Denoiser<'a, T> {
    pub fn new(dit: &'a DiT, params: &'a ParamStore<T>) -> Self {
        Self {
            dit,
            params,
            lora: None,
        }
    }

    pub fn with_lora(mut self, lora: &'a LoraSet<T>, omega: Vec<f64>) -> Self {
        self.lora = Some((lora, omega));
        self
    }
}

impl<T: Real> VelocityField<T> for Denoiser<'_, T> {
    fn velocity(&self, g: &mut Graph<T>, z_t: Var, t: &[f64], tasks: &[usize]) -> Result<Var> {
        let bound = self.params.bind(g, |_| false);
        let app = match &self.lora {
            Some((set, omega)) => Some(LoraApplication {
                bound: set.bind(g, false),
                weights: TaskWeights::uniform(omega, tasks.len())?,
            }),
            None => None,
        };
        self.dit
            .forward(g, Ctx::new(&bound, app.as_ref()), z_t, t, tasks)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeDistribution {
    #[default]
    Uniform,
    /// `t = sigmoid(mean + std * n)`, `n ~ N(0, 1)`.
    LogitNormal { mean: f64, std: f64 },
}

impl TimeDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeDistribution::Uniform => rng.gen_range(0.0..1.0),
            TimeDistribution::LogitNormal { mean, std } => {
                let n: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-(mean + std * n)).exp())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 32, seed: 0 }
    }
}

/// One flow-matching training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    pub z_t: Tensor<T>,
    pub u_t: Tensor<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(x0: Tensor<T>, eps: Tensor<T>, t: f64) -> Result<Self> {
        let z_t = interpolate(&x0, &eps, t)?;
        let u_t = target_velocity(&x0, &eps)?;
        Ok(Self {
            x0,
            eps,
            t,
            z_t,
            u_t,
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn lerp<T: Real>(x0: T, eps: T, t: f64) -> T {
    if t == 0.0 {
        x0
    } else if t == 1.0 {
        eps
    } else {
        T::from_f64(1.0 - t) * x0 + T::from_f64(t) * eps
    }
}

/// `(1 - t) x0 + t eps`; the endpoints return `x0` / `eps` exactly.
pub fn interpolate<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_time(t)?;
    x0.zip_map(eps, "interpolate", |a, b| lerp(a, b, t))
}

/// Per-sample interpolation along the leading axis.
pub fn interpolate_batch<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("interpolate", x0.shape(), eps.shape()));
    }
    let batch = x0.shape().first().copied().unwrap_or(1);
    if t.len() != batch {
        return Err(Error::shape("interpolate", x0.shape(), &[t.len()]));
    }
    t.iter().try_for_each(|&ti| check_time(ti))?;
    let per = x0.numel() / batch;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&a, &b))| lerp(a, b, t[i / per]))
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `eps - x0`, independent of `t` on the straight path.
pub fn target_velocity<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.sub(x0)
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Noise the sampler starts from for a given seed.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    gaussian(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Loss node plus the draws that produced it.
#[derive(Debug)]
pub struct CfmDraw<T> {
    pub loss: Var,
    pub t: Vec<f64>,
    pub eps: Tensor<T>,
    pub target: Tensor<T>,
}

/// Draws `t` for each sample, then `eps ~ N(0, 1)` of the batch shape.
pub fn draw_noise<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    dist: TimeDistribution,
    rng: &mut R,
) -> (Vec<f64>, Tensor<T>) {
    let t: Vec<f64> = (0..shape[0]).map(|_| dist.sample(rng)).collect();
    let eps = gaussian(shape, rng);
    (t, eps)
}

/// Conditional flow-matching loss: mean over all elements of
/// `(v(z_t, t, task) - (eps - x0))^2`.
pub fn cfm_loss<T: Real, M: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &M,
    x0: &Tensor<T>,
    tasks: &[usize],
    dist: TimeDistribution,
    rng: &mut R,
) -> Result<CfmDraw<T>> {
    if x0.rank() == 0 || x0.shape()[0] == 0 || tasks.len() != x0.shape()[0] {
        return Err(Error::InvalidArgument(format!(
            "cfm batch of shape {:?} with {} task ids",
            x0.shape(),
            tasks.len()
        )));
    }
    let (t, eps) = draw_noise(x0.shape(), dist, rng);
    let z_t = interpolate_batch(x0, &eps, &t)?;
    let target = target_velocity(x0, &eps)?;
    let z = g.constant(z_t);
    let pred = model.velocity(g, z, &t, tasks)?;
    let u = g.constant(target.clone());
    let loss = g.mse(pred, u)?;
    Ok(CfmDraw {
        loss,
        t,
        eps,
        target,
    })
}

/// Evaluates the velocity on a fresh graph.
pub fn eval_velocity<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    z: &Tensor<T>,
    t: &[f64],
    tasks: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let v = model.velocity(&mut g, zv, t, tasks)?;
    g.check()?;
    Ok(g.value(v).clone())
}

/// Explicit Euler from `t = 1` to `t = 0` in `steps` equal steps starting at
/// `z1`. Elements flagged in `frozen` (one flag per element of a single
/// sample, repeated over the batch) are never updated.
pub fn euler_integrate<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    z1: Tensor<T>,
    tasks: &[usize],
    steps: usize,
    frozen: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "sampler needs at least one step".into(),
        ));
    }
    let batch = z1.shape()[0];
    let per = z1.numel() / batch;
    if let Some(mask) = frozen {
        if mask.len() != per {
            return Err(Error::shape("euler_integrate", &[per], &[mask.len()]));
        }
    }
    let dt = 1.0 / steps as f64;
    let dt_t = T::from_f64(dt);
    let mut z = z1;
    for k in (1..=steps).rev() {
        let t = k as f64 * dt;
        let v = eval_velocity(model, &z, &vec![t; batch], tasks).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::Divergence {
                step: steps - k,
                what: format!("non-finite velocity from `{op}`"),
            },
            other => other,
        })?;
        if v.shape() != z.shape() {
            return Err(Error::shape("euler_integrate", z.shape(), v.shape()));
        }
        for (i, (zi, &vi)) in z.data_mut().iter_mut().zip(v.data()).enumerate() {
            if frozen.is_some_and(|m| m[i % per]) {
                continue;
            }
            *zi = *zi - dt_t * vi;
        }
        if !z.is_finite() {
            return Err(Error::Divergence {
                step: steps - k,
                what: "non-finite latent".into(),
            });
        }
    }
    Ok(z)
}

/// Text-to-sequence sampling: integrates seeded noise of `shape` to `t = 0`.
pub fn euler_sample<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    shape: &[usize],
    tasks: &[usize],
    config: &SamplerConfig,
) -> Result<Tensor<T>> {
    let z1 = initial_noise(shape, config.seed);
    euler_integrate(model, z1, tasks, config.steps, None)
}
