//! Tail-frame conditioning: the last serpentine cell holds the clean
//! (unnoised) target frame at its own grid positions, the loss ignores it and
//! the sampler never moves it.

use rand::Rng;

use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{
    draw_noise, euler_integrate, initial_noise, target_velocity, CfmDraw, SamplerConfig,
    TimeDistribution, VelocityField,
};
use crate::layout::{
    compose, decompose, stack_grids, to_model_space, to_pixel_space, SerpentineOrder,
};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Which tokens, and which pixels of one `[C, H, W]` sample, are clean
/// condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    pub cell: (usize, usize),
    /// One flag per image token, row-major over the token grid.
    pub tokens: Vec<bool>,
    /// One flag per element of a `[C, H, W]` sample.
    pub pixels: Vec<bool>,
}

impl ConditionMask {
    pub fn condition_pixels(&self) -> usize {
        self.pixels.iter().filter(|&&m| m).count()
    }
}

/// Marks the cell holding the last serpentine frame.
pub fn build_condition_mask(config: &ModelConfig) -> Result<ConditionMask> {
    config.validate()?;
    let order = SerpentineOrder::for_config(config)?;
    let cell = order.last();
    let (_, tcols) = config.token_grid();
    let n = config.cell_tokens();
    let tokens = (0..config.image_tokens())
        .map(|k| (k / tcols / n, k % tcols / n) == cell)
        .collect();
    let (h, w, f) = (
        config.image_height(),
        config.image_width(),
        config.frame_size,
    );
    let plane: Vec<bool> = (0..h * w).map(|k| (k / w / f, k % w / f) == cell).collect();
    let pixels = plane.repeat(config.channels);
    Ok(ConditionMask {
        cell,
        tokens,
        pixels,
    })
}

fn check_mask<T: Real>(x: &Tensor<T>, mask: &ConditionMask) -> Result<usize> {
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch == 0 || x.numel() != batch * mask.pixels.len() {
        return Err(Error::shape(
            "condition mask",
            x.shape(),
            &[mask.pixels.len()],
        ));
    }
    Ok(mask.pixels.len())
}

/// Per-sample noising that leaves condition elements exactly at `x0`.
pub fn masked_noising<T: Real>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: &[f64],
    mask: &ConditionMask,
) -> Result<Tensor<T>> {
    let per = check_mask(x0, mask)?;
    let mut z = crate::flow::interpolate_batch(x0, eps, t)?;
    for (i, (zi, &xi)) in z.data_mut().iter_mut().zip(x0.data()).enumerate() {
        if mask.pixels[i % per] {
            *zi = xi;
        }
    }
    Ok(z)
}

/// Mean squared error over non-condition elements only.
pub fn masked_mse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &ConditionMask,
) -> Result<Var> {
    let per = check_mask(target, mask)?;
    let keep: Vec<T> = (0..target.numel())
        .map(|i| {
            if mask.pixels[i % per] {
                T::zero()
            } else {
                T::one()
            }
        })
        .collect();
    let count = keep.iter().filter(|&&k| k == T::one()).count();
    if count == 0 {
        return Err(Error::InvalidArgument("mask covers every element".into()));
    }
    let keep = g.constant(Tensor::new(target.shape().to_vec(), keep)?);
    let u = g.constant(target.clone());
    let diff = g.sub(pred, u)?;
    let diff = g.mul(diff, keep)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, T::from_f64(1.0 / count as f64)))
}

/// Flow-matching loss with the condition cell left clean and excluded from
/// the average.
pub fn recraft_loss<T: Real, M: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &M,
    x0: &Tensor<T>,
    tasks: &[usize],
    mask: &ConditionMask,
    dist: TimeDistribution,
    rng: &mut R,
) -> Result<CfmDraw<T>> {
    check_mask(x0, mask)?;
    if tasks.len() != x0.shape()[0] {
        return Err(Error::shape(
            "recraft_loss",
            &[x0.shape()[0]],
            &[tasks.len()],
        ));
    }
    let (t, eps) = draw_noise(x0.shape(), dist, rng);
    let z_t = masked_noising(x0, &eps, &t, mask)?;
    let target = target_velocity(x0, &eps)?;
    let z = g.constant(z_t);
    let pred = model.velocity(g, z, &t, tasks)?;
    let loss = masked_mse(g, pred, &target, mask)?;
    Ok(CfmDraw {
        loss,
        t,
        eps,
        target,
    })
}

/// Grid image in model space with `tail` (pixel space `[f, f]`) in the
/// condition cell and zeros elsewhere.
pub fn condition_image<T: Real>(tail: &Tensor<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    let f = config.frame_size;
    if tail.shape() != [f, f] {
        return Err(Error::shape("condition_image", &[f, f], tail.shape()));
    }
    let order = SerpentineOrder::for_config(config)?;
    let mut frames = vec![Tensor::zeros(vec![f, f]); order.len()];
    *frames.last_mut().expect("non-empty order") = to_model_space(tail);
    compose(&frames, &order)
}

/// Sequences ending in the given tail frames: returns, per sample, the
/// frames in serpentine order as 8-bit pixel levels. The last frame of each
/// sequence is the condition itself.
pub fn recraft_sample<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    config: &ModelConfig,
    tails: &[Tensor<T>],
    tasks: &[usize],
    sampler: &SamplerConfig,
) -> Result<Vec<Vec<Tensor<T>>>> {
    if tails.is_empty() || tails.len() != tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tail frames for {} task ids",
            tails.len(),
            tasks.len()
        )));
    }
    let z = recraft_latents(model, config, tails, tasks, sampler)?;
    let order = SerpentineOrder::for_config(config)?;
    let per = config.image_height() * config.image_width();
    (0..tails.len())
        .map(|b| {
            let grid = z
                .slice(0, b, 1)?
                .reshape(vec![config.image_height(), config.image_width()])?;
            debug_assert_eq!(grid.numel(), per);
            decompose(&to_pixel_space(&grid), &order)
        })
        .collect()
}

/// The final latents of [`recraft_sample`], in model space `[B, 1, H, W]`.
pub fn recraft_latents<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    config: &ModelConfig,
    tails: &[Tensor<T>],
    tasks: &[usize],
    sampler: &SamplerConfig,
) -> Result<Tensor<T>> {
    if config.channels != 1 {
        return Err(Error::Config(
            "conditioning expects single-channel frames".into(),
        ));
    }
    let mask = build_condition_mask(config)?;
    let cond = tails
        .iter()
        .map(|t| condition_image(t, config))
        .collect::<Result<Vec<_>>>()?;
    let cond = stack_grids(&cond)?;
    let noise: Tensor<T> = initial_noise(cond.shape(), sampler.seed);
    let per = mask.pixels.len();
    let data = noise
        .data()
        .iter()
        .zip(cond.data())
        .enumerate()
        .map(|(i, (&n, &c))| if mask.pixels[i % per] { c } else { n })
        .collect();
    let z1 = Tensor::new(cond.shape().to_vec(), data)?;
    euler_integrate(model, z1, tasks, sampler.steps, Some(&mask.pixels))
}
