use rand::Rng;

use super::{ModelConfig, ParamStore, RopeRotation};
use crate::dit::params::BoundParams;
use crate::error::{Error, Result};
use crate::lora::{lora_linear, LoraApplication};
use crate::numerics::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    /// Noised image token (`z`).
    Image,
    /// Clean image-condition token (`c_I`).
    Condition,
    /// Task-label token (`c_T`).
    Text,
}

/// Per-token grid positions and segment tags of one sample's sequence
/// `[image tokens; text tokens]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub positions: Vec<(usize, usize)>,
    pub segments: Vec<Segment>,
    pub image_tokens: usize,
    pub text_tokens: usize,
}

impl TokenLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (_, cols) = config.token_grid();
        let n = config.image_tokens();
        let m = config.text_tokens;
        let mut positions: Vec<(usize, usize)> = (0..n).map(|k| (k / cols, k % cols)).collect();
        positions.extend(std::iter::repeat_n((0, 0), m));
        let mut segments = vec![Segment::Image; n];
        segments.extend(std::iter::repeat_n(Segment::Text, m));
        Self {
            positions,
            segments,
            image_tokens: n,
            text_tokens: m,
        }
    }

    /// Marks the image tokens flagged in `mask` as clean condition tokens.
    pub fn with_condition(mut self, mask: &[bool]) -> Self {
        for (seg, &m) in self.segments.iter_mut().zip(mask) {
            if m {
                *seg = Segment::Condition;
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Sinusoidal features of `1000 t`: `[cos(1000 t f_k)..., sin(1000 t f_k)...]`
/// with `f_k = 10000^(-k / (dim/2))`.
pub fn timestep_features<T: Real>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = |k: usize| 1000.0 * ti * (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        data.extend((0..half).map(|k| T::from_f64(arg(k).cos())));
        data.extend((0..half).map(|k| T::from_f64(arg(k).sin())));
    }
    Tensor::new(vec![t.len(), dim], data).expect("timestep feature shape")
}

/// `[B, C, H, W]` grid image to `[B, N, C*p*p]` patches in row-major patch order.
pub fn patchify<T: Real>(g: &mut Graph<T>, image: Var, config: &ModelConfig) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    let b = check_image(&shape, config)?;
    let p = config.patch_size;
    let (th, tw) = config.token_grid();
    let x = g.reshape(image, &[b, config.channels, th, p, tw, p])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[b, th * tw, config.patch_dim()])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(g: &mut Graph<T>, patches: Var, config: &ModelConfig) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    let (th, tw) = config.token_grid();
    if shape.len() != 3 || shape[1] != th * tw || shape[2] != config.patch_dim() {
        return Err(Error::shape(
            "unpatchify",
            &shape,
            &[0, th * tw, config.patch_dim()],
        ));
    }
    let (b, p, c) = (shape[0], config.patch_size, config.channels);
    let x = g.reshape(patches, &[b, th, tw, c, p, p])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(x, &[b, c, th * p, tw * p])
}

pub fn patchify_tensor<T: Real>(image: &Tensor<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let y = patchify(&mut g, x, config)?;
    Ok(g.value(y).clone())
}

pub fn unpatchify_tensor<T: Real>(patches: &Tensor<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let y = unpatchify(&mut g, x, config)?;
    Ok(g.value(y).clone())
}

fn check_image(shape: &[usize], config: &ModelConfig) -> Result<usize> {
    let want = config.image_shape(shape.first().copied().unwrap_or(0));
    if shape.len() != 4 || shape[1..] != want[1..] || shape[0] == 0 {
        return Err(Error::Config(format!(
            "grid image shape {shape:?} does not match config {:?} (H = rows*f, W = cols*f)",
            &want[1..]
        )));
    }
    if !config.frame_size.is_multiple_of(config.patch_size) {
        return Err(Error::Config(
            "frame_size not divisible by patch_size".into(),
        ));
    }
    Ok(shape[0])
}

/// Parameters and optional adapters visible to one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub params: &'a BoundParams,
    pub lora: Option<&'a LoraApplication>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a BoundParams, lora: Option<&'a LoraApplication>) -> Self {
        Self { params, lora }
    }

    /// `x: [rows, in]` through `<prefix>.weight` / `<prefix>.bias`, plus the
    /// adapter on `<prefix>.weight` when one is bound.
    pub fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let wname = format!("{prefix}.weight");
        let weight = self.params.get(&wname)?;
        let bias = self.params.get(&format!("{prefix}.bias")).ok();
        let adapter = self
            .lora
            .and_then(|l| l.bound.adapters.get(&wname).map(|a| (a, &l.weights)));
        lora_linear(g, x, weight, bias, adapter)
    }
}

fn init_linear<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    out: usize,
    inp: usize,
    zero: bool,
    rng: &mut R,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(vec![out, inp])
    } else {
        Tensor::randn(vec![out, inp], (1.0 / inp as f64).sqrt(), rng)
    };
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![out]))
}

/// The miniature diffusion transformer. Holds only hyperparameters; weights
/// live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiT {
    pub config: ModelConfig,
}

impl DiT {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// adaLN-zero initialization: every modulation projection and the output
    /// head start at zero, so blocks are identities and the velocity is 0.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let c = &self.config;
        let d = c.embed_dim;
        let hidden = c.mlp_ratio * d;
        let mut s = ParamStore::new();
        init_linear(&mut s, "patch_embed", d, c.patch_dim(), false, rng)?;
        s.insert(
            "text_embed.weight",
            Tensor::randn(vec![c.task_vocab * c.text_tokens, d], 1.0, rng),
        )?;
        init_linear(&mut s, "time_embed.fc1", d, d, false, rng)?;
        init_linear(&mut s, "time_embed.fc2", d, d, false, rng)?;
        for i in 0..c.depth {
            let p = format!("blocks.{i}");
            init_linear(&mut s, &format!("{p}.adaln"), 6 * d, d, true, rng)?;
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut s, &format!("{p}.attn.{proj}"), d, d, false, rng)?;
            }
            init_linear(&mut s, &format!("{p}.mlp.fc1"), hidden, d, false, rng)?;
            init_linear(&mut s, &format!("{p}.mlp.fc2"), d, hidden, false, rng)?;
        }
        init_linear(&mut s, "final.adaln", 2 * d, d, true, rng)?;
        init_linear(&mut s, "final.linear", c.patch_dim(), d, true, rng)?;
        Ok(s)
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(&self.config)
    }

    /// Sinusoid of `1000 t` through a two-layer SiLU MLP: `[B, d]`.
    pub fn timestep_embed<T: Real>(&self, g: &mut Graph<T>, ctx: Ctx, t: &[f64]) -> Result<Var> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!(
                "timestep {bad} outside [0, 1]"
            )));
        }
        let feats = g.constant(timestep_features(t, self.config.embed_dim));
        let h = ctx.linear(g, feats, "time_embed.fc1")?;
        let h = g.silu(h);
        ctx.linear(g, h, "time_embed.fc2")
    }

    /// Patch-embedded image tokens followed by the task-label tokens:
    /// `[B, N + M, d]`.
    pub fn embed_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: Ctx,
        image: Var,
        tasks: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let d = c.embed_dim;
        let patches = patchify(g, image, c)?;
        let b = g.shape(patches)[0];
        if tasks.len() != b {
            return Err(Error::shape("embed_tokens", &[b], &[tasks.len()]));
        }
        if let Some(&bad) = tasks.iter().find(|&&t| t >= c.task_vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab: c.task_vocab,
            });
        }
        let n = c.image_tokens();
        let flat = g.reshape(patches, &[b * n, c.patch_dim()])?;
        let img = ctx.linear(g, flat, "patch_embed")?;
        let img = g.reshape(img, &[b, n, d])?;
        let ids: Vec<usize> = tasks
            .iter()
            .flat_map(|&t| (0..c.text_tokens).map(move |m| t * c.text_tokens + m))
            .collect();
        let table = ctx.params.get("text_embed.weight")?;
        let txt = g.gather(table, &ids)?;
        let txt = g.reshape(txt, &[b, c.text_tokens, d])?;
        g.concat(&[img, txt], 1)
    }

    /// Velocity prediction for the noised grid image `z_t: [B, C, H, W]`.
    /// Output has the same shape as `z_t`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: Ctx,
        z_t: Var,
        t: &[f64],
        tasks: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let d = c.embed_dim;
        let b = check_image(g.shape(z_t), c)?;
        if t.len() != b {
            return Err(Error::shape("forward", &[b], &[t.len()]));
        }
        if let Some(l) = ctx.lora {
            if l.weights.batch() != b {
                return Err(Error::shape("forward", &[b], &[l.weights.batch()]));
            }
        }
        let layout = self.layout();
        let len = layout.len();
        let rope = RopeRotation::<T>::new(&layout.positions, c.head_dim(), c.rope_base);

        let temb = self.timestep_embed(g, ctx, t)?;
        let cond = g.silu(temb);
        let tokens = self.embed_tokens(g, ctx, z_t, tasks)?;
        let mut x = g.reshape(tokens, &[b * len, d])?;
        for i in 0..c.depth {
            x = self.block(g, ctx, &format!("blocks.{i}"), x, cond, b, &rope)?;
        }

        let m = ctx.linear(g, cond, "final.adaln")?;
        let shift = broadcast_chunk(g, m, 0, d, b, len)?;
        let scale = broadcast_chunk(g, m, 1, d, b, len)?;
        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(g, h, shift, scale)?;
        let out = ctx.linear(g, h, "final.linear")?;
        let out = g.reshape(out, &[b, len, c.patch_dim()])?;
        let out = g.slice(out, 1, 0, c.image_tokens())?;
        unpatchify(g, out, c)
    }

    /// `x + g1 * MMA(mod(LN(x))) ; x + g2 * MLP(mod(LN(x)))` with shift, scale and
    /// gate projected from the conditioning vector. `x: [B*L, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: Ctx,
        prefix: &str,
        x: Var,
        cond: Var,
        batch: usize,
        rope: &RopeRotation<T>,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let len = g.shape(x)[0] / batch;
        let m = ctx.linear(g, cond, &format!("{prefix}.adaln"))?;
        let chunk = |g: &mut Graph<T>, i| broadcast_chunk(g, m, i, d, batch, len);
        let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(g, h, shift1, scale1)?;
        let a = self.attention(g, ctx, &format!("{prefix}.attn"), h, batch, rope)?;
        let a = g.mul(a, gate1)?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(g, h, shift2, scale2)?;
        let h = ctx.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h);
        let h = ctx.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        let h = g.mul(h, gate2)?;
        g.add(x, h)
    }

    /// Bidirectional multi-head attention over the whole sequence. Queries and
    /// keys are rotated by position; values are not. `h: [B*L, d]`.
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: Ctx,
        prefix: &str,
        h: Var,
        batch: usize,
        rope: &RopeRotation<T>,
    ) -> Result<Var> {
        mma(g, ctx, prefix, h, batch, self.config.heads, rope)
    }
}

/// Multi-modal attention with explicit head count; see [`DiT::attention`].
pub fn mma<T: Real>(
    g: &mut Graph<T>,
    ctx: Ctx,
    prefix: &str,
    h: Var,
    batch: usize,
    heads: usize,
    rope: &RopeRotation<T>,
) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    let d = shape[1];
    let len = shape[0] / batch;
    let dh = d / heads;
    let split = |g: &mut Graph<T>, v: Var, rotate: bool| -> Result<Var> {
        let v = g.reshape(v, &[batch, len, heads, dh])?;
        let v = if rotate {
            g.rope(v, &rope.cos, &rope.sin)?
        } else {
            v
        };
        g.permute(v, &[0, 2, 1, 3])
    };
    let q = ctx.linear(g, h, &format!("{prefix}.q"))?;
    let k = ctx.linear(g, h, &format!("{prefix}.k"))?;
    let v = ctx.linear(g, h, &format!("{prefix}.v"))?;
    let q = split(g, q, true)?;
    let k = split(g, k, true)?;
    let v = split(g, v, false)?;
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax(scores, 3)?;
    let out = g.matmul(attn, v, false, false)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[batch * len, d])?;
    ctx.linear(g, out, &format!("{prefix}.o"))
}

/// Columns `[i*d, (i+1)*d)` of `m: [B, k*d]`, repeated over `len` tokens: `[B*len, d]`.
fn broadcast_chunk<T: Real>(
    g: &mut Graph<T>,
    m: Var,
    i: usize,
    d: usize,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let c = g.slice(m, 1, i * d, d)?;
    let c = g.reshape(c, &[batch, 1, d])?;
    let c = g.expand(c, &[batch, len, d])?;
    g.reshape(c, &[batch * len, d])
}

/// `h * (1 + scale) + shift`.
fn modulate<T: Real>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let hs = g.mul(h, scale)?;
    let h = g.add(h, hs)?;
    g.add(h, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_tokens_sit_at_origin() {
        let layout = TokenLayout::new(&ModelConfig::default());
        assert_eq!(layout.len(), 65);
        assert_eq!(layout.positions[64], (0, 0));
        assert_eq!(layout.segments[64], Segment::Text);
        assert_eq!(layout.positions[9], (1, 1));
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let config = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f32>::randn(config.image_shape(2).to_vec(), 1.0, &mut rng);
        let p = patchify_tensor(&img, &config).unwrap();
        assert_eq!(p.shape(), &[2, 64, 16]);
        assert_eq!(unpatchify_tensor(&p, &config).unwrap(), img);
    }

    #[test]
    fn patch_contents_follow_grid_coordinates() {
        let config = ModelConfig::default();
        let shape = config.image_shape(1);
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|i| i as f64)
            .collect();
        let img = Tensor::<f64>::new(shape.to_vec(), data).unwrap();
        let p = patchify_tensor(&img, &config).unwrap();
        // token (1, 2) covers rows 4..8, cols 8..12 of the 32x32 image
        let tok = 8 + 2;
        assert_eq!(p.at(&[0, tok, 0]), (4 * 32 + 8) as f64);
        assert_eq!(p.at(&[0, tok, 5]), (5 * 32 + 9) as f64);
    }

    #[test]
    fn rejects_mismatched_image() {
        let config = ModelConfig::default();
        let img = Tensor::<f32>::zeros(vec![1, 1, 30, 32]);
        assert!(matches!(
            patchify_tensor(&img, &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_init_predicts_zero_velocity() {
        let dit = DiT::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = dit.init_params::<f32, _>(&mut rng).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let z = g.constant(Tensor::randn(
            dit.config.image_shape(2).to_vec(),
            1.0,
            &mut rng,
        ));
        let v = dit
            .forward(&mut g, Ctx::new(&bound, None), z, &[0.3, 0.9], &[0, 2])
            .unwrap();
        assert_eq!(g.shape(v), &[2, 1, 32, 32]);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_task_is_a_vocabulary_error() {
        let dit = DiT::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = dit.init_params::<f32, _>(&mut rng).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let z = g.constant(Tensor::zeros(dit.config.image_shape(1).to_vec()));
        let err = dit
            .forward(&mut g, Ctx::new(&bound, None), z, &[0.5], &[3])
            .unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 3, vocab: 3 }));
    }
}
