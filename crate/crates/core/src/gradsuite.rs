//! Finite-difference checks of every tape operation and of both training
//! objectives on a small perturbed model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::{patchify, unpatchify, BoundParams, Ctx, DiT, ModelConfig, RopeRotation};
use crate::error::Result;
use crate::flow::{cfm_loss, TimeDistribution};
use crate::lora::{
    lora_linear, BoundAdapter, BoundLora, LoraApplication, LoraSet, LoraTargetSet, TaskWeights,
};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::recraft::{build_condition_mask, recraft_loss};

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// `sum(y * w)` with a fixed random `w`, so every output element carries a
/// distinct weight.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case<F>(name: &str, params: Vec<Tensor<f64>>, opts: &GradCheckOptions, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(GradCase {
        name: name.to_string(),
        report: grad_check(&params, |g, p| f(g, p), opts)?,
    })
}

/// One check per differentiable operation of [`Graph`], plus the composite
/// adapter projection and patch (un)folding.
pub fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);
    let opts = GradCheckOptions {
        coords_per_param: None,
        seed,
        ..GradCheckOptions::default()
    };
    let (a, b) = (randn(&[3, 4]), randn(&[3, 4]));
    let cube = randn(&[2, 3, 4]);
    let positive = randn(&[3, 4]).map(|v| v.abs() + 0.5);
    let mut out = vec![
        case("add", vec![a.clone(), b.clone()], &opts, |g, p| {
            let y = g.add(p[0], p[1])?;
            readout(g, y)
        })?,
        case("sub", vec![a.clone(), b.clone()], &opts, |g, p| {
            let y = g.sub(p[0], p[1])?;
            readout(g, y)
        })?,
        case("mul", vec![a.clone(), b.clone()], &opts, |g, p| {
            let y = g.mul(p[0], p[1])?;
            readout(g, y)
        })?,
        case("scale", vec![a.clone()], &opts, |g, p| {
            let y = g.scale(p[0], -1.7);
            readout(g, y)
        })?,
        case("add_scalar", vec![a.clone()], &opts, |g, p| {
            let y = g.add_scalar(p[0], 0.3);
            readout(g, y)
        })?,
        case("ln", vec![positive], &opts, |g, p| {
            let y = g.ln(p[0]);
            readout(g, y)
        })?,
        case("gelu", vec![a.clone()], &opts, |g, p| {
            let y = g.gelu(p[0]);
            readout(g, y)
        })?,
        case("silu", vec![a.clone()], &opts, |g, p| {
            let y = g.silu(p[0]);
            readout(g, y)
        })?,
        case("expand_rows", vec![randn(&[1, 4])], &opts, |g, p| {
            let y = g.expand(p[0], &[3, 4])?;
            readout(g, y)
        })?,
        case("expand_cols", vec![randn(&[3, 1])], &opts, |g, p| {
            let y = g.expand(p[0], &[3, 4])?;
            readout(g, y)
        })?,
        case("reshape", vec![cube.clone()], &opts, |g, p| {
            let y = g.reshape(p[0], &[6, 4])?;
            readout(g, y)
        })?,
        case("permute", vec![cube.clone()], &opts, |g, p| {
            let y = g.permute(p[0], &[2, 0, 1])?;
            readout(g, y)
        })?,
        case("transpose", vec![a.clone()], &opts, |g, p| {
            let y = g.transpose(p[0])?;
            readout(g, y)
        })?,
        case("slice", vec![cube.clone()], &opts, |g, p| {
            let y = g.slice(p[0], 1, 1, 2)?;
            readout(g, y)
        })?,
        case(
            "concat",
            vec![cube.clone(), randn(&[2, 1, 4])],
            &opts,
            |g, p| {
                let y = g.concat(&[p[0], p[1]], 1)?;
                readout(g, y)
            },
        )?,
        case("gather", vec![randn(&[5, 3])], &opts, |g, p| {
            let y = g.gather(p[0], &[4, 0, 4, 2])?;
            readout(g, y)
        })?,
        case("sum", vec![a.clone()], &opts, |g, p| Ok(g.sum(p[0])))?,
        case("mean", vec![a.clone()], &opts, |g, p| Ok(g.mean(p[0])))?,
        case("mse", vec![a.clone(), b.clone()], &opts, |g, p| {
            g.mse(p[0], p[1])
        })?,
        case("softmax_last", vec![cube.clone()], &opts, |g, p| {
            let y = g.softmax(p[0], 2)?;
            readout(g, y)
        })?,
        case("softmax_inner", vec![cube.clone()], &opts, |g, p| {
            let y = g.softmax(p[0], 1)?;
            readout(g, y)
        })?,
        case("layer_norm", vec![cube.clone()], &opts, |g, p| {
            let y = g.layer_norm(p[0], None, None, 1e-6)?;
            readout(g, y)
        })?,
        case(
            "layer_norm_affine",
            vec![cube.clone(), randn(&[4]), randn(&[4])],
            &opts,
            |g, p| {
                let y = g.layer_norm(p[0], Some(p[1]), Some(p[2]), 1e-6)?;
                readout(g, y)
            },
        )?,
    ];
    for (name, ta, tb) in [
        ("matmul_nn", false, false),
        ("matmul_nt", false, true),
        ("matmul_tn", true, false),
        ("matmul_tt", true, true),
    ] {
        let sa = if ta { [4, 3] } else { [3, 4] };
        let sb = if tb { [2, 4] } else { [4, 2] };
        out.push(case(name, vec![randn(&sa), randn(&sb)], &opts, |g, p| {
            let y = g.matmul(p[0], p[1], ta, tb)?;
            readout(g, y)
        })?);
    }

    let rope = RopeRotation::<f64>::new(&[(0, 0), (1, 2), (3, 1)], 8, 10_000.0);
    out.push(case("rope", vec![randn(&[2, 3, 2, 8])], &opts, |g, p| {
        let y = g.rope(p[0], &rope.cos, &rope.sin)?;
        readout(g, y)
    })?);

    let weights = TaskWeights::new(vec![vec![1.0, 0.5], vec![0.0, 2.0]])?;
    let lora_params = vec![
        randn(&[4, 5]),
        randn(&[3, 5]),
        randn(&[3]),
        randn(&[2, 5]),
        randn(&[3, 2]),
        randn(&[3, 2]),
    ];
    out.push(case("lora_linear", lora_params, &opts, |g, p| {
        let adapter = BoundAdapter {
            a: p[3],
            b: vec![p[4], p[5]],
        };
        let y = lora_linear(g, p[0], p[1], Some(p[2]), Some((&adapter, &weights)))?;
        readout(g, y)
    })?);

    let config = tiny_config();
    let image = randn(&config.image_shape(2));
    out.push(case("patchify", vec![image], &opts, |g, p| {
        let y = patchify(g, p[0], &config)?;
        readout(g, y)
    })?);
    let patches = randn(&[2, config.image_tokens(), config.patch_dim()]);
    out.push(case("unpatchify", vec![patches], &opts, |g, p| {
        let y = unpatchify(g, p[0], &config)?;
        readout(g, y)
    })?);
    Ok(out)
}

/// A two-task model small enough to check quickly.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 2,
        depth: 1,
        patch_size: 2,
        frame_size: 4,
        grid_rows: 2,
        grid_cols: 2,
        task_vocab: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

struct ToySetup {
    dit: DiT,
    names: Vec<String>,
    /// (target, task count) in the order adapter tensors follow the base.
    adapters: Vec<(String, usize)>,
    tensors: Vec<Tensor<f64>>,
    x0: Tensor<f64>,
    tasks: Vec<usize>,
}

/// Adds noise scaled to the fan-in, so activations stay O(1) at any width.
fn perturb(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let fan_in = if t.rank() == 2 { t.shape()[1] } else { 1 };
    let noise = Tensor::randn(t.shape().to_vec(), 0.15 / (fan_in as f64).sqrt(), rng);
    *t = t.add(&noise)?;
    Ok(())
}

/// Random `config` model with every weight perturbed away from its zero
/// initialization, plus a per-task adapter on all default targets and a
/// one-sample batch of the last task.
fn toy_setup(config: &ModelConfig, seed: u64) -> Result<ToySetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dit = DiT::new(config.clone())?;
    let mut params = dit.init_params::<f64, _>(&mut rng)?;
    for (_, t) in params.iter_mut() {
        perturb(t, &mut rng)?;
    }
    let n_tasks = config.task_vocab;
    let tasks: Vec<String> = (0..n_tasks).map(|i| format!("task{i}")).collect();
    let mut lora = LoraSet::init(&params, &LoraTargetSet::default(), &tasks, 2, &mut rng)?;
    for (_, t) in lora.named_tensors_mut() {
        perturb(t, &mut rng)?;
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    tensors.extend(lora.named_tensors().into_iter().map(|(_, t)| t.clone()));
    let adapters = lora
        .adapters
        .iter()
        .map(|(k, a)| (k.clone(), a.tasks()))
        .collect();
    let x0 = Tensor::randn(dit.config.image_shape(1).to_vec(), 0.5, &mut rng);
    Ok(ToySetup {
        dit,
        names,
        adapters,
        tensors,
        x0,
        tasks: vec![n_tasks - 1],
    })
}

impl ToySetup {
    fn bind(&self, vars: &[Var]) -> Result<(BoundParams, LoraApplication)> {
        let (base, rest) = vars.split_at(self.names.len());
        let bound = self
            .names
            .iter()
            .cloned()
            .zip(base.iter().copied())
            .collect();
        let mut rest = rest.iter().copied();
        let mut adapters = std::collections::HashMap::new();
        for (target, n) in &self.adapters {
            let a = rest.next().expect("adapter A var");
            let b = (0..*n)
                .map(|_| rest.next().expect("adapter B var"))
                .collect();
            adapters.insert(target.clone(), BoundAdapter { a, b });
        }
        let app = LoraApplication {
            bound: BoundLora { adapters },
            weights: TaskWeights::one_hot(&self.tasks, self.adapters[0].1)?,
        };
        Ok((bound, app))
    }
}

const LOSS_DIST: TimeDistribution = TimeDistribution::LogitNormal {
    mean: 0.0,
    std: 1.0,
};

/// Both objectives, differentiated through the whole model and adapter with
/// the noise draw held fixed.
pub fn loss_cases(config: &ModelConfig, seed: u64) -> Result<Vec<GradCase>> {
    let toy = toy_setup(config, seed)?;
    let mask = build_condition_mask(&toy.dit.config)?;
    let opts = GradCheckOptions {
        coords_per_param: Some(4),
        seed,
        ..GradCheckOptions::default()
    };
    let cfm = case("cfm_loss", toy.tensors.clone(), &opts, |g, p| {
        let (bound, app) = toy.bind(p)?;
        let field = |g: &mut Graph<f64>, z: Var, t: &[f64], tk: &[usize]| {
            toy.dit.forward(g, Ctx::new(&bound, Some(&app)), z, t, tk)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff);
        Ok(cfm_loss(g, &field, &toy.x0, &toy.tasks, LOSS_DIST, &mut rng)?.loss)
    })?;
    let recraft = case("recraft_loss", toy.tensors.clone(), &opts, |g, p| {
        let (bound, app) = toy.bind(p)?;
        let field = |g: &mut Graph<f64>, z: Var, t: &[f64], tk: &[usize]| {
            toy.dit.forward(g, Ctx::new(&bound, Some(&app)), z, t, tk)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff);
        Ok(recraft_loss(g, &field, &toy.x0, &toy.tasks, &mask, LOSS_DIST, &mut rng)?.loss)
    })?;
    Ok(vec![cfm, recraft])
}

/// Every operation check followed by both objectives.
pub fn run_all(config: &ModelConfig, seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_cases(seed)?;
    cases.extend(loss_cases(config, seed)?);
    Ok(cases)
}
