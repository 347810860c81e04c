//! Asymmetric low-rank adaptation.
//!
//! One shared down-projection `A` (rank x in) per target weight and one
//! up-projection `B_i` (out x rank) per task. The effective weight is
//! `W0 + sum_i w_i * B_i * A`. Weights are stored `[out, in]` and applied as
//! `y = x * W^T`, so the low-rank path is `((x * A^T) * B_i^T)`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AsymLora<T> {
    pub target: String,
    /// Shared `[rank, in]`.
    pub a: Tensor<T>,
    /// One `[out, rank]` matrix per task.
    pub b: Vec<Tensor<T>>,
}

impl<T: Real> AsymLora<T> {
    pub fn new(target: impl Into<String>, a: Tensor<T>, b: Vec<Tensor<T>>) -> Result<Self> {
        let target = target.into();
        if a.rank() != 2 || b.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "adapter `{target}` needs a 2-D A and at least one B"
            )));
        }
        for bi in &b {
            if bi.rank() != 2 || bi.shape()[1] != a.shape()[0] || bi.shape() != b[0].shape() {
                return Err(Error::shape("lora", a.shape(), bi.shape()));
            }
        }
        Ok(Self { target, a, b })
    }

    /// `A ~ N(0, 1/rank)`, every `B_i = 0`.
    pub fn init<R: Rng + ?Sized>(
        target: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        tasks: usize,
        rng: &mut R,
    ) -> Self {
        let a = Tensor::randn(vec![rank, in_dim], (1.0 / rank as f64).sqrt(), rng);
        let b = (0..tasks)
            .map(|_| Tensor::zeros(vec![out_dim, rank]))
            .collect();
        Self {
            target: target.into(),
            a,
            b,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b[0].shape()[0]
    }

    pub fn tasks(&self) -> usize {
        self.b.len()
    }

    fn check_omega(&self, omega: &[f64]) -> Result<()> {
        if omega.len() != self.b.len() {
            return Err(Error::InvalidArgument(format!(
                "adapter `{}` has {} task matrices but {} weights were given",
                self.target,
                self.b.len(),
                omega.len()
            )));
        }
        Ok(())
    }

    /// `sum_i w_i * B_i * A`. Terms with zero weight are skipped entirely.
    pub fn delta(&self, omega: &[f64]) -> Result<Tensor<T>> {
        self.check_omega(omega)?;
        let mut out = Tensor::zeros(vec![self.out_dim(), self.in_dim()]);
        for (bi, &w) in self.b.iter().zip(omega) {
            if w == 0.0 {
                continue;
            }
            let term = bi.matmul(&self.a)?.scale(T::from_f64(w));
            out = out.add(&term)?;
        }
        Ok(out)
    }

    /// `x * W0^T + sum_i w_i * (x * A^T) * B_i^T` without materializing the delta.
    pub fn apply_runtime(&self, x: &Tensor<T>, w0: &Tensor<T>, omega: &[f64]) -> Result<Tensor<T>> {
        self.check_omega(omega)?;
        if w0.shape() != [self.out_dim(), self.in_dim()] {
            return Err(Error::shape("apply_runtime", w0.shape(), self.a.shape()));
        }
        let mut y = x.matmul(&w0.transpose2()?)?;
        if omega.iter().all(|&w| w == 0.0) {
            return Ok(y);
        }
        let h = x.matmul(&self.a.transpose2()?)?;
        for (bi, &w) in self.b.iter().zip(omega) {
            if w == 0.0 {
                continue;
            }
            let term = h.scale(T::from_f64(w)).matmul(&bi.transpose2()?)?;
            y = y.add(&term)?;
        }
        Ok(y)
    }
}

/// Parameter-name patterns that receive adapters. A pattern such as
/// `attn.q` matches every weight named `<prefix>.attn.q.weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoraTargetSet {
    pub patterns: Vec<String>,
}

impl Default for LoraTargetSet {
    fn default() -> Self {
        Self {
            patterns: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl LoraTargetSet {
    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| {
            let full = format!("{p}.weight");
            name == full || name.ends_with(&format!(".{full}"))
        })
    }

    /// Matching weight names; errors on a pattern that matches nothing.
    pub fn resolve<T: Real>(&self, params: &ParamStore<T>) -> Result<Vec<String>> {
        for p in &self.patterns {
            let probe = LoraTargetSet {
                patterns: vec![p.clone()],
            };
            if !params.names().any(|n| probe.matches(n)) {
                return Err(Error::LoraTarget(p.clone()));
            }
        }
        Ok(params
            .names()
            .filter(|n| self.matches(n))
            .map(String::from)
            .collect())
    }
}

/// All adapters of one model, sharing rank and task list.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T> {
    pub rank: usize,
    pub tasks: Vec<String>,
    pub adapters: BTreeMap<String, AsymLora<T>>,
}

impl<T: Real> LoraSet<T> {
    pub fn init<R: Rng + ?Sized>(
        params: &ParamStore<T>,
        targets: &LoraTargetSet,
        tasks: &[String],
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || tasks.is_empty() {
            return Err(Error::Config(
                "LoRA rank and task list must be non-empty".into(),
            ));
        }
        let mut adapters = BTreeMap::new();
        for name in targets.resolve(params)? {
            let w = params.get(&name)?;
            if w.rank() != 2 {
                return Err(Error::LoraTarget(name));
            }
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let adapter = AsymLora::init(name.clone(), out, inp, rank, tasks.len(), rng);
            adapters.insert(name, adapter);
        }
        Ok(Self {
            rank,
            tasks: tasks.to_vec(),
            adapters,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.adapters
            .values()
            .map(|a| a.a.numel() + a.b.iter().map(Tensor::numel).sum::<usize>())
            .sum()
    }

    /// `W <- W0 + sum_i w_i B_i A` for every adapter target.
    pub fn merge(&self, params: &ParamStore<T>, omega: &[f64]) -> Result<ParamStore<T>> {
        let mut merged = params.clone();
        for (name, adapter) in &self.adapters {
            let w0 = params
                .get(name)
                .map_err(|_| Error::LoraTarget(name.clone()))?;
            if w0.shape() != [adapter.out_dim(), adapter.in_dim()] {
                return Err(Error::shape("merge", w0.shape(), adapter.a.shape()));
            }
            if omega.iter().all(|&w| w == 0.0) {
                adapter.check_omega(omega)?;
                continue;
            }
            let updated = w0.add(&adapter.delta(omega)?)?;
            merged.replace(name, updated)?;
        }
        Ok(merged)
    }

    /// Flat tensor view used by checkpoints: `lora.<target>.A`, `lora.<target>.B.<i>`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, a) in &self.adapters {
            out.push((format!("lora.{name}.A"), &a.a));
            for (i, b) in a.b.iter().enumerate() {
                out.push((format!("lora.{name}.B.{i}"), b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, a) in self.adapters.iter_mut() {
            out.push((format!("lora.{name}.A"), &mut a.a));
            for (i, b) in a.b.iter_mut().enumerate() {
                out.push((format!("lora.{name}.B.{i}"), b));
            }
        }
        out
    }

    /// Inverse of [`LoraSet::named_tensors`].
    pub fn from_named(
        rank: usize,
        tasks: Vec<String>,
        targets: &[String],
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let missing = |n: &str| Error::InvalidArgument(format!("missing adapter tensor `{n}`"));
        let mut adapters = BTreeMap::new();
        for target in targets {
            let a_name = format!("lora.{target}.A");
            let a = lookup(&a_name).ok_or_else(|| missing(&a_name))?;
            let b = (0..tasks.len())
                .map(|i| {
                    let n = format!("lora.{target}.B.{i}");
                    lookup(&n).ok_or_else(|| missing(&n))
                })
                .collect::<Result<Vec<_>>>()?;
            let adapter = AsymLora::new(target.clone(), a, b)?;
            if adapter.rank() != rank {
                return Err(Error::InvalidArgument(format!(
                    "adapter `{target}` has rank {} but header says {rank}",
                    adapter.rank()
                )));
            }
            adapters.insert(target.clone(), adapter);
        }
        Ok(Self {
            rank,
            tasks,
            adapters,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLora {
        let adapters = self
            .adapters
            .iter()
            .map(|(name, a)| {
                let av = g.leaf(a.a.clone(), trainable);
                let bv = a.b.iter().map(|b| g.leaf(b.clone(), trainable)).collect();
                (name.clone(), BoundAdapter { a: av, b: bv })
            })
            .collect();
        BoundLora { adapters }
    }
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub a: Var,
    pub b: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct BoundLora {
    pub adapters: HashMap<String, BoundAdapter>,
}

/// Per-sample combination weights: row `s` holds the task weights used for
/// every token of sample `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    rows: Vec<Vec<f64>>,
}

impl TaskWeights {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(
                "ragged or empty task weights".into(),
            ));
        }
        Ok(Self { rows })
    }

    /// Training routing: sample `s` uses only `B_{tasks[s]}`.
    pub fn one_hot(tasks: &[usize], n_tasks: usize) -> Result<Self> {
        let rows = tasks
            .iter()
            .map(|&t| {
                if t >= n_tasks {
                    return Err(Error::Vocabulary {
                        id: t,
                        vocab: n_tasks,
                    });
                }
                let mut r = vec![0.0; n_tasks];
                r[t] = 1.0;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// The same weights for every sample.
    pub fn uniform(omega: &[f64], batch: usize) -> Result<Self> {
        Self::new(vec![omega.to_vec(); batch])
    }

    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    pub fn tasks(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Bound adapters plus the routing used for the current forward pass.
#[derive(Clone, Debug)]
pub struct LoraApplication {
    pub bound: BoundLora,
    pub weights: TaskWeights,
}

/// `y = x * W^T (+ b) + sum_i (w_i ⊙ (x * A^T)) * B_i^T` for `x: [rows, in]`,
/// where rows are grouped contiguously by sample. Tasks whose weight column is
/// entirely zero contribute nothing and receive no gradient.
pub fn lora_linear<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    adapter: Option<(&BoundAdapter, &TaskWeights)>,
) -> Result<Var> {
    let mut y = g.matmul(x, weight, false, true)?;
    if let Some(b) = bias {
        let shape = g.shape(y).to_vec();
        let width = *shape.last().unwrap();
        let b2 = g.reshape(b, &[1, width])?;
        let be = g.expand(b2, &shape)?;
        y = g.add(y, be)?;
    }
    let Some((adapter, weights)) = adapter else {
        return Ok(y);
    };
    if adapter.b.len() != weights.tasks() {
        return Err(Error::InvalidArgument(format!(
            "{} task weights for an adapter with {} task matrices",
            weights.tasks(),
            adapter.b.len()
        )));
    }
    let rows = g.shape(x)[0];
    let batch = weights.batch();
    if !rows.is_multiple_of(batch) {
        return Err(Error::shape("lora_linear", &[rows], &[batch]));
    }
    let per = rows / batch;
    let h = g.matmul(x, adapter.a, false, true)?;
    let rank = g.shape(h)[1];
    for (i, &b) in adapter.b.iter().enumerate() {
        let column: Vec<f64> = weights.rows().iter().map(|r| r[i]).collect();
        if column.iter().all(|&w| w == 0.0) {
            continue;
        }
        let hi = if column.iter().all(|&w| w == 1.0) {
            h
        } else {
            let data: Vec<T> = column
                .iter()
                .flat_map(|&w| std::iter::repeat_n(T::from_f64(w), per))
                .collect();
            let col = g.constant(Tensor::new(vec![rows, 1], data)?);
            let col = g.expand(col, &[rows, rank])?;
            g.mul(h, col)?
        };
        let term = g.matmul(hi, b, false, true)?;
        y = g.add(y, term)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn hand_outer_product() {
        let ad = AsymLora::new("w", t(&[1, 2], &[0., 2.]), vec![t(&[2, 1], &[1., 0.])]).unwrap();
        assert_eq!(ad.delta(&[3.0]).unwrap().data(), &[0., 6., 0., 0.]);
    }

    #[test]
    fn zero_weights_and_zero_init_give_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = AsymLora::<f64>::init("w", 5, 3, 2, 3, &mut rng);
        assert!(ad
            .delta(&[1.0, 1.0, 1.0])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut ad = ad;
        ad.b[1] = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        assert!(ad
            .delta(&[0.0; 3])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn omega_length_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = AsymLora::<f64>::init("w", 2, 2, 1, 2, &mut rng);
        assert!(ad.delta(&[1.0]).is_err());
    }

    #[test]
    fn routing_rejects_out_of_range_task() {
        assert!(matches!(
            TaskWeights::one_hot(&[0, 3], 3),
            Err(Error::Vocabulary { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn target_patterns() {
        let set = LoraTargetSet::default();
        assert!(set.matches("blocks.0.attn.q.weight"));
        assert!(!set.matches("blocks.0.attn.q.bias"));
        assert!(!set.matches("blocks.0.adaln.weight"));
        let mut params = ParamStore::<f32>::new();
        params
            .insert("blocks.0.attn.q.weight", Tensor::zeros(vec![2, 2]))
            .unwrap();
        let bad = LoraTargetSet {
            patterns: vec!["attn.q".into(), "attn.z".into()],
        };
        assert!(matches!(bad.resolve(&params), Err(Error::LoraTarget(p)) if p == "attn.z"));
    }
}
