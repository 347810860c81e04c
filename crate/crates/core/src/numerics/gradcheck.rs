//! Central finite-difference gradient checking (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords_per_param: Some(8),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

/// Denominator floor of [`relative_error`]. A central difference with
/// `h = 1e-4` carries absolute error around `1e-10` (truncation plus
/// cancellation), so derivatives below the floor are held to an absolute
/// error of `1e-4 * RELATIVE_FLOOR`.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at sampled coordinates of every parameter.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new().with_finite_check(true);
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.check()?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new().with_finite_check(true);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, (param, &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(var);
        let n = param.numel();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c));
                report.worst_values = Some((analytic.data()[c], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let report = grad_check(
            &[w],
            |g, p| {
                let x = g.constant(x.clone());
                let y = g.mm(p[0], x)?;
                Ok(g.sum(y))
            },
            &GradCheckOptions {
                coords_per_param: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 2e-9) - 1e-9 / RELATIVE_FLOOR).abs() < 1e-15);
    }
}
