//! Central finite-difference validation of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Check at most this many coordinates per input (chosen at random);
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per input tensor.
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::GradCheck(format!("function returned shape {:?}, expected a scalar", v.shape())));
    }
    Ok(v.item())
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare backward gradients of the scalar function `f` against central
/// differences, for every input in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1e-3) {
        return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1e-3]", cfg.epsilon)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;

    let again = eval(&f, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!("non-deterministic function: {} vs {}", base, again)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let n = inputs[idx].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = work[idx].data()[c];
            work[idx].data_mut()[c] = orig + cfg.epsilon;
            let plus = eval(&f, &work)?;
            work[idx].data_mut()[c] = orig - cfg.epsilon;
            let minus = eval(&f, &work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            worst = worst.max(rel_error(analytic.data()[c], numeric));
        }
        coords_checked += coords.len();
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_param, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
        assert_eq!(r.coords_checked, 8);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        let r = grad_check(
            |t, v| {
                // cube with a deliberately wrong derivative (2x instead of 3x^2)
                let y = t.value(v[0]).map(|x| x * x * x);
                let y = t.record(
                    "bad_cube",
                    &[v[0]],
                    y,
                    Box::new(|g, ins, _, _| Ok(vec![Some(g.zip_map(ins[0], "bad", |g, x| g * 2.0 * x)?)])),
                )?;
                t.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let x = Tensor::from_vec(vec![1.0]);
        let err = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.sum(v[0])?;
                t.scale(s, counter.get())
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck(_)));
    }

    #[test]
    fn epsilon_range_enforced() {
        let x = Tensor::from_vec(vec![1.0]);
        let cfg = GradCheckConfig { epsilon: 1e-2, ..Default::default() };
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], &cfg).is_err());
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let x = Tensor::from_vec(vec![0.5; 100]);
        let cfg = GradCheckConfig { max_coords: Some(32), ..Default::default() };
        let r = grad_check(|t, v| t.sum(v[0]), &[x], &cfg).unwrap();
        assert_eq!(r.coords_checked, 32);
    }
}
