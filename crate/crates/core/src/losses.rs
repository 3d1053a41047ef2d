//! The distillation objective: negative Pearson correlation between
//! similarity distributions plus token-feature mean squared error.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Vectors with variance at or below this have no defined correlation.
pub const MIN_VARIANCE: f64 = 1e-12;

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape_err("pearson_loss", format!("lengths {} and {} must match and be at least 2", a.len(), b.len())));
    }
    for (name, v) in [("teacher", a), ("student", b)] {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        if var <= MIN_VARIANCE {
            return Err(Error::InvalidArgument(format!("pearson_loss: {} distribution is constant", name)));
        }
    }
    Ok(())
}

/// `-rho(p_t, p_s)`.
pub fn pearson_loss(p_t: &[f64], p_s: &[f64]) -> Result<f64> {
    check_pair(p_t, p_s)?;
    let (a, na) = centered(p_t);
    let (b, nb) = centered(p_s);
    Ok(-a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean squared difference over all entries.
pub fn feature_mse(t: &Tensor, s: &Tensor) -> Result<f64> {
    if t.shape() != s.shape() {
        return Err(shape_err("feature_mse", format!("teacher {:?} vs student {:?}", t.shape(), s.shape())));
    }
    if t.numel() == 0 {
        return Err(shape_err("feature_mse", "empty inputs".to_string()));
    }
    Ok(t.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.numel() as f64)
}

impl Tape {
    /// Batch mean of `-rho` between rows of the detached teacher
    /// distributions `p_t` and the student distributions `p_s` (`N x K`).
    pub fn pearson_loss(&mut self, p_t: &Tensor, p_s: Var) -> Result<Var> {
        let ps = self.value(p_s).clone();
        if ps.rank() != 2 || ps.shape() != p_t.shape() {
            return Err(shape_err("pearson_loss", format!("teacher {:?} vs student {:?}", p_t.shape(), ps.shape())));
        }
        let (n, k) = (ps.dim(0), ps.dim(1));
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            let (ta, sb) = (p_t.row(i), ps.row(i));
            check_pair(ta, sb)?;
            let (a, na) = centered(ta);
            let (b, nb) = centered(sb);
            let rho = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            loss -= rho / n as f64;
            // d rho / d b_j with centering folded in (the centered terms sum to 0)
            for j in 0..k {
                grad[i * k + j] = -(a[j] / (na * nb) - rho * b[j] / (nb * nb)) / n as f64;
            }
        }
        let grad = Tensor::new(&[n, k], grad)?;
        self.record(
            "pearson_loss",
            &[p_s],
            Tensor::scalar(loss),
            Box::new(move |g, _, _, _| Ok(vec![Some(grad.map(|v| v * g.item()))])),
        )
    }

    /// Mean squared error between detached teacher tokens and student
    /// tokens of the same shape.
    pub fn feature_mse(&mut self, t: &Tensor, s: Var) -> Result<Var> {
        let sv = self.value(s).clone();
        let loss = feature_mse(t, &sv)?;
        let scale = 2.0 / sv.numel() as f64;
        let t = t.clone();
        self.record(
            "feature_mse",
            &[s],
            Tensor::scalar(loss),
            Box::new(move |g, inputs, _, _| {
                let k = g.item() * scale;
                Ok(vec![Some(inputs[0].zip_map(&t, "feature_mse", |a, b| k * (a - b))?)])
            }),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub sim: f64,
    pub feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sim: 1.0, feat: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Zero while the similarity term is inactive.
    pub l_sim: f64,
    pub l_feat: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// False during queue warm-up.
    pub sim_active: bool,
}

impl LossBreakdown {
    pub fn combine(l_sim: Option<f64>, l_feat: f64, weights: LossWeights) -> Self {
        let total = weights.sim * l_sim.unwrap_or(0.0) + weights.feat * l_feat;
        Self { l_sim: l_sim.unwrap_or(0.0), l_feat, total, weights, sim_active: l_sim.is_some() }
    }
}

/// Weighted objective on the tape. `sim` carries `(P_T, P_S)` once the
/// queue is warm.
pub fn total_loss(
    tape: &mut Tape,
    sim: Option<(&Tensor, Var)>,
    t_tokens: &Tensor,
    s_tokens: Var,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let feat = tape.feature_mse(t_tokens, s_tokens)?;
    let mut total = tape.scale(feat, weights.feat)?;
    let mut l_sim = None;
    if let Some((pt, ps)) = sim {
        let s = tape.pearson_loss(pt, ps)?;
        l_sim = Some(tape.value(s).item());
        let ws = tape.scale(s, weights.sim)?;
        total = tape.add(total, ws)?;
    }
    let breakdown = LossBreakdown::combine(l_sim, tape.value(feat).item(), weights);
    Ok((total, breakdown))
}
