//! Submanifold sparse operators over masked feature maps.
//!
//! A [`SparseFeatureMap`] pairs an `N x C x h x w` activation with the
//! per-image visibility at its resolution. Canonical form: every masked
//! position holds exactly 0 in every channel. Each operator here computes
//! only at visible positions, reads only visible inputs and returns a map in
//! canonical form with the mask unchanged.

use crate::error::{shape_err, Error, Result};
use crate::ops::{BatchMask, BatchStats, NormMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SparseFeatureMap {
    pub features: Var,
    pub mask: BatchMask,
    /// Downsampling factor relative to the input image.
    pub scale: usize,
}

/// Number of masked positions (over the batch) holding any non-zero value.
pub fn count_leaks(values: &Tensor, mask: &[Vec<bool>]) -> usize {
    let (n, c, hw) = (values.dim(0), values.dim(1), values.dim(2) * values.dim(3));
    let mut leaks = 0;
    for i in 0..n {
        for p in 0..hw {
            if !mask[i][p] && (0..c).any(|ch| values.data()[(i * c + ch) * hw + p] != 0.0) {
                leaks += 1;
            }
        }
    }
    leaks
}

fn check_mask(op: &'static str, values: &Tensor, mask: &[Vec<bool>]) -> Result<()> {
    values.expect_rank(4, op)?;
    let hw = values.dim(2) * values.dim(3);
    if mask.len() != values.dim(0) || mask.iter().any(|m| m.len() != hw) {
        return Err(shape_err(
            op,
            format!("mask ({} maps) does not match features {:?}", mask.len(), values.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    /// Zero every masked position (all channels).
    pub fn mask_mul(&mut self, x: Var, mask: BatchMask) -> Result<Var> {
        let xv = self.value(x);
        check_mask("mask_mul", xv, &mask)?;
        let (c, hw) = (xv.dim(1), xv.dim(2) * xv.dim(3));
        let apply = move |t: &Tensor| {
            let mut out = t.clone();
            for (idx, v) in out.data_mut().iter_mut().enumerate() {
                let (i, p) = (idx / (c * hw), idx % hw);
                if !mask[i][p] {
                    *v = 0.0;
                }
            }
            out
        };
        let out = apply(xv);
        self.record("mask_mul", &[x], out, Box::new(move |g, _, _, _| Ok(vec![Some(apply(g))])))
    }
}

impl SparseFeatureMap {
    /// Canonicalize a dense activation under `mask`.
    pub fn from_dense(tape: &mut Tape, x: Var, mask: BatchMask, scale: usize) -> Result<Self> {
        let features = tape.mask_mul(x, mask.clone())?;
        Ok(Self { features, mask, scale })
    }

    pub fn leaked_positions(&self, tape: &Tape) -> usize {
        count_leaks(tape.value(self.features), &self.mask)
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().map(|m| m.iter().filter(|&&v| v).count()).sum()
    }

    fn debug_canonical(&self, tape: &Tape) {
        debug_assert_eq!(self.leaked_positions(tape), 0, "sparse map left canonical form");
    }
}

/// Submanifold convolution. `out_mask` is the visibility at the output
/// resolution; for stride 1 it must equal the input mask.
#[allow(clippy::too_many_arguments)]
pub fn sparse_conv2d(
    tape: &mut Tape,
    input: &SparseFeatureMap,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    out_mask: BatchMask,
) -> Result<SparseFeatureMap> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("sparse_conv2d stride must be 1 or 2, got {}", stride)));
    }
    if stride == 1 && out_mask != input.mask {
        return Err(shape_err("sparse_conv2d", "stride-1 output mask must equal the input mask"));
    }
    let features = tape.conv2d_masked(input.features, weight, bias, stride, pad, Some((input.mask.clone(), out_mask.clone())))?;
    let out = SparseFeatureMap { features, mask: out_mask, scale: input.scale * stride };
    out.debug_canonical(tape);
    Ok(out)
}

/// Batch normalization with statistics over visible positions only.
pub fn sparse_batchnorm(
    tape: &mut Tape,
    input: &SparseFeatureMap,
    gamma: Var,
    beta: Var,
    mode: NormMode,
    eps: f64,
) -> Result<(SparseFeatureMap, Option<BatchStats>)> {
    let (features, stats) = tape.batch_norm_masked(input.features, gamma, beta, mode, eps, Some(input.mask.clone()))?;
    let out = SparseFeatureMap { features, mask: input.mask.clone(), scale: input.scale };
    out.debug_canonical(tape);
    Ok((out, stats))
}

pub fn sparse_relu(tape: &mut Tape, input: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    let features = tape.relu(input.features)?;
    Ok(SparseFeatureMap { features, mask: input.mask.clone(), scale: input.scale })
}

pub fn sparse_add(tape: &mut Tape, a: &SparseFeatureMap, b: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    if a.mask != b.mask {
        return Err(shape_err("sparse_add", "operands carry different masks"));
    }
    let features = tape.add(a.features, b.features)?;
    Ok(SparseFeatureMap { features, mask: a.mask.clone(), scale: a.scale })
}

/// Fill masked holes with a per-channel embedding: visible positions keep
/// their features, masked positions read `embedding[c]`.
pub fn densify(tape: &mut Tape, input: &SparseFeatureMap, embedding: Var) -> Result<Var> {
    let fv = tape.value(input.features);
    check_mask("densify", fv, &input.mask)?;
    let (n, c, hw) = (fv.dim(0), fv.dim(1), fv.dim(2) * fv.dim(3));
    let ev = tape.value(embedding);
    if ev.shape() != [c] {
        return Err(shape_err("densify", format!("embedding {:?} for {} feature channels", ev.shape(), c)));
    }
    let mask = input.mask.clone();
    let mut out = fv.clone();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for p in 0..hw {
                if !mask[i][p] {
                    out.data_mut()[base + p] = ev.data()[ch];
                }
            }
        }
    }
    tape.record(
        "densify",
        &[input.features, embedding],
        out,
        Box::new(move |g, _, _, _| {
            let mut gf = g.clone();
            let mut ge = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in 0..hw {
                        if !mask[i][p] {
                            ge[ch] += g.data()[base + p];
                            gf.data_mut()[base + p] = 0.0;
                        }
                    }
                }
            }
            Ok(vec![Some(gf), Some(Tensor::from_vec(ge))])
        }),
    )
}

/// Leaked-position counts for a sequence of stage outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakReport {
    pub per_stage: Vec<usize>,
}

impl LeakReport {
    pub fn total(&self) -> usize {
        self.per_stage.iter().sum()
    }

    pub fn passed(&self) -> bool {
        self.total() == 0
    }
}

/// Check that every stage output's support lies inside its visible set.
pub fn mask_pattern_check(tape: &Tape, stages: &[SparseFeatureMap]) -> LeakReport {
    LeakReport { per_stage: stages.iter().map(|s| s.leaked_positions(tape)).collect() }
}
