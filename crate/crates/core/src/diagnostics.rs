//! Quantitative checks of two failure modes of dense convolution on masked
//! images: the activation distribution shift between masked and unmasked
//! inputs, and the erosion of masked regions by repeated convolution.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::masking::{expand_hierarchy, generate_mask, MaskHierarchy, MaskMap};
use crate::student::{ConvKind, Mode, StudentModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    /// Normalized counts summing to 1.
    pub probs: Vec<f64>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; a degenerate range is widened by 0.5
    /// on each side.
    pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
        if bins == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!("histogram range [{}, {}] with {} bins", lo, hi, bins)));
        }
        let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
    }

    pub fn from_values(values: &[f64], edges: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("histogram of an empty activation set".into()));
        }
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("histogram edges must be strictly increasing".into()));
        }
        let bins = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[bins]);
        let mut counts = vec![0usize; bins];
        for &v in values {
            if !(lo..=hi).contains(&v) {
                return Err(Error::InvalidArgument(format!("value {} outside histogram range [{}, {}]", v, lo, hi)));
            }
            // uniform edges: locate by arithmetic, then fix rounding at edges
            let mut b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            b = b.min(bins - 1);
            while b > 0 && v < edges[b] {
                b -= 1;
            }
            while b + 1 < bins && v >= edges[b + 1] {
                b += 1;
            }
            counts[b] += 1;
        }
        let n = values.len() as f64;
        Ok(Self { edges: edges.to_vec(), probs: counts.into_iter().map(|c| c as f64 / n).collect() })
    }

    /// Histograms of `a` and `b` over the union of their ranges.
    pub fn pair(a: &[f64], b: &[f64], bins: usize) -> Result<(Self, Self)> {
        let all = a.iter().chain(b);
        let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument("histogram of an empty activation set".into()));
        }
        let edges = Self::uniform_edges(lo, hi, bins)?;
        Ok((Self::from_values(a, &edges)?, Self::from_values(b, &edges)?))
    }
}

/// Total-variation distance `0.5 * sum |p_i - q_i|`.
pub fn shift_score(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::InvalidArgument("shift_score: histograms have different bin edges".into()));
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Final-stage (`F4`) activations. With masks, the sparse kind reports
/// visible positions only and the dense kind reports every position of the
/// zero-filled masked image. Without masks both report every position.
pub fn final_stage_activations(model: &StudentModel, images: &Tensor, masks: Option<&[MaskHierarchy]>, kind: ConvKind, mode: Mode) -> Result<Vec<f64>> {
    let n = images.dim(0);
    let owned;
    let masks = match masks {
        Some(m) => m,
        None => {
            owned = model.unmasked_hierarchies(n);
            &owned
        }
    };
    let mut tape = Tape::new();
    let (enc, _) = model.encode(&mut tape, images, masks, kind, mode)?;
    let f4 = &enc.stages[3];
    let v = tape.value(f4.features);
    let (c, hw) = (v.dim(1), v.dim(2) * v.dim(3));
    let mut out = Vec::new();
    for i in 0..n {
        let vis = &f4.mask[i];
        for ch in 0..c {
            let plane = &v.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            match kind {
                ConvKind::Sparse => out.extend(plane.iter().zip(vis).filter(|(_, &m)| m).map(|(x, _)| *x)),
                ConvKind::Dense => out.extend_from_slice(plane),
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no visible final-stage activations".into()));
    }
    Ok(out)
}

/// Histogram of final-stage activations over explicit edges.
pub fn activation_histogram(
    model: &StudentModel,
    images: &Tensor,
    masks: Option<&[MaskHierarchy]>,
    kind: ConvKind,
    mode: Mode,
    edges: &[f64],
) -> Result<Histogram> {
    Histogram::from_values(&final_stage_activations(model, images, masks, kind, mode)?, edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub images: usize,
    pub ratio: f64,
    /// Sparse student, masked visible activations vs unmasked.
    pub sparse: f64,
    /// Dense convolution on the zero-filled masked image vs unmasked.
    pub dense: f64,
    pub sparse_hist: (Histogram, Histogram),
    pub dense_hist: (Histogram, Histogram),
}

impl ShiftReport {
    /// Sparse shift below 0.1 and less than half the dense shift.
    pub fn reproduces(&self) -> bool {
        self.sparse < 0.1 && self.dense > 2.0 * self.sparse
    }
}

/// Compare masked against unmasked final-stage distributions for the
/// sparse encoder and for its dense counterpart, one mask per image.
pub fn shift_experiment(model: &StudentModel, images: &Tensor, ratio: f64, seed: u64, bins: usize, mode: Mode) -> Result<ShiftReport> {
    let n = images.dim(0);
    let masks = hierarchies_for(model, n, ratio, seed)?;
    // process in chunks to bound tape memory
    let chunk = 25;
    let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let per = images.numel() / n.max(1);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        let m = &masks[start..end];
        acc[0].extend(final_stage_activations(model, &x, Some(m), ConvKind::Sparse, mode)?);
        acc[1].extend(final_stage_activations(model, &x, None, ConvKind::Sparse, mode)?);
        acc[2].extend(final_stage_activations(model, &x, Some(m), ConvKind::Dense, mode)?);
        acc[3].extend(final_stage_activations(model, &x, None, ConvKind::Dense, mode)?);
    }
    let sparse_hist = Histogram::pair(&acc[0], &acc[1], bins)?;
    let dense_hist = Histogram::pair(&acc[2], &acc[3], bins)?;
    Ok(ShiftReport {
        images: n,
        ratio,
        sparse: shift_score(&sparse_hist.0, &sparse_hist.1)?,
        dense: shift_score(&dense_hist.0, &dense_hist.1)?,
        sparse_hist,
        dense_hist,
    })
}

/// Fraction of nonzero outputs after each of `depth` stacked 3x3
/// all-ones convolutions applied to the mask's indicator image.
pub fn erosion_profile(kind: ConvKind, mask: &MaskMap, depth: usize) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::InvalidArgument("erosion depth must be at least 1".into()));
    }
    if mask.visible.len() != mask.h * mask.w {
        return Err(shape_err("erosion_profile", format!("mask {}x{} has {} cells", mask.h, mask.w, mask.visible.len())));
    }
    let mut tape = Tape::new();
    let ind = Tensor::new(&[1, 1, mask.h, mask.w], mask.visible.iter().map(|&v| v as u8 as f64).collect())?;
    let mut x = tape.constant(ind);
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let bm = Rc::new(vec![mask.visible.clone()]);
    let total = (mask.h * mask.w) as f64;
    let mut profile = Vec::with_capacity(depth);
    for _ in 0..depth {
        x = match kind {
            ConvKind::Dense => tape.conv2d(x, w, None, 1, 1)?,
            ConvKind::Sparse => tape.conv2d_masked(x, w, None, 1, 1, Some((bm.clone(), bm.clone())))?,
        };
        // rescale so values stay bounded at large depth
        let max = tape.value(x).data().iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            x = tape.scale(x, 1.0 / max)?;
        }
        profile.push(tape.value(x).data().iter().filter(|&&v| v != 0.0).count() as f64 / total);
    }
    Ok(profile)
}

/// One independently drawn mask hierarchy per image, seeded `seed + i`.
pub fn hierarchies_for(model: &StudentModel, n: usize, ratio: f64, seed: u64) -> Result<Vec<MaskHierarchy>> {
    let g = model.cfg.grid_size();
    (0..n)
        .map(|i| expand_hierarchy(&generate_mask(g, g, ratio, seed.wrapping_add(i as u64))?, &model.cfg.mask_sizes()))
        .collect()
}
