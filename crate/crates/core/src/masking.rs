//! Patch masks at the coarsest grid and their block expansion to every
//! feature resolution.
//!
//! A mask is drawn once per image on the coarsest grid and
//! nearest-neighbour upsampled to each finer scale, so every scale's
//! visibility pattern is block-constant and aligned with the patches.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::manifest::fnv1a;
use crate::ops::BatchMask;
use crate::tensor::Tensor;

/// A boolean visibility map of `h x w` cells, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskMap {
    pub h: usize,
    pub w: usize,
    pub visible: Vec<bool>,
}

impl MaskMap {
    pub fn all_visible(h: usize, w: usize) -> Self {
        Self { h, w, visible: vec![true; h * w] }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.visible[y * self.w + x]
    }

    /// Nearest-neighbour upsampling to `h x w` (integer multiples only).
    pub fn upsample(&self, h: usize, w: usize) -> Result<MaskMap> {
        if h == 0 || w == 0 || h % self.h != 0 || w % self.w != 0 {
            return Err(shape_err(
                "expand_hierarchy",
                format!("scale {}x{} is not a multiple of grid {}x{}", h, w, self.h, self.w),
            ));
        }
        let (fy, fx) = (h / self.h, w / self.w);
        let visible = (0..h * w).map(|i| self.is_visible(i / w / fy, i % w / fx)).collect();
        Ok(MaskMap { h, w, visible })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
            .expect("mask dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_rank(2, "mask_from_tensor")?;
        let mut visible = Vec::with_capacity(t.numel());
        for &v in t.data() {
            visible.push(match v {
                x if x == 1.0 => true,
                x if x == 0.0 => false,
                x => return Err(Error::InvalidArgument(format!("mask value {} is not 0/1", x))),
            });
        }
        Ok(Self { h: t.dim(0), w: t.dim(1), visible })
    }
}

/// Mask drawn on the coarsest grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub map: MaskMap,
    /// Requested masked fraction.
    pub ratio: f64,
}

impl MaskGrid {
    pub fn grid_h(&self) -> usize {
        self.map.h
    }

    pub fn grid_w(&self) -> usize {
        self.map.w
    }

    pub fn masked_count(&self) -> usize {
        self.map.visible.len() - self.map.visible_count()
    }
}

/// Mask `round(ratio * cells)` cells chosen uniformly without replacement
/// (at most `cells - 1` unless `ratio == 1`).
pub fn generate_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<MaskGrid> {
    generate_mask_with(grid_h, grid_w, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn generate_mask_with<R: Rng + ?Sized>(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {} outside [0, 1]", ratio)));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::InvalidArgument(format!("mask grid {}x{} must be at least 1x1", grid_h, grid_w)));
    }
    let cells = grid_h * grid_w;
    let mut masked = (ratio * cells as f64).round() as usize;
    if ratio < 1.0 {
        // keep at least one visible cell
        masked = masked.min(cells - 1);
    }
    let mut visible = vec![true; cells];
    for i in sample(rng, cells, masked) {
        visible[i] = false;
    }
    Ok(MaskGrid { map: MaskMap { h: grid_h, w: grid_w, visible }, ratio })
}

/// The grid mask expanded to every requested resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskHierarchy {
    pub grid: MaskGrid,
    pub maps: Vec<MaskMap>,
}

impl MaskHierarchy {
    /// Map at exactly `h x w`.
    pub fn at(&self, h: usize, w: usize) -> Result<&MaskMap> {
        self.maps
            .iter()
            .find(|m| m.h == h && m.w == w)
            .ok_or_else(|| shape_err("mask_hierarchy", format!("no map at {}x{}", h, w)))
    }

    /// Content checksum, used to assert that teacher and student consumed
    /// the same hierarchy.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for m in std::iter::once(&self.grid.map).chain(&self.maps) {
            bytes.extend_from_slice(&(m.h as u32).to_le_bytes());
            bytes.extend_from_slice(&(m.w as u32).to_le_bytes());
            bytes.extend(m.visible.iter().map(|&v| v as u8));
        }
        fnv1a(&bytes)
    }
}

/// Expand a grid mask to each `(h, w)` in `sizes`.
pub fn expand_hierarchy(mask: &MaskGrid, sizes: &[(usize, usize)]) -> Result<MaskHierarchy> {
    let maps = sizes.iter().map(|&(h, w)| mask.map.upsample(h, w)).collect::<Result<Vec<_>>>()?;
    Ok(MaskHierarchy { grid: mask.clone(), maps })
}

/// Gather one resolution across a batch of hierarchies.
pub fn batch_mask(hierarchies: &[MaskHierarchy], h: usize, w: usize) -> Result<BatchMask> {
    Ok(Rc::new(hierarchies.iter().map(|m| m.at(h, w).map(|m| m.visible.clone())).collect::<Result<Vec<_>>>()?))
}

/// Zero every masked pixel of a `C x H x W` or `N x C x H x W` image. A map
/// coarser than the image is block-expanded first.
pub fn apply_mask_dense(image: &Tensor, map: &MaskMap) -> Result<Tensor> {
    let r = image.rank();
    if r != 3 && r != 4 {
        return Err(shape_err("apply_mask_dense", format!("expected CHW or NCHW image, got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(r - 2), image.dim(r - 1));
    let full = if (map.h, map.w) == (h, w) {
        map.clone()
    } else {
        map.upsample(h, w).map_err(|_| {
            shape_err("apply_mask_dense", format!("mask {}x{} does not tile image {}x{}", map.h, map.w, h, w))
        })?
    };
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &vis) in plane.iter_mut().zip(&full.visible) {
            if !vis {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
