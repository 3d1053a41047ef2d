//! Synthetic class-conditional texture datasets and batch augmentation.
//!
//! Each image is a grating whose orientation is set by its class, at a
//! random frequency and phase, overlaid with a weaker grating of random
//! orientation and pixel noise. Colour and contrast are randomized per
//! image so they carry no class information.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{io_err, Error, Result};
use crate::manifest::{fnv1a, Manifest};
use crate::ntnsr::{self, Precision};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.ntnsr";
pub const LABELS_FILE: &str = "labels.ntnsr";
pub const MANIFEST_FILE: &str = "dataset.manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x 3 x H x W`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Items `0..train_count` form the training split, the rest validation.
    pub train_count: usize,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 2500, classes: 4, image_size: 64, val_fraction: 0.2, seed: 0 }
    }
}

fn texture(rng: &mut ChaCha8Rng, class: usize, classes: usize, size: usize, noise: &Normal<f64>) -> Vec<f64> {
    let spread = PI / classes as f64;
    let theta = class as f64 * spread + rng.gen_range(-0.15..0.15) * spread;
    let freq = rng.gen_range(0.08..0.2) * 2.0 * PI;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let theta2 = rng.gen_range(0.0..PI);
    let freq2 = rng.gen_range(0.05..0.25) * 2.0 * PI;
    let phase2 = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.6..1.0);
    let colour: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
    let base = rng.gen_range(0.35..0.65);
    let (c1, s1, c2, s2) = (theta.cos(), theta.sin(), theta2.cos(), theta2.sin());
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let g = (freq * (xf * c1 + yf * s1) + phase).sin() + 0.5 * (freq2 * (xf * c2 + yf * s2) + phase2).sin();
            for (ch, col) in colour.iter().enumerate() {
                let v = base + 0.2 * contrast * col * g + noise.sample(rng);
                // store at f32 precision so the in-memory set equals its file
                out[ch * plane + y * size + x] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
    out
}

impl Dataset {
    pub fn synthetic(cfg: &SynthConfig) -> Result<Self> {
        if cfg.classes == 0 {
            return Err(Error::InvalidArgument("classes must be at least 1".into()));
        }
        if cfg.n < cfg.classes {
            return Err(Error::InvalidArgument(format!("n {} must be at least classes {}", cfg.n, cfg.classes)));
        }
        if cfg.image_size == 0 {
            return Err(Error::InvalidArgument("image_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Normal::new(0.0, 0.08).expect("std");
        let s = cfg.image_size;
        let mut data = Vec::with_capacity(cfg.n * 3 * s * s);
        // balanced labels in a shuffled order
        let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.gen_range(0..=i));
        }
        for &c in &labels {
            data.extend(texture(&mut rng, c, cfg.classes, s, &noise));
        }
        let val = (cfg.n as f64 * cfg.val_fraction).round() as usize;
        Ok(Self { images: Tensor::new(&[cfg.n, 3, s, s], data)?, labels, classes: cfg.classes, train_count: cfg.n - val })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.dim(2)
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = ntnsr::encode(&self.images, Precision::F32);
        bytes.extend(self.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()));
        fnv1a(&bytes)
    }

    /// Images `indices` stacked into `len x 3 x H x W`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.train_count).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (self.train_count..self.len()).collect()
    }

    /// Write the three dataset files into `dir`, which must be empty or
    /// absent unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() {
            let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
            if non_empty && !force {
                return Err(Error::Data(format!("{} exists and is not empty (use --force)", dir.display())));
            }
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        ntnsr::write(&dir.join(IMAGES_FILE), &self.images, Precision::F32)?;
        let labels = Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect());
        ntnsr::write(&dir.join(LABELS_FILE), &labels, Precision::F32)?;
        let mut m = Manifest::new();
        m.set("kind", "dataset")
            .set("n", self.len())
            .set("classes", self.classes)
            .set("image_size", self.image_size())
            .set("train_count", self.train_count)
            .set("val_count", self.len() - self.train_count)
            .set("checksum", format!("{:016x}", self.checksum()));
        m.write(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let missing = |p: PathBuf| Error::Data(format!("dataset file {} not found", p.display()));
        for f in [IMAGES_FILE, LABELS_FILE, MANIFEST_FILE] {
            if !dir.join(f).exists() {
                return Err(missing(dir.join(f)));
            }
        }
        let images = ntnsr::read(&dir.join(IMAGES_FILE))?;
        let labels_t = ntnsr::read(&dir.join(LABELS_FILE))?;
        let mpath = dir.join(MANIFEST_FILE);
        let m = Manifest::read(&mpath)?;
        let origin = mpath.display().to_string();
        let n: usize = m.parse("n", &origin)?;
        let classes: usize = m.parse("classes", &origin)?;
        let train_count: usize = m.parse("train_count", &origin)?;
        if images.rank() != 4 || images.dim(0) != n || images.dim(1) != 3 || labels_t.shape() != [n] || train_count > n {
            return Err(Error::Data(format!(
                "dataset in {} is inconsistent: images {:?}, labels {:?}, manifest n {}",
                dir.display(),
                images.shape(),
                labels_t.shape(),
                n
            )));
        }
        let mut labels = Vec::with_capacity(n);
        for &l in labels_t.data() {
            if l < 0.0 || l.fract() != 0.0 || l as usize >= classes {
                return Err(Error::Data(format!("label {} outside 0..{}", l, classes)));
            }
            labels.push(l as usize);
        }
        let ds = Self { images, labels, classes, train_count };
        if let Some(sum) = m.get("checksum") {
            if sum != format!("{:016x}", ds.checksum()) {
                return Err(Error::Data(format!("dataset checksum mismatch in {}", dir.display())));
            }
        }
        Ok(ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: bool,
    pub flip: bool,
    pub jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop: true, flip: true, jitter: true }
    }
}

pub const CROP_PAD: usize = 4;
pub const BRIGHTNESS: f64 = 0.2;

/// Random crop after zero padding by 4, horizontal flip with probability
/// 0.5 and additive brightness jitter in `[-0.2, 0.2]`, per image.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    batch.expect_rank(4, "augment")?;
    let (n, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    let mut out = batch.clone();
    let p = CROP_PAD as isize;
    for i in 0..n {
        let (dy, dx) = if cfg.crop { (rng.gen_range(-p..=p), rng.gen_range(-p..=p)) } else { (0, 0) };
        let flip = cfg.flip && rng.gen_bool(0.5);
        let shift = if cfg.jitter { rng.gen_range(-BRIGHTNESS..=BRIGHTNESS) } else { 0.0 };
        let src = &batch.data()[i * c * h * w..(i + 1) * c * h * w];
        let dst = &mut out.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let xs = if flip { w - 1 - x } else { x };
                    let (sy, sx) = (y as isize + dy, xs as isize + dx);
                    let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    };
                    dst[ch * h * w + y * w + x] = (v + shift).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}
