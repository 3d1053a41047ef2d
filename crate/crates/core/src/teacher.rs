//! Frozen teachers producing normalized per-token features.
//!
//! [`ToyTeacher`] is a small randomly initialized Transformer that attends
//! over visible patches only. [`FileTeacher`] serves precomputed token
//! features from an NTNSR file, so exported embeddings from any model can
//! be swapped in. Neither ever touches a [`crate::Tape`]: a teacher has no
//! trainable state and cannot receive gradients.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::manifest::Manifest;
use crate::masking::{MaskGrid, MaskMap};
use crate::ntnsr::{self, Precision};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { patch_size: 16, embed_dim: 64, depth: 2, heads: 1, mlp_ratio: 2, image_size: 64, in_channels: 3, seed: 0 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "teacher patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config("mlp_ratio and in_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// `T x D`, every row unit-norm.
    pub tokens: Tensor,
    /// Unit-norm mean of the token rows.
    pub embedding: Vec<f64>,
}

/// Anything that can supply frozen teacher targets for a dataset item.
pub trait TeacherProvider {
    fn embed_dim(&self) -> usize;
    fn num_tokens(&self) -> usize;
    /// Targets for dataset item `index` viewed as `image` (`C x H x W`)
    /// under `mask`. Providers may ignore whichever inputs they do not need.
    fn encode(&self, index: usize, image: &Tensor, mask: &MaskGrid) -> Result<TeacherOutput>;
}

/// Mean over token rows, L2-normalized.
pub fn instance_embedding(tokens: &Tensor) -> Result<Vec<f64>> {
    tokens.expect_rank(2, "instance_embedding")?;
    let (t, d) = (tokens.dim(0), tokens.dim(1));
    if t == 0 || d == 0 {
        return Err(shape_err("instance_embedding", "no tokens".to_string()));
    }
    let mut mean = vec![0.0; d];
    for row in tokens.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("instance embedding: token mean is the zero vector".into()));
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (Vec<f64>, Vec<f64>),
    qkv: Tensor,
    proj: Tensor,
    ln2: (Vec<f64>, Vec<f64>),
    fc1: Tensor,
    fc1_b: Vec<f64>,
    fc2: Tensor,
    fc2_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyTeacher {
    pub cfg: TeacherConfig,
    patch_embed: Tensor,
    patch_bias: Vec<f64>,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    final_ln: (Vec<f64>, Vec<f64>),
    mask_token: Vec<f64>,
}

const LN_EPS: f64 = 1e-6;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn layer_norm_rows(x: &mut Tensor, gamma: &[f64], beta: &[f64]) {
    let d = gamma.len();
    for row in x.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[j] + beta[j];
        }
    }
}

fn add_bias(x: &mut Tensor, bias: &[f64]) {
    for row in x.data_mut().chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl ToyTeacher {
    pub fn new(cfg: TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let fan_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patch_embed = gaussian(&mut rng, &[fan_in, d], (1.0 / fan_in as f64).sqrt());
        let pos_embed = gaussian(&mut rng, &[cfg.num_tokens(), d], 0.02);
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1: (vec![1.0; d], vec![0.0; d]),
                qkv: gaussian(&mut rng, &[d, 3 * d], (1.0 / d as f64).sqrt()),
                proj: gaussian(&mut rng, &[d, d], (1.0 / d as f64).sqrt()),
                ln2: (vec![1.0; d], vec![0.0; d]),
                fc1: gaussian(&mut rng, &[d, hidden], (1.0 / d as f64).sqrt()),
                fc1_b: vec![0.0; hidden],
                fc2: gaussian(&mut rng, &[hidden, d], (1.0 / hidden as f64).sqrt()),
                fc2_b: vec![0.0; d],
            })
            .collect();
        let mask_token = gaussian(&mut rng, &[d], 1.0).into_data();
        Ok(Self {
            cfg,
            patch_embed,
            patch_bias: vec![0.0; d],
            pos_embed,
            blocks,
            final_ln: (vec![1.0; d], vec![0.0; d]),
            mask_token,
        })
    }

    /// Visibility of each patch, row-major over the patch grid.
    pub fn patch_visibility(&self, mask: &MaskGrid) -> Result<MaskMap> {
        let g = self.cfg.grid();
        if (mask.grid_h(), mask.grid_w()) == (g, g) {
            return Ok(mask.map.clone());
        }
        mask.map.upsample(g, g).map_err(|_| {
            shape_err(
                "teacher_encode",
                format!("mask grid {}x{} is incompatible with patch grid {}x{}", mask.grid_h(), mask.grid_w(), g, g),
            )
        })
    }

    /// Flattened `(c, py, px)` pixels of the visible patches, centered and
    /// scaled to roughly unit variance.
    fn visible_patches(&self, image: &Tensor, vis: &MaskMap) -> Result<(Tensor, Vec<usize>)> {
        let c = &self.cfg;
        if image.shape() != [c.in_channels, c.image_size, c.image_size] {
            return Err(shape_err(
                "teacher_encode",
                format!("expected {} x {} x {} image, got {:?}", c.in_channels, c.image_size, c.image_size, image.shape()),
            ));
        }
        let (p, s, g) = (c.patch_size, c.image_size, c.grid());
        let idx: Vec<usize> = (0..g * g).filter(|&i| vis.visible[i]).collect();
        let row_len = c.in_channels * p * p;
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &t in &idx {
            let (gy, gx) = (t / g, t % g);
            for ch in 0..c.in_channels {
                for py in 0..p {
                    let start = ch * s * s + (gy * p + py) * s + gx * p;
                    data.extend(image.data()[start..start + p].iter().map(|v| (v - 0.5) * 4.0));
                }
            }
        }
        Ok((Tensor::new(&[idx.len(), row_len], data)?, idx))
    }

    fn attention(&self, blk: &Block, h: &Tensor) -> Result<Tensor> {
        let (n, d) = (h.dim(0), h.dim(1));
        let heads = self.cfg.heads;
        let dh = d / heads;
        let qkv = h.matmul(&blk.qkv)?;
        let mut out = vec![0.0; n * d];
        let scale = 1.0 / (dh as f64).sqrt();
        let at = |i: usize, part: usize, hd: usize, k: usize| qkv.data()[i * 3 * d + part * d + hd * dh + k];
        let mut scores = vec![0.0; n];
        for hd in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    scores[j] = (0..dh).map(|k| at(i, 0, hd, k) * at(j, 1, hd, k)).sum::<f64>() * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for j in 0..n {
                    let a = scores[j] / z;
                    for k in 0..dh {
                        out[i * d + hd * dh + k] += a * at(j, 2, hd, k);
                    }
                }
            }
        }
        Tensor::new(&[n, d], out)?.matmul(&blk.proj)
    }

    /// Encode one `C x H x W` image under `mask`.
    pub fn encode_image(&self, image: &Tensor, mask: &MaskGrid) -> Result<TeacherOutput> {
        let vis = self.patch_visibility(mask)?;
        let (patches, idx) = self.visible_patches(image, &vis)?;
        let d = self.cfg.embed_dim;
        let mut tokens = vec![0.0; self.cfg.num_tokens() * d];
        if !idx.is_empty() {
            let mut x = patches.matmul(&self.patch_embed)?;
            add_bias(&mut x, &self.patch_bias);
            for (r, &t) in idx.iter().enumerate() {
                for (v, p) in x.data_mut()[r * d..(r + 1) * d].iter_mut().zip(self.pos_embed.row(t)) {
                    *v += p;
                }
            }
            for blk in &self.blocks {
                let mut h = x.clone();
                layer_norm_rows(&mut h, &blk.ln1.0, &blk.ln1.1);
                x.add_assign(&self.attention(blk, &h)?)?;
                let mut h = x.clone();
                layer_norm_rows(&mut h, &blk.ln2.0, &blk.ln2.1);
                let mut m = h.matmul(&blk.fc1)?;
                add_bias(&mut m, &blk.fc1_b);
                let m = m.map(gelu);
                let mut m = m.matmul(&blk.fc2)?;
                add_bias(&mut m, &blk.fc2_b);
                x.add_assign(&m)?;
            }
            layer_norm_rows(&mut x, &self.final_ln.0, &self.final_ln.1);
            for (r, &t) in idx.iter().enumerate() {
                tokens[t * d..(t + 1) * d].copy_from_slice(x.row(r));
            }
        }
        for t in (0..self.cfg.num_tokens()).filter(|&t| !vis.visible[t]) {
            tokens[t * d..(t + 1) * d].copy_from_slice(&self.mask_token);
        }
        let tokens = Tensor::new(&[self.cfg.num_tokens(), d], tokens)?.normalize_rows();
        if !tokens.all_finite() {
            return Err(Error::NonFinite("teacher_encode".into()));
        }
        let embedding = instance_embedding(&tokens)?;
        Ok(TeacherOutput { tokens, embedding })
    }

    /// Number of tokens that attention runs over for `mask`.
    pub fn attended_tokens(&self, mask: &MaskGrid) -> Result<usize> {
        Ok(self.patch_visibility(mask)?.visible_count())
    }
}

impl TeacherProvider for ToyTeacher {
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn num_tokens(&self) -> usize {
        self.cfg.num_tokens()
    }

    fn encode(&self, _index: usize, image: &Tensor, mask: &MaskGrid) -> Result<TeacherOutput> {
        self.encode_image(image, mask)
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Write unmasked teacher tokens for `images` (`N x C x H x W`) to `path`
/// as an `N x T x D` NTNSR file, with a `<path>.manifest` sibling.
pub fn export_embeddings(teacher: &ToyTeacher, images: &Tensor, dataset_checksum: u64, path: &Path) -> Result<Tensor> {
    let g = teacher.cfg.grid();
    let unmasked = MaskGrid { map: MaskMap::all_visible(g, g), ratio: 0.0 };
    let n = images.dim(0);
    let outs = (0..n)
        .map(|i| teacher.encode_image(&images.index0(i)?, &unmasked).map(|o| o.tokens))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Tensor::stack(&outs)?;
    ntnsr::write(path, &stacked, Precision::F32)?;
    let mut m = Manifest::new();
    m.set("kind", "teacher_tokens")
        .set("patch_size", teacher.cfg.patch_size)
        .set("embed_dim", teacher.cfg.embed_dim)
        .set("num_tokens", teacher.cfg.num_tokens())
        .set("num_instances", n)
        .set("normalized", true)
        .set("dataset_checksum", format!("{:016x}", dataset_checksum));
    m.write(&manifest_path(path))?;
    Ok(stacked)
}

/// Precomputed teacher tokens keyed by dataset index.
#[derive(Clone, Debug)]
pub struct FileTeacher {
    tokens: Tensor,
    pub patch_size: usize,
    pub dataset_checksum: String,
    /// Rows whose norm drifted slightly and were re-normalized on load.
    pub renormalized_rows: usize,
}

/// Rows off unit norm by more than this are rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;
/// Rows off unit norm by more than this (and within tolerance) are
/// re-normalized.
const RENORM_THRESHOLD: f64 = 1e-6;

impl FileTeacher {
    /// Load `path` and its manifest. `expected_dim` is the student's token
    /// dimension, checked against the file.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let origin = path.display().to_string();
        let mut tokens = ntnsr::read(path)?;
        let manifest = Manifest::read(&manifest_path(path))?;
        let fail = |detail: String| Error::Format { path: origin.clone(), detail };
        if tokens.rank() != 3 {
            return Err(fail(format!("teacher tokens must be rank 3 (N x T x D), got {:?}", tokens.shape())));
        }
        let morigin = manifest_path(path).display().to_string();
        let dim: usize = manifest.parse("embed_dim", &morigin)?;
        let count: usize = manifest.parse("num_instances", &morigin)?;
        let ntok: usize = manifest.parse("num_tokens", &morigin)?;
        let patch_size: usize = manifest.parse("patch_size", &morigin)?;
        if tokens.shape() != [count, ntok, dim] {
            return Err(fail(format!(
                "tensor shape {:?} disagrees with manifest ({} x {} x {})",
                tokens.shape(),
                count,
                ntok,
                dim
            )));
        }
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(shape_err(
                    "load_teacher_embeddings",
                    format!("teacher embed_dim {} does not match student embed_dim {}", dim, want),
                ));
            }
        }
        let mut renormalized_rows = 0;
        for (r, row) in tokens.data_mut().chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dev = (norm - 1.0).abs();
            if dev > UNIT_NORM_TOLERANCE {
                return Err(fail(format!("row {} has norm {:.6}, expected unit norm", r, norm)));
            }
            if dev > RENORM_THRESHOLD {
                row.iter_mut().for_each(|v| *v /= norm);
                renormalized_rows += 1;
            }
        }
        let dataset_checksum = manifest.get("dataset_checksum").unwrap_or("").to_string();
        Ok(Self { tokens, patch_size, dataset_checksum, renormalized_rows })
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn get(&self, index: usize) -> Result<TeacherOutput> {
        if index >= self.len() {
            return Err(Error::OutOfRange { index, len: self.len() });
        }
        let tokens = self.tokens.index0(index)?;
        let embedding = instance_embedding(&tokens)?;
        Ok(TeacherOutput { tokens, embedding })
    }
}

impl TeacherProvider for FileTeacher {
    fn embed_dim(&self) -> usize {
        self.tokens.dim(2)
    }

    fn num_tokens(&self) -> usize {
        self.tokens.dim(1)
    }

    fn encode(&self, index: usize, _image: &Tensor, _mask: &MaskGrid) -> Result<TeacherOutput> {
        self.get(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::generate_mask;
    use rand::Rng;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn instance_embedding_examples() {
        let one = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(instance_embedding(&one).unwrap(), vec![0.6, 0.8]);
        let two = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = instance_embedding(&two).unwrap();
        assert!((e[0] - 0.7071).abs() < 1e-4 && (e[1] - 0.7071).abs() < 1e-4);
        let same = Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let e = instance_embedding(&same).unwrap();
        assert!((e[0] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        let zero = Tensor::new(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(instance_embedding(&zero).is_err());
    }

    #[test]
    fn counts_and_normalization() {
        let t = ToyTeacher::new(TeacherConfig::default()).unwrap();
        let mask = generate_mask(2, 2, 0.5, 1).unwrap();
        assert_eq!(t.attended_tokens(&mask).unwrap(), 8);
        let out = t.encode_image(&image(0), &mask).unwrap();
        assert_eq!(out.tokens.shape(), &[16, 64]);
        for row in out.tokens.data().chunks(64) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        assert!((out.embedding.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = ToyTeacher::new(TeacherConfig::default()).unwrap();
        let b = ToyTeacher::new(TeacherConfig::default()).unwrap();
        let mask = generate_mask(2, 2, 0.0, 0).unwrap();
        assert_eq!(a.encode_image(&image(3), &mask).unwrap(), b.encode_image(&image(3), &mask).unwrap());
    }

    #[test]
    fn masked_pixels_do_not_leak() {
        let t = ToyTeacher::new(TeacherConfig::default()).unwrap();
        let mask = MaskGrid { map: MaskMap { h: 2, w: 2, visible: vec![true, false, false, true] }, ratio: 0.5 };
        let a = image(4);
        let mut b = a.clone();
        // top-right 32x32 quadrant is masked
        for c in 0..3 {
            for y in 0..32 {
                for x in 32..64 {
                    b.data_mut()[c * 4096 + y * 64 + x] = 0.123;
                }
            }
        }
        assert_eq!(t.encode_image(&a, &mask).unwrap(), t.encode_image(&b, &mask).unwrap());
    }

    #[test]
    fn incompatible_mask_grid() {
        let t = ToyTeacher::new(TeacherConfig::default()).unwrap();
        let mask = generate_mask(3, 3, 0.5, 0).unwrap();
        assert!(t.encode_image(&image(0), &mask).is_err());
    }

    #[test]
    fn invalid_config() {
        assert!(ToyTeacher::new(TeacherConfig { heads: 3, ..Default::default() }).is_err());
        assert!(ToyTeacher::new(TeacherConfig { patch_size: 24, ..Default::default() }).is_err());
    }

    #[test]
    fn multi_head_runs() {
        let t = ToyTeacher::new(TeacherConfig { heads: 4, ..Default::default() }).unwrap();
        let mask = generate_mask(2, 2, 0.25, 0).unwrap();
        assert!(t.encode_image(&image(1), &mask).unwrap().tokens.all_finite());
    }
}
