//! The sparse-CNN UNet student.
//!
//! Encoder: a two-convolution stem down to `H/4`, then four stages of
//! residual blocks producing `F1..F4` at `H/4, H/8, H/16, H/32`. With
//! [`ConvKind::Sparse`] every encoder op is a submanifold sparse op.
//!
//! Decoder: `S4 = phi4(F4 + M4)` and `S_i = D_i(S_{i+1}) + phi_i(F_i + M_i)`
//! for `i = 3, 2, 1`, where `F_i + M_i` fills masked holes with the
//! learnable embedding `M_i`, `phi_i` is a 1x1 convolution and `D_i` is
//! nearest upsampling followed by conv-norm-relu. A strided convolution
//! head maps `S1` onto the teacher token grid and rows are L2-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::masking::{apply_mask_dense, batch_mask, MaskHierarchy, MaskMap};
use crate::ops::{BatchMask, BatchStats, NormMode};
use crate::params::ParamStore;
use crate::sparse::{densify, sparse_add, sparse_batchnorm, sparse_conv2d, sparse_relu, SparseFeatureMap};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub image_size: usize,
    pub in_channels: usize,
    /// Token feature dimension (must equal the teacher's).
    pub embed_dim: usize,
    /// Teacher patch size; the head emits one token per patch.
    pub token_patch: usize,
    /// Submanifold sparse encoder (false: dense convolutions on the
    /// zero-filled masked image).
    pub sparse: bool,
    /// Lateral UNet connections `phi_i(F_i + M_i)` for `i < 4`.
    pub unet: bool,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            blocks_per_stage: 2,
            image_size: 64,
            in_channels: 3,
            embed_dim: 64,
            token_patch: 16,
            sparse: true,
            unet: true,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("widths, in_channels and embed_dim must be positive".into()));
        }
        if self.token_patch < 4 || self.token_patch % 4 != 0 || self.image_size % self.token_patch != 0 {
            return Err(Error::Config(format!(
                "token_patch {} must be a multiple of 4 dividing image_size {}",
                self.token_patch, self.image_size
            )));
        }
        Ok(())
    }

    /// Side lengths of every resolution the student touches, finest first:
    /// `H, H/2, H/4, H/8, H/16, H/32`.
    pub fn mask_sizes(&self) -> Vec<(usize, usize)> {
        (0..6).map(|k| (self.image_size >> k, self.image_size >> k)).collect()
    }

    /// Side of the coarsest (mask) grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / 32
    }

    pub fn token_grid(&self) -> usize {
        self.image_size / self.token_patch
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Sparse,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

#[derive(Clone, Debug)]
struct Stage {
    entry: Vec<ConvNorm>,
    blocks: Vec<ResBlock>,
}

/// A pending running-statistics update from a training-mode forward.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    stats: BatchStats,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.params.add_param(name, Tensor::new(shape, data).expect("shape"))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let w = self.normal(&format!("{}.w", name), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt());
        let b = bias.then(|| self.params.add_param(&format!("{}.b", name), Tensor::zeros(&[c_out])));
        Conv { w, b, stride, pad }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.params.add_param(&format!("{}.gamma", name), Tensor::ones(&[c])),
            beta: self.params.add_param(&format!("{}.beta", name), Tensor::zeros(&[c])),
            running_mean: self.params.add_buffer(&format!("{}.running_mean", name), Tensor::zeros(&[c])),
            running_var: self.params.add_buffer(&format!("{}.running_var", name), Tensor::ones(&[c])),
        }
    }

    fn conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> ConvNorm {
        ConvNorm {
            conv: self.conv(&format!("{}.conv", name), c_in, c_out, 3, stride, 1, false),
            norm: self.norm(&format!("{}.bn", name), c_out),
        }
    }
}

/// Encoder outputs `F1..F4`, finest first.
pub struct Encoded {
    pub stages: Vec<SparseFeatureMap>,
}

pub struct StudentOutput {
    /// `N x T x D`, rows L2-normalized.
    pub tokens: Var,
    /// Decoder output `S1`, `N x C1 x H/4 x W/4`.
    pub s1: Var,
    pub encoded: Encoded,
    pub norm_updates: Vec<NormUpdate>,
}

#[derive(Clone, Debug)]
pub struct StudentModel {
    pub cfg: StudentConfig,
    pub params: ParamStore,
    stem: Vec<ConvNorm>,
    stages: Vec<Stage>,
    /// `M1..M4`; `None` where unused by the variant.
    mask_emb: Vec<Option<ParamId>>,
    /// `phi1..phi4`; `None` where unused by the variant.
    proj: Vec<Option<Conv>>,
    /// `D1..D3`: `decoder[i]` maps scale `i+1` to scale `i`.
    decoder: Vec<ConvNorm>,
    head: Conv,
}

struct Fwd<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    mode: Mode,
    updates: Vec<NormUpdate>,
}

impl Fwd<'_> {
    fn bind(&mut self, id: ParamId) -> Var {
        self.params.bind(self.tape, id)
    }

    fn norm_mode(&self, n: &Norm) -> NormMode {
        match self.mode {
            Mode::Train => NormMode::Train,
            Mode::Eval => NormMode::Eval {
                mean: self.params.get(n.running_mean).data().to_vec(),
                var: self.params.get(n.running_var).data().to_vec(),
            },
        }
    }

    fn record_stats(&mut self, n: &Norm, stats: Option<BatchStats>) {
        if let Some(stats) = stats {
            self.updates.push(NormUpdate { running_mean: n.running_mean, running_var: n.running_var, stats });
        }
    }

    fn dense_conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let w = self.bind(c.w);
        let b = c.b.map(|b| self.bind(b));
        self.tape.conv2d(x, w, b, c.stride, c.pad)
    }

    fn dense_conv_norm(&mut self, cn: &ConvNorm, x: Var, relu: bool) -> Result<Var> {
        let y = self.dense_conv(&cn.conv, x)?;
        let (g, b) = (self.bind(cn.norm.gamma), self.bind(cn.norm.beta));
        let mode = self.norm_mode(&cn.norm);
        let (y, stats) = self.tape.batch_norm(y, g, b, mode, BN_EPS)?;
        self.record_stats(&cn.norm, stats);
        if relu {
            self.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn sparse_conv_norm(&mut self, cn: &ConvNorm, x: &SparseFeatureMap, out_mask: BatchMask, relu: bool) -> Result<SparseFeatureMap> {
        let w = self.bind(cn.conv.w);
        let b = cn.conv.b.map(|b| self.bind(b));
        let y = sparse_conv2d(self.tape, x, w, b, cn.conv.stride, cn.conv.pad, out_mask)?;
        let (g, bt) = (self.bind(cn.norm.gamma), self.bind(cn.norm.beta));
        let mode = self.norm_mode(&cn.norm);
        let (y, stats) = sparse_batchnorm(self.tape, &y, g, bt, mode, BN_EPS)?;
        self.record_stats(&cn.norm, stats);
        if relu {
            sparse_relu(self.tape, &y)
        } else {
            Ok(y)
        }
    }
}

impl StudentModel {
    pub fn new(cfg: StudentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let w = cfg.widths;
        let stem = vec![b.conv_norm("stem.0", cfg.in_channels, w[0], 2), b.conv_norm("stem.1", w[0], w[0], 2)];
        let mut stages = Vec::new();
        for s in 0..4 {
            let entry = if s == 0 { Vec::new() } else { vec![b.conv_norm(&format!("stage{}.down", s + 1), w[s - 1], w[s], 2)] };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|k| ResBlock {
                    a: b.conv_norm(&format!("stage{}.block{}.a", s + 1, k), w[s], w[s], 1),
                    b: b.conv_norm(&format!("stage{}.block{}.b", s + 1, k), w[s], w[s], 1),
                })
                .collect();
            stages.push(Stage { entry, blocks });
        }
        let lateral = |i: usize| i == 3 || cfg.unet;
        let mut mask_emb = Vec::new();
        let mut proj = Vec::new();
        for i in 0..4 {
            let used = lateral(i);
            mask_emb.push((used && cfg.sparse).then(|| b.normal(&format!("mask_emb.{}", i + 1), &[w[i]], 0.02)));
            proj.push(used.then(|| b.conv(&format!("proj.{}", i + 1), w[i], w[i], 1, 1, 0, true)));
        }
        let decoder = (0..3).map(|i| b.conv_norm(&format!("decoder.{}", i + 1), w[i + 1], w[i], 1)).collect();
        let k = cfg.token_patch / 4;
        let head = {
            let fan_in = (w[0] * k * k) as f64;
            let hw = b.normal("head.w", &[cfg.embed_dim, w[0], k, k], (1.0 / fan_in).sqrt());
            let hb = b.params.add_param("head.b", Tensor::zeros(&[cfg.embed_dim]));
            Conv { w: hw, b: Some(hb), stride: k, pad: 0 }
        };
        Ok(Self { cfg, params, stem, stages, mask_emb, proj, decoder, head })
    }

    /// All-visible hierarchies for a batch of `n` unmasked images.
    pub fn unmasked_hierarchies(&self, n: usize) -> Vec<MaskHierarchy> {
        let g = self.cfg.grid_size();
        let grid = crate::masking::MaskGrid { map: MaskMap::all_visible(g, g), ratio: 0.0 };
        let h = crate::masking::expand_hierarchy(&grid, &self.cfg.mask_sizes()).expect("sizes divide");
        vec![h; n]
    }

    fn check_input(&self, images: &Tensor, masks: &[MaskHierarchy]) -> Result<()> {
        let c = &self.cfg;
        if images.rank() != 4
            || images.dim(1) != c.in_channels
            || images.dim(2) != c.image_size
            || images.dim(3) != c.image_size
        {
            return Err(shape_err(
                "student_encode",
                format!("expected N x {} x {} x {}, got {:?}", c.in_channels, c.image_size, c.image_size, images.shape()),
            ));
        }
        if masks.len() != images.dim(0) {
            return Err(shape_err("student_encode", format!("{} mask hierarchies for batch {}", masks.len(), images.dim(0))));
        }
        Ok(())
    }

    /// Run the encoder. `Dense` applies ordinary convolutions to the
    /// zero-filled masked image; the returned maps then carry the mask but
    /// are not canonical.
    pub fn encode(&self, tape: &mut Tape, images: &Tensor, masks: &[MaskHierarchy], kind: ConvKind, mode: Mode) -> Result<(Encoded, Vec<NormUpdate>)> {
        let mut f = Fwd { tape, params: &self.params, mode, updates: Vec::new() };
        let enc = self.encode_inner(&mut f, images, masks, kind)?;
        Ok((enc, f.updates))
    }

    fn encode_inner(&self, f: &mut Fwd, images: &Tensor, masks: &[MaskHierarchy], kind: ConvKind) -> Result<Encoded> {
        self.check_input(images, masks)?;
        let size = self.cfg.image_size;
        let m = |k: usize| batch_mask(masks, size >> k, size >> k);
        let mut stages = Vec::with_capacity(4);
        match kind {
            ConvKind::Sparse => {
                let x = f.tape.constant(images.clone());
                let mut x = SparseFeatureMap::from_dense(f.tape, x, m(0)?, 1)?;
                for (k, cn) in self.stem.iter().enumerate() {
                    x = f.sparse_conv_norm(cn, &x, m(k + 1)?, true)?;
                }
                for (s, stage) in self.stages.iter().enumerate() {
                    let mask = m(s + 2)?;
                    for cn in &stage.entry {
                        x = f.sparse_conv_norm(cn, &x, mask.clone(), true)?;
                    }
                    for blk in &stage.blocks {
                        let y = f.sparse_conv_norm(&blk.a, &x, mask.clone(), true)?;
                        let y = f.sparse_conv_norm(&blk.b, &y, mask.clone(), false)?;
                        let sum = sparse_add(f.tape, &x, &y)?;
                        x = sparse_relu(f.tape, &sum)?;
                    }
                    stages.push(x.clone());
                }
            }
            ConvKind::Dense => {
                let mut zeroed = images.clone();
                let plane = size * size;
                for (i, h) in masks.iter().enumerate() {
                    let vis = &h.at(size, size)?.visible;
                    let img = &mut zeroed.data_mut()[i * self.cfg.in_channels * plane..(i + 1) * self.cfg.in_channels * plane];
                    for (idx, v) in img.iter_mut().enumerate() {
                        if !vis[idx % plane] {
                            *v = 0.0;
                        }
                    }
                }
                let mut x = f.tape.constant(zeroed);
                for cn in &self.stem {
                    x = f.dense_conv_norm(cn, x, true)?;
                }
                for (s, stage) in self.stages.iter().enumerate() {
                    for cn in &stage.entry {
                        x = f.dense_conv_norm(cn, x, true)?;
                    }
                    for blk in &stage.blocks {
                        let y = f.dense_conv_norm(&blk.a, x, true)?;
                        let y = f.dense_conv_norm(&blk.b, y, false)?;
                        let sum = f.tape.add(x, y)?;
                        x = f.tape.relu(sum)?;
                    }
                    stages.push(SparseFeatureMap { features: x, mask: m(s + 2)?, scale: 4 << s });
                }
            }
        }
        Ok(Encoded { stages })
    }

    /// `F_i + M_i` for a sparse encoder, `F_i` as-is for a dense one.
    fn filled(&self, f: &mut Fwd, enc: &Encoded, i: usize) -> Result<Var> {
        match self.mask_emb[i] {
            Some(id) => {
                let e = f.bind(id);
                densify(f.tape, &enc.stages[i], e)
            }
            None => Ok(enc.stages[i].features),
        }
    }

    fn decode_inner(&self, f: &mut Fwd, enc: &Encoded) -> Result<Var> {
        let phi4 = self.proj[3].as_ref().expect("phi4 always present");
        let f4 = self.filled(f, enc, 3)?;
        let mut s = f.dense_conv(phi4, f4)?;
        for i in (0..3).rev() {
            let up = f.tape.upsample_nearest(s, 2)?;
            let d = f.dense_conv_norm(&self.decoder[i], up, true)?;
            s = match &self.proj[i] {
                Some(phi) => {
                    let fi = self.filled(f, enc, i)?;
                    let lateral = f.dense_conv(phi, fi)?;
                    f.tape.add(d, lateral)?
                }
                None => d,
            };
        }
        Ok(s)
    }

    /// Run the decoder recurrence on encoder outputs, returning `S1`.
    pub fn decode(&self, tape: &mut Tape, enc: &Encoded, mode: Mode) -> Result<(Var, Vec<NormUpdate>)> {
        let mut f = Fwd { tape, params: &self.params, mode, updates: Vec::new() };
        let s1 = self.decode_inner(&mut f, enc)?;
        Ok((s1, f.updates))
    }

    /// Project `S1` onto the token grid and L2-normalize each token.
    pub fn head(&self, tape: &mut Tape, s1: Var) -> Result<Var> {
        let v = tape.value(s1);
        let k = self.head.stride;
        if v.rank() != 4 || v.dim(2) % k != 0 || v.dim(3) % k != 0 {
            return Err(shape_err("student_head", format!("S1 {:?} does not tile into {}x{} token cells", v.shape(), k, k)));
        }
        let mut f = Fwd { tape, params: &self.params, mode: Mode::Eval, updates: Vec::new() };
        let y = f.dense_conv(&self.head, s1)?;
        let t = tape.to_tokens(y)?;
        tape.l2_normalize_rows(t)
    }

    /// Full forward pass: encode, decode, head.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, masks: &[MaskHierarchy], kind: ConvKind, mode: Mode) -> Result<StudentOutput> {
        let mut f = Fwd { tape, params: &self.params, mode, updates: Vec::new() };
        let encoded = self.encode_inner(&mut f, images, masks, kind)?;
        let s1 = self.decode_inner(&mut f, &encoded)?;
        let updates = f.updates;
        let tokens = self.head(tape, s1)?;
        Ok(StudentOutput { tokens, s1, encoded, norm_updates: updates })
    }

    /// Forward with the encoder kind this model was configured for.
    pub fn forward_default(&self, tape: &mut Tape, images: &Tensor, masks: &[MaskHierarchy], mode: Mode) -> Result<StudentOutput> {
        let kind = if self.cfg.sparse { ConvKind::Sparse } else { ConvKind::Dense };
        self.forward(tape, images, masks, kind, mode)
    }

    /// Fold training-mode batch statistics into the running statistics.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                let t = self.params.get_mut(id);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Weight-copied dense twin for unmasked inference.
    pub fn to_dense_model(&self) -> DenseStudent {
        DenseStudent { inner: self.clone() }
    }

    pub fn mask_embedding_ids(&self) -> Vec<Option<ParamId>> {
        self.mask_emb.clone()
    }

    pub fn projection_ids(&self) -> Vec<Option<(ParamId, Option<ParamId>)>> {
        self.proj.iter().map(|p| p.as_ref().map(|c| (c.w, c.b))).collect()
    }

    /// `(conv weight, gamma, beta, running_mean, running_var)` of `D1..D3`.
    pub fn decoder_ids(&self) -> Vec<(ParamId, ParamId, ParamId, ParamId, ParamId)> {
        self.decoder
            .iter()
            .map(|d| (d.conv.w, d.norm.gamma, d.norm.beta, d.norm.running_mean, d.norm.running_var))
            .collect()
    }
}

/// Dense inference twin: the same weights run through ordinary dense
/// convolutions and batch normalization, valid for unmasked inputs.
#[derive(Clone, Debug)]
pub struct DenseStudent {
    inner: StudentModel,
}

impl DenseStudent {
    pub fn cfg(&self) -> &StudentConfig {
        &self.inner.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.inner.params
    }

    /// Eval-mode forward returning `N x T x D` normalized tokens.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let masks = self.inner.unmasked_hierarchies(images.dim(0));
        let mut f = Fwd { tape, params: &self.inner.params, mode: Mode::Eval, updates: Vec::new() };
        let enc = self.inner.encode_inner(&mut f, images, &masks, ConvKind::Dense)?;
        // no holes in unmasked inputs, so the decoder reads F_i directly
        let phi4 = self.inner.proj[3].as_ref().expect("phi4");
        let mut s = f.dense_conv(phi4, enc.stages[3].features)?;
        for i in (0..3).rev() {
            let up = f.tape.upsample_nearest(s, 2)?;
            let d = f.dense_conv_norm(&self.inner.decoder[i], up, true)?;
            s = match &self.inner.proj[i] {
                Some(phi) => {
                    let lateral = f.dense_conv(phi, enc.stages[i].features)?;
                    f.tape.add(d, lateral)?
                }
                None => d,
            };
        }
        self.inner.head(tape, s)
    }

    /// Forward on a zero-filled masked image (only meaningful as a
    /// contrast to the sparse student).
    pub fn forward_masked(&self, tape: &mut Tape, images: &Tensor, masks: &[MaskHierarchy]) -> Result<Var> {
        let mut zeroed = images.clone();
        let size = self.inner.cfg.image_size;
        let per = self.inner.cfg.in_channels * size * size;
        for (i, h) in masks.iter().enumerate() {
            let img = Tensor::new(&[self.inner.cfg.in_channels, size, size], images.data()[i * per..(i + 1) * per].to_vec())?;
            let z = apply_mask_dense(&img, &h.grid.map)?;
            zeroed.data_mut()[i * per..(i + 1) * per].copy_from_slice(z.data());
        }
        self.forward(tape, &zeroed)
    }

    /// Mean-pooled token features, `N x D`.
    pub fn pooled_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = self.forward(&mut tape, images)?;
        let m = tape.mean_axis1(t)?;
        Ok(tape.value(m).clone())
    }
}
