//! Differentiable operators recorded on a [`Tape`].
//!
//! Convolution and batch normalization accept optional per-image
//! visibility masks; the dense operators are the mask-free case and the
//! sparse module builds on the masked forms.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Per-image visibility for an `N x C x H x W` activation: one `H*W` vector
/// per image.
pub type BatchMask = Rc<Vec<Vec<bool>>>;

/// Batch-norm statistics mode.
#[derive(Clone, Debug)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Batch statistics observed during a training-mode batch-norm forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running-statistic updates.
    pub var: Vec<f64>,
}

fn elementwise_unary(
    tape: &mut Tape,
    op: &'static str,
    x: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var> {
    let out = tape.value(x).map(f);
    tape.record(
        op,
        &[x],
        out,
        Box::new(move |g, ins, out, _| {
            let data = g
                .data()
                .iter()
                .zip(ins[0].data())
                .zip(out.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape(), data)?)])
        }),
    )
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record("add", &[a, b], out, Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record("sub", &[a, b], out, Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record(
            "mul",
            &[a, b],
            out,
            Box::new(|g, ins, _, needs| {
                let ga = if needs[0] { Some(g.zip_map(ins[1], "mul", |g, y| g * y)?) } else { None };
                let gb = if needs[1] { Some(g.zip_map(ins[0], "mul", |g, x| g * x)?) } else { None };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.record("scale", &[a], out, Box::new(move |g, _, _, _| Ok(vec![Some(g.map(|v| v * c))])))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        elementwise_unary(self, "relu", x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        elementwise_unary(
            self,
            "gelu",
            x,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        elementwise_unary(self, "exp", x, f64::exp, |_, y| y)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.record("sum", &[x], out, Box::new(move |g, _, _, _| Ok(vec![Some(Tensor::full(&shape, g.item()))])))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        self.record("reshape", &[x], out, Box::new(move |g, _, _, _| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record(
            "matmul",
            &[a, b],
            out,
            Box::new(|g, ins, _, needs| {
                let (m, k, n) = (ins[0].dim(0), ins[0].dim(1), ins[1].dim(1));
                let ga = if needs[0] {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, ins[1].data(), true, &mut d, false);
                    Some(Tensor::new(&[m, k], d)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ins[0].data(), true, g.data(), false, &mut d, false);
                    Some(Tensor::new(&[k, n], d)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    /// `x (M x N) + bias (N)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        xv.expect_rank(2, "add_row_bias")?;
        let n = xv.dim(1);
        if bv.shape() != [n] {
            return Err(shape_err("add_row_bias", format!("bias {:?} for rows of {}", bv.shape(), n)));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.record(
            "add_row_bias",
            &[x, bias],
            out,
            Box::new(move |g, _, _, _| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Ok(vec![Some(g.clone()), Some(Tensor::from_vec(gb))])
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.record(
            "softmax",
            &[x],
            out,
            Box::new(move |g, _, y, _| {
                let mut gx = vec![0.0; g.numel()];
                for ((gr, yr), dst) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                Ok(vec![Some(Tensor::new(g.shape(), gx)?)])
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits (M x C)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_rank(2, "cross_entropy")?;
        let (m, c) = (lv.dim(0), lv.dim(1));
        if labels.len() != m {
            return Err(shape_err("cross_entropy", format!("{} labels for {} rows", labels.len(), m)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {} with only {} classes", bad, c)));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[i]] - mx - z.ln());
        }
        let labels = labels.to_vec();
        self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss / m as f64),
            Box::new(move |g, _, _, _| {
                let s = g.item() / m as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                Ok(vec![Some(Tensor::new(&[m, c], d)?)])
            }),
        )
    }

    /// L2-normalize each row of the last axis.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| shape_err("l2_normalize", "scalar input"))?;
        let norms: Vec<f64> = xv.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.iter().any(|&n| n < 1e-12) {
            return Err(Error::InvalidArgument("l2_normalize of a zero row".into()));
        }
        let mut out = xv.clone();
        for (row, n) in out.data_mut().chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.record(
            "l2_normalize",
            &[x],
            out,
            Box::new(move |g, _, y, _| {
                let mut gx = vec![0.0; g.numel()];
                for (((gr, yr), dst), n) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).zip(&norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / n;
                    }
                }
                Ok(vec![Some(Tensor::new(g.shape(), gx)?)])
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for feature dim {}", gv.shape(), bv.shape(), d),
            ));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mu = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for (o_row, h_row) in out.chunks_mut(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                o_row[j] = h_row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            "layer_norm",
            &[x, gamma, beta],
            Tensor::new(&shape, out)?,
            Box::new(move |g, ins, _, _| {
                let gamma = ins[1].data();
                let mut gx = vec![0.0; g.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, ((gr, hr), dst)) in g.data().chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dst[j] = inv_std[r] * (gr[j] * gamma[j] - m1 - hr[j] * m2);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(&shape, gx)?),
                    Some(Tensor::from_vec(gg)),
                    Some(Tensor::from_vec(gb)),
                ])
            }),
        )
    }

    /// 2-D convolution over `N x C x H x W`, weight `Cout x Cin x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_masked(x, w, b, stride, pad, None)
    }

    /// Convolution restricted to visible positions.
    ///
    /// With `masks = Some((input_mask, output_mask))` the output is computed
    /// only at visible output positions, each summing over visible inputs
    /// only; every other output (bias included) is exactly 0 and masked
    /// inputs receive no gradient.
    pub fn conv2d_masked(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        masks: Option<(BatchMask, BatchMask)>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        xv.expect_rank(4, "conv2d")?;
        wv.expect_rank(4, "conv2d")?;
        let (n, c_in, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (c_out, wc_in, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {} input channels, input {:?} has {}", wc_in, xv.shape(), c_in),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", self.value(b).shape(), c_out)));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, kw, stride, pad)?;
        let p_all = geom.ho * geom.wo;
        if let Some((mi, mo)) = &masks {
            if mi.len() != n || mo.len() != n {
                return Err(shape_err("conv2d", format!("{}/{} masks for batch of {}", mi.len(), mo.len(), n)));
            }
            if mi.iter().any(|m| m.len() != h * wd) || mo.iter().any(|m| m.len() != p_all) {
                return Err(shape_err(
                    "conv2d",
                    format!("mask sizes do not match input {}x{} / output {}x{}", h, wd, geom.ho, geom.wo),
                ));
            }
        }
        let positions: Vec<Vec<usize>> = (0..n)
            .map(|i| match &masks {
                Some((_, mo)) => (0..p_all).filter(|&p| mo[i][p]).collect(),
                None => (0..p_all).collect(),
            })
            .collect();

        let k = geom.k();
        let in_plane = c_in * h * wd;
        let out_plane = c_out * p_all;
        let bias: Option<Vec<f64>> = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * out_plane];
        let mut cols = Vec::new();
        let mut buf = Vec::new();
        for i in 0..n {
            let pos = &positions[i];
            let np = pos.len();
            if np == 0 {
                continue;
            }
            cols.resize(k * np, 0.0);
            let vis = masks.as_ref().map(|(mi, _)| mi[i].as_slice());
            im2col(&geom, &xv.data()[i * in_plane..(i + 1) * in_plane], pos, vis, &mut cols);
            buf.resize(c_out * np, 0.0);
            gemm(c_out, k, np, wv.data(), false, &cols, false, &mut buf, false);
            let dst = &mut out[i * out_plane..(i + 1) * out_plane];
            for co in 0..c_out {
                let bo = bias.as_ref().map_or(0.0, |b| b[co]);
                for (j, &p) in pos.iter().enumerate() {
                    dst[co * p_all + p] = buf[co * np + j] + bo;
                }
            }
        }

        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_bias = b.is_some();
        let op = if masks.is_some() { "sparse_conv2d" } else { "conv2d" };
        let value = Tensor::new(&[n, c_out, geom.ho, geom.wo], out)?;
        self.record(
            op,
            &inputs,
            value,
            Box::new(move |g, ins, _, needs| {
                let (xv, wv) = (ins[0], ins[1]);
                let mut gx = if needs[0] { Some(vec![0.0; xv.numel()]) } else { None };
                let mut gw = vec![0.0; wv.numel()];
                let mut gb = vec![0.0; c_out];
                let mut cols = Vec::new();
                let mut gsel = Vec::new();
                let mut dcols = Vec::new();
                for i in 0..n {
                    let pos = &positions[i];
                    let np = pos.len();
                    if np == 0 {
                        continue;
                    }
                    let src = &g.data()[i * out_plane..(i + 1) * out_plane];
                    gsel.resize(c_out * np, 0.0);
                    for co in 0..c_out {
                        for (j, &p) in pos.iter().enumerate() {
                            let v = src[co * p_all + p];
                            gsel[co * np + j] = v;
                            gb[co] += v;
                        }
                    }
                    let vis = masks.as_ref().map(|(mi, _)| mi[i].as_slice());
                    if needs[1] {
                        cols.resize(k * np, 0.0);
                        im2col(&geom, &xv.data()[i * in_plane..(i + 1) * in_plane], pos, vis, &mut cols);
                        gemm(c_out, np, k, &gsel, false, &cols, true, &mut gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcols.resize(k * np, 0.0);
                        gemm(k, c_out, np, wv.data(), true, &gsel, false, &mut dcols, false);
                        col2im(&geom, &dcols, pos, vis, &mut gx[i * in_plane..(i + 1) * in_plane]);
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::new(xv.shape(), d)).transpose()?,
                    Some(Tensor::new(wv.shape(), gw)?),
                ];
                if has_bias {
                    res.push(Some(Tensor::from_vec(gb)));
                }
                Ok(res)
            }),
        )
    }

    /// Batch normalization over `N x C x H x W` per channel.
    ///
    /// With `mask`, statistics use visible positions only and masked
    /// outputs are exactly 0. Returns batch statistics in train mode.
    pub fn batch_norm_masked(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        eps: f64,
        mask: Option<BatchMask>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        xv.expect_rank(4, "batch_norm")?;
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let hw = h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", format!("affine params for {} channels", c)));
        }
        if let Some(m) = &mask {
            if m.len() != n || m.iter().any(|v| v.len() != hw) {
                return Err(shape_err("batch_norm", format!("mask does not match {:?}", xv.shape())));
            }
        }
        let visible = |i: usize, p: usize| mask.as_ref().map_or(true, |m| m[i][p]);
        let count: usize = (0..n).map(|i| (0..hw).filter(|&p| visible(i, p)).count()).sum();
        if count == 0 {
            return Err(Error::InvalidArgument("batch_norm over zero visible positions".into()));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();

        let (mean, var, stats) = match &mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            if visible(i, p) {
                                s += xv.data()[base + p];
                            }
                        }
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            if visible(i, p) {
                                let d = xv.data()[base + p] - mu;
                                ss += d * d;
                            }
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", format!("running stats for {} channels", c)));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    if visible(i, p) {
                        let h = (xv.data()[base + p] - mean[ch]) * inv_std[ch];
                        xhat[base + p] = h;
                        out[base + p] = gv[ch] * h + bv[ch];
                    }
                }
            }
        }
        let train = matches!(mode, NormMode::Train);
        let shape = xv.shape().to_vec();
        let op = if mask.is_some() { "sparse_batch_norm" } else { "batch_norm" };
        let var_out = self.record(
            op,
            &[x, gamma, beta],
            Tensor::new(&shape, out)?,
            Box::new(move |g, ins, _, _| {
                let gamma = ins[1].data();
                let visible = |i: usize, p: usize| mask.as_ref().map_or(true, |m| m[i][p]);
                let mut gx = vec![0.0; g.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            if visible(i, p) {
                                let gy = g.data()[base + p];
                                gg[ch] += gy * xhat[base + p];
                                gb[ch] += gy;
                                m1 += gy;
                                m2 += gy * xhat[base + p];
                            }
                        }
                    }
                    m1 /= count as f64;
                    m2 /= count as f64;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            if visible(i, p) {
                                let gy = g.data()[base + p];
                                gx[base + p] = if train {
                                    gamma[ch] * inv_std[ch] * (gy - m1 - xhat[base + p] * m2)
                                } else {
                                    gamma[ch] * inv_std[ch] * gy
                                };
                            }
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(&shape, gx)?),
                    Some(Tensor::from_vec(gg)),
                    Some(Tensor::from_vec(gb)),
                ])
            }),
        )?;
        Ok((var_out, stats))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode, eps: f64) -> Result<(Var, Option<BatchStats>)> {
        self.batch_norm_masked(x, gamma, beta, mode, eps, None)
    }

    /// Global average pool `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(4, "global_avg_pool")?;
        let (n, c, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
        let out: Vec<f64> = xv.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let shape = xv.shape().to_vec();
        self.record(
            "global_avg_pool",
            &[x],
            Tensor::new(&[n, c], out)?,
            Box::new(move |g, _, _, _| {
                let mut d = Vec::with_capacity(n * c * hw);
                for &v in g.data() {
                    d.extend(std::iter::repeat(v / hw as f64).take(hw));
                }
                Ok(vec![Some(Tensor::new(&shape, d)?)])
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(4, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor 0".into()));
        }
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = plane[(y / factor) * w + xx / factor];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            "upsample_nearest",
            &[x],
            Tensor::new(&[n, c, ho, wo], out)?,
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * h * w];
                for (src, plane) in g.data().chunks(ho * wo).zip(d.chunks_mut(h * w)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            plane[(y / factor) * w + xx / factor] += src[y * wo + xx];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&shape, d)?)])
            }),
        )
    }

    /// `N x D x h x w -> N x (h*w) x D` token layout.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(4, "to_tokens")?;
        let (n, d, t) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
        let mut out = vec![0.0; n * t * d];
        for i in 0..n {
            for ch in 0..d {
                for p in 0..t {
                    out[(i * t + p) * d + ch] = xv.data()[(i * d + ch) * t + p];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            "to_tokens",
            &[x],
            Tensor::new(&[n, t, d], out)?,
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; n * t * d];
                for i in 0..n {
                    for ch in 0..d {
                        for p in 0..t {
                            gx[(i * d + ch) * t + p] = g.data()[(i * t + p) * d + ch];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&shape, gx)?)])
            }),
        )
    }

    /// Mean over the middle axis, `N x T x D -> N x D`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(3, "mean_axis1")?;
        let (n, t, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for p in 0..t {
                for j in 0..d {
                    out[i * d + j] += xv.data()[(i * t + p) * d + j] / t as f64;
                }
            }
        }
        self.record(
            "mean_axis1",
            &[x],
            Tensor::new(&[n, d], out)?,
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; n * t * d];
                for i in 0..n {
                    for p in 0..t {
                        for j in 0..d {
                            gx[(i * t + p) * d + j] = g.data()[i * d + j] / t as f64;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&[n, t, d], gx)?)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, co, ho, wo], out).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let mut t = Tape::new();
        let (e, av) = (t.constant(eye), t.constant(a.clone()));
        let y = t.matmul(e, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn conv_of_ones_is_four() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = t.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[4.0; 4]);
        let oracle = conv_oracle(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 2, 2]), 1, 0);
        assert_eq!(t.value(y), &oracle);
    }

    #[test]
    fn conv_matches_oracle_strided_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (4, 0, 4), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, None, stride, pad).unwrap();
            let diff = t.value(y).max_abs_diff(&conv_oracle(&x, &w, stride, pad)).unwrap();
            assert!(diff < 1e-12, "stride {} pad {}: {}", stride, pad, diff);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_dims() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = t.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains('3') && err.contains('2'), "{}", err);
    }

    #[test]
    fn batch_norm_matches_hand_values() {
        // one channel, values {1, 3}: mean 2, var 1
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let g = t.constant(Tensor::ones(&[1]));
        let b = t.constant(Tensor::zeros(&[1]));
        let (y, stats) = t.batch_norm(x, g, b, NormMode::Train, 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y).data()[0] + s).abs() < 1e-12);
        assert!((t.value(y).data()[1] - s).abs() < 1e-12);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: Vec<Tensor>) {
        let report = grad_check(f, &inputs, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel error {:?}", report.per_param);
    }

    #[test]
    fn grad_elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        check(
            |t, v| {
                let m = t.mul(v[0], v[1])?;
                let g = t.gelu(m)?;
                let s = t.sub(g, v[1])?;
                let e = t.exp(s)?;
                let r = t.relu(e)?;
                let a = t.add(r, v[0])?;
                let sc = t.scale(a, 0.7)?;
                t.mean(sc)
            },
            vec![a, b],
        );
    }

    #[test]
    fn grad_matmul_bias_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row_bias(h, v[2])?;
                let s = t.softmax_rows(h)?;
                let s2 = t.mul(s, s)?;
                let ce = t.cross_entropy(h, &[0, 1, 2, 3, 0])?;
                let l = t.sum(s2)?;
                t.add(l, ce)
            },
            vec![x, w, b],
        );
    }

    #[test]
    fn grad_layer_norm_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        let probe = rand_tensor(&mut rng, &[4, 6]);
        check(
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let y = t.l2_normalize_rows(y)?;
                let p = t.constant(probe.clone());
                let y = t.mul(y, p)?;
                t.sum(y)
            },
            vec![x, g, b],
        );
    }

    #[test]
    fn grad_conv_bn_pool_upsample_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 16, 3]);
        // a bias ahead of train-mode normalization is cancelled exactly, so
        // it is left out here and checked in grad_conv_bias
        check(
            move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                let (y, _) = t.batch_norm(y, v[2], v[3], NormMode::Train, 1e-5)?;
                let y = t.upsample_nearest(y, 2)?;
                let tok = t.to_tokens(y)?;
                let p = t.constant(probe.clone());
                let tok = t.mul(tok, p)?;
                let m = t.mean_axis1(tok)?;
                let pooled = t.global_avg_pool(y)?;
                let a = t.sum(m)?;
                let b = t.sum(pooled)?;
                let bb = t.mul(b, b)?;
                t.add(a, bb)
            },
            vec![x, w, gamma, beta],
        );
    }

    #[test]
    fn grad_conv_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        check(
            move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let p = t.constant(probe.clone());
                let y = t.mul(y, p)?;
                let y = t.gelu(y)?;
                t.sum(y)
            },
            vec![x, w, b],
        );
    }

    #[test]
    fn grad_batch_norm_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let probe = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        check(
            move |t, v| {
                let mode = NormMode::Eval { mean: vec![0.1, -0.2], var: vec![0.5, 2.0] };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
                let p = t.constant(probe.clone());
                let y = t.mul(y, p)?;
                t.sum(y)
            },
            vec![x, g, b],
        );
    }
}
