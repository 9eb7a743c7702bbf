use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Tag identifying the primitive that produced a taped tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv2d,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Softmax,
    LogSoftmax,
    Sum,
    Reshape,
}

/// One recorded operation: inputs plus the context its backward rule needs.
pub(crate) enum TapeNode {
    MatMul { a: Tensor, b: Tensor },
    Conv2d {
        x: Tensor,
        w: Tensor,
        geom: ConvGeom,
        /// Batch column matrix, kept when the weight needs a gradient.
        cols: Option<Vec<f64>>,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu { x: Tensor },
    GlobalAvgPool { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, factor: f64 },
    AddBias { x: Tensor, bias: Tensor },
    Softmax { x: Tensor },
    LogSoftmax { x: Tensor, probs: Vec<f64> },
    Sum { x: Tensor },
    Reshape { x: Tensor },
}

/// Split a tensor shape into (rows, channels, spatial) for NCHW or NC layouts.
pub(crate) fn nc_spatial(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let hw = shape[2..].iter().product();
    (n, c, hw)
}

impl TapeNode {
    pub fn kind(&self) -> OpKind {
        match self {
            TapeNode::MatMul { .. } => OpKind::MatMul,
            TapeNode::Conv2d { .. } => OpKind::Conv2d,
            TapeNode::BatchNorm { .. } => OpKind::BatchNorm,
            TapeNode::Relu { .. } => OpKind::Relu,
            TapeNode::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            TapeNode::Add { .. } => OpKind::Add,
            TapeNode::Sub { .. } => OpKind::Sub,
            TapeNode::Mul { .. } => OpKind::Mul,
            TapeNode::Scale { .. } => OpKind::Scale,
            TapeNode::AddBias { .. } => OpKind::AddBias,
            TapeNode::Softmax { .. } => OpKind::Softmax,
            TapeNode::LogSoftmax { .. } => OpKind::LogSoftmax,
            TapeNode::Sum { .. } => OpKind::Sum,
            TapeNode::Reshape { .. } => OpKind::Reshape,
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor> {
        match self {
            TapeNode::MatMul { a, b }
            | TapeNode::Add { a, b }
            | TapeNode::Sub { a, b }
            | TapeNode::Mul { a, b } => vec![a, b],
            TapeNode::Conv2d { x, w, .. } => vec![x, w],
            TapeNode::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            TapeNode::AddBias { x, bias } => vec![x, bias],
            TapeNode::Relu { x }
            | TapeNode::GlobalAvgPool { x }
            | TapeNode::Scale { x, .. }
            | TapeNode::Softmax { x }
            | TapeNode::LogSoftmax { x, .. }
            | TapeNode::Sum { x }
            | TapeNode::Reshape { x } => vec![x],
        }
    }

    /// Gradients for the inputs that require one, given the gradient `g` of
    /// the output tensor `out`.
    pub fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut res = Vec::new();
        match self {
            TapeNode::MatMul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    kernels::mm_nt_acc(g, &b.data(), &mut da, m, p, k);
                    res.push((a.clone(), da));
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * p];
                    kernels::mm_tn_acc(&a.data(), g, &mut db, k, m, p);
                    res.push((b.clone(), db));
                }
            }
            TapeNode::Conv2d { x, w, geom, cols } => {
                let n = x.shape()[0];
                let f = w.shape()[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let ld = n * ol;
                let in_len = geom.c * geom.h * geom.w;
                // gather the output gradient into [f × n·ol]
                let mut gp = vec![0.0; f * ld];
                for fi in 0..f {
                    for s in 0..n {
                        gp[fi * ld + s * ol..fi * ld + (s + 1) * ol].copy_from_slice(&g[(s * f + fi) * ol..(s * f + fi + 1) * ol]);
                    }
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; f * pl];
                    match cols {
                        Some(cols) => kernels::mm_nt_acc(&gp, cols, &mut dw, f, ld, pl),
                        None => {
                            let mut cols = vec![0.0; pl * ld];
                            let xd = x.data();
                            for s in 0..n {
                                kernels::im2col(&xd[s * in_len..(s + 1) * in_len], geom, &mut cols, ld, s * ol);
                            }
                            kernels::mm_nt_acc(&gp, &cols, &mut dw, f, ld, pl);
                        }
                    }
                    res.push((w.clone(), dw));
                }
                if x.requires_grad() {
                    let mut dcols = vec![0.0; pl * ld];
                    kernels::mm_tn_acc(&w.data(), &gp, &mut dcols, pl, f, ld);
                    let mut dx = vec![0.0; n * in_len];
                    for s in 0..n {
                        kernels::col2im_acc(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len], ld, s * ol);
                    }
                    res.push((x.clone(), dx));
                }
            }
            TapeNode::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, hw) = nc_spatial(x.shape());
                let m = (n * hw) as f64;
                let gd = gamma.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if x.requires_grad() {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    res.push((x.clone(), dx));
                }
                drop(gd);
                if gamma.requires_grad() {
                    res.push((gamma.clone(), sum_gx));
                }
                if beta.requires_grad() {
                    res.push((beta.clone(), sum_g));
                }
            }
            TapeNode::Relu { x } => {
                let dx = x.data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                res.push((x.clone(), dx));
            }
            TapeNode::GlobalAvgPool { x } => {
                let (n, c, hw) = nc_spatial(x.shape());
                let mut dx = vec![0.0; n * c * hw];
                for (i, chunk) in dx.chunks_mut(hw).enumerate() {
                    let v = g[i] / hw as f64;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                res.push((x.clone(), dx));
            }
            TapeNode::Add { a, b } => {
                for t in [a, b] {
                    if t.requires_grad() {
                        res.push((t.clone(), g.to_vec()));
                    }
                }
            }
            TapeNode::Sub { a, b } => {
                if a.requires_grad() {
                    res.push((a.clone(), g.to_vec()));
                }
                if b.requires_grad() {
                    res.push((b.clone(), g.iter().map(|v| -v).collect()));
                }
            }
            TapeNode::Mul { a, b } => {
                if a.requires_grad() {
                    let da = b.data().iter().zip(g).map(|(bv, gv)| bv * gv).collect();
                    res.push((a.clone(), da));
                }
                if b.requires_grad() {
                    let db = a.data().iter().zip(g).map(|(av, gv)| av * gv).collect();
                    res.push((b.clone(), db));
                }
            }
            TapeNode::Scale { x, factor } => {
                res.push((x.clone(), g.iter().map(|v| v * factor).collect()));
            }
            TapeNode::AddBias { x, bias } => {
                if x.requires_grad() {
                    res.push((x.clone(), g.to_vec()));
                }
                if bias.requires_grad() {
                    let k = bias.numel();
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    res.push((bias.clone(), db));
                }
            }
            TapeNode::Softmax { x } => {
                let k = *x.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                res.push((x.clone(), dx));
            }
            TapeNode::LogSoftmax { x, probs } => {
                let k = *x.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, pr), gr) in dx.chunks_mut(k).zip(probs.chunks(k)).zip(g.chunks(k)) {
                    let total: f64 = gr.iter().sum();
                    for i in 0..k {
                        dr[i] = gr[i] - pr[i] * total;
                    }
                }
                res.push((x.clone(), dx));
            }
            TapeNode::Sum { x } => {
                res.push((x.clone(), vec![g[0]; x.numel()]));
            }
            TapeNode::Reshape { x } => {
                res.push((x.clone(), g.to_vec()));
            }
        }
        res
    }
}
