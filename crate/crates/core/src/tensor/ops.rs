use super::kernels::{self, ConvGeom};
use super::op::{nc_spatial, TapeNode};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside the batch-norm square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean/variance kept by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            name: t.name(),
            detail: format!("{op} input has non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}

impl Tensor {
    /// Matrix product of `[m×k]` and `[k×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, p) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * p];
        kernels::mm_acc(&self.data(), &other.data(), &mut out, m, k, p);
        Ok(Tensor::from_op(
            vec![m, p],
            out,
            TapeNode::MatMul { a: self.clone(), b: other.clone() },
        ))
    }

    /// 2-D cross-correlation of `[N×C×H×W]` input with `[F×C×kh×kw]` filters.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let dim_err = || Error::Dimension {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if self.ndim() != 4 || weight.ndim() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(dim_err());
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (f, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} unsupported; use 1x1 or 3x3")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        // Output size uses floor division, matching strided downsampling on
        // even-sized maps; the kernel must fit inside the padded input.
        let (Some(span_h), Some(span_w)) = ((h + 2 * padding).checked_sub(kh), (w + 2 * padding).checked_sub(kw)) else {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            )));
        };
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = c * h * w;
        // One product over the whole batch: [f × pl] · [pl × n·ol].
        let ld = n * ol;
        let mut cols = vec![0.0; pl * ld];
        let mut prod = vec![0.0; f * ld];
        {
            let xd = self.data();
            for s in 0..n {
                kernels::im2col(&xd[s * in_len..(s + 1) * in_len], &geom, &mut cols, ld, s * ol);
            }
            kernels::mm_acc(&weight.data(), &cols, &mut prod, f, pl, ld);
        }
        let mut out = vec![0.0; n * f * ol];
        for fi in 0..f {
            for s in 0..n {
                out[(s * f + fi) * ol..(s * f + fi + 1) * ol].copy_from_slice(&prod[fi * ld + s * ol..fi * ld + (s + 1) * ol]);
            }
        }
        let keep = weight.requires_grad().then_some(cols);
        Ok(Tensor::from_op(
            vec![n, f, geom.oh, geom.ow],
            out,
            TapeNode::Conv2d { x: self.clone(), w: weight.clone(), geom, cols: keep },
        ))
    }

    /// Per-channel normalization for `[N×C×H×W]` or `[N×C]` input.
    pub fn batchnorm(&self, gamma: &Tensor, beta: &Tensor, mode: BnMode, stats: &mut RunningStats) -> Result<Tensor> {
        if self.ndim() < 2 || gamma.shape() != [self.shape()[1]] || beta.shape() != gamma.shape() {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (n, c, hw) = nc_spatial(self.shape());
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: self.shape().to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let count = n * hw;
        if mode == BnMode::Train && count < 2 {
            return Err(Error::Usage(format!(
                "batchnorm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let xd = self.data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        mean[ch] += xd[base..base + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        var[ch] += xd[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = count as f64 / (count as f64 - 1.0);
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                    stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let gd = gamma.data();
        let bd = beta.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        drop((xd, gd, bd));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(self.shape().to_vec(), out, TapeNode::Relu { x: self.clone() })
    }

    /// Mean over all spatial positions: `[N×C×H×W]` → `[N×C]`.
    pub fn avgpool_global(&self) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::Dimension {
                op: "avgpool_global",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, c, hw) = nc_spatial(self.shape());
        let out = self.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        Ok(Tensor::from_op(vec![n, c], out, TapeNode::GlobalAvgPool { x: self.clone() }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::Add { a: self.clone(), b: other.clone() },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::Sub { a: self.clone(), b: other.clone() },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::Mul { a: self.clone(), b: other.clone() },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), out, TapeNode::Scale { x: self.clone(), factor })
    }

    /// Add a `[K]` bias to every row of a `[B×K]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || bias.shape() != [self.shape()[1]] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let k = bias.numel();
        let bd = bias.data();
        let out = self.data().chunks(k).flat_map(|row| row.iter().zip(bd.iter()).map(|(a, b)| a + b)).collect();
        drop(bd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::AddBias { x: self.clone(), bias: bias.clone() },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        check_finite("softmax", self)?;
        let k = *self.shape().last().unwrap();
        let out = softmax_rows(&self.data(), k);
        Ok(Tensor::from_op(self.shape().to_vec(), out, TapeNode::Softmax { x: self.clone() }))
    }

    /// Log-softmax over the last axis with max subtraction.
    pub fn log_softmax(&self) -> Result<Tensor> {
        check_finite("log_softmax", self)?;
        let k = *self.shape().last().unwrap();
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        let mut probs = vec![0.0; xd.len()];
        for ((row, o), p) in xd.chunks(k).zip(out.chunks_mut(k)).zip(probs.chunks_mut(k)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for i in 0..k {
                o[i] = row[i] - m - lse;
                p[i] = o[i].exp();
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            TapeNode::LogSoftmax { x: self.clone(), probs },
        ))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], TapeNode::Sum { x: self.clone() })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), TapeNode::Reshape { x: self.clone() }))
    }
}

/// Row-wise softmax of a flat buffer with rows of length `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..k {
            o[i] = (row[i] - m).exp();
            z += o[i];
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}
