//! Block-structured networks and the connectors that join them.
//!
//! A [`CompositeNet`] is `n` [`Block`]s followed by a classifier block. Block
//! boundaries sit at the downsampling points: every block after the first
//! may open with a strided convolution, so a teacher and a student built
//! with the same strides produce features of identical spatial size at each
//! boundary and differ only in channel count. A [`Connector`] (1×1 conv plus
//! batch norm) bridges that channel gap.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, substream, uniform_sym, SeededRng};
use crate::tensor::{BnMode, RunningStats, Tensor};

pub type Mode = BnMode;

/// Per-net layout: one entry per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Output channels of each block.
    pub widths: Vec<usize>,
    /// Stride of the first convolution of each block.
    pub strides: Vec<usize>,
    /// Convolutions per block.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Spatial kernel size, 3 for images and 1 for vector inputs.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_depth() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

impl NetSpec {
    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    fn validate(&self, who: &str) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config(format!("{who}: at least one block required")));
        }
        if self.strides.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{who}: {} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0) || self.depth == 0 {
            return Err(Error::Config(format!("{who}: widths, strides and depth must be positive")));
        }
        if ![1, 3].contains(&self.kernel) {
            return Err(Error::Config(format!("{who}: kernel must be 1 or 3, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// Everything needed to instantiate one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// Per-sample input shape `[C, H, W]`; vector inputs use `[D, 1, 1]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub net: NetSpec,
}

impl NetArch {
    /// Stable 64-bit fingerprint of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "input={:?};classes={};widths={:?};strides={:?};depth={};kernel={}",
            self.input, self.classes, self.net.widths, self.net.strides, self.net.depth, self.net.kernel
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    /// Per-sample feature shape after each block.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        self.net.validate("net")?;
        let pad = self.net.kernel / 2;
        let [mut c, mut h, mut w] = self.input;
        let mut shapes = Vec::with_capacity(self.net.blocks());
        for (i, (&width, &stride)) in self.net.widths.iter().zip(&self.net.strides).enumerate() {
            let span = |d: usize| (d + 2 * pad).checked_sub(self.net.kernel).map(|s| s / stride + 1);
            match (span(h), span(w)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::Structural {
                        block: i + 1,
                        detail: format!("input {c}x{h}x{w} too small for kernel {}", self.net.kernel),
                    })
                }
            }
            c = width;
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }
}

/// Teacher/student pairing. Both nets share input shape, class count and
/// block count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub teacher: NetSpec,
    pub student: NetSpec,
}

impl ArchSpec {
    pub fn teacher_arch(&self) -> NetArch {
        NetArch { input: self.input, classes: self.classes, net: self.teacher.clone() }
    }

    pub fn student_arch(&self) -> NetArch {
        NetArch { input: self.input, classes: self.classes, net: self.student.clone() }
    }

    pub fn blocks(&self) -> usize {
        self.teacher.blocks()
    }

    /// Named architectures used by the examples and tests.
    pub fn preset(name: &str) -> Result<ArchSpec> {
        let net = |widths: &[usize], strides: &[usize], depth, kernel| NetSpec {
            widths: widths.to_vec(),
            strides: strides.to_vec(),
            depth,
            kernel,
        };
        let spec = match name {
            "tiny-uniform" => ArchSpec {
                input: [1, 8, 8],
                classes: 4,
                teacher: net(&[16, 32, 64], &[1, 2, 2], 1, 3),
                student: net(&[8, 16, 32], &[1, 2, 2], 1, 3),
            },
            "tiny-same" => ArchSpec {
                input: [1, 8, 8],
                classes: 4,
                teacher: net(&[8, 16, 32], &[1, 2, 2], 1, 3),
                student: net(&[8, 16, 32], &[1, 2, 2], 1, 3),
            },
            "tiny-nonuniform" => ArchSpec {
                input: [1, 8, 8],
                classes: 4,
                teacher: net(&[12, 24, 48], &[1, 2, 2], 2, 3),
                student: net(&[4, 8, 16], &[1, 2, 2], 1, 3),
            },
            "toy" => ArchSpec {
                input: [1, 8, 8],
                classes: 4,
                teacher: net(&[8, 16, 32], &[1, 2, 2], 2, 3),
                student: net(&[2, 4, 8], &[1, 2, 2], 1, 3),
            },
            "mlp" => ArchSpec {
                input: [2, 1, 1],
                classes: 4,
                teacher: net(&[32, 32, 32], &[1, 1, 1], 1, 1),
                student: net(&[8, 8, 8], &[1, 1, 1], 1, 1),
            },
            other => return Err(Error::Config(format!("unknown architecture preset '{other}'"))),
        };
        Ok(spec)
    }

    pub const PRESETS: [&'static str; 5] = ["tiny-uniform", "tiny-same", "tiny-nonuniform", "toy", "mlp"];
}

pub enum Layer {
    Conv {
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        stats: RefCell<RunningStats>,
    },
    Relu,
    GlobalAvgPool,
    /// `y = x·W + b` with `W` stored `[in × out]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
}

impl Layer {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv { weight, stride, padding } => x.conv2d(weight, *stride, *padding),
            Layer::BatchNorm { gamma, beta, stats } => x.batchnorm(gamma, beta, mode, &mut stats.borrow_mut()),
            Layer::Relu => Ok(x.relu()),
            Layer::GlobalAvgPool => x.avgpool_global(),
            Layer::Dense { weight, bias } => x.matmul(weight)?.add_bias(bias),
        }
    }

    /// Named tensors: trainable parameters and (for batch norm) running stats.
    fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        match self {
            Layer::Conv { weight, .. } => out.push(StateEntry::Param(format!("{prefix}.weight"), weight.clone())),
            Layer::BatchNorm { gamma, beta, stats } => {
                out.push(StateEntry::Param(format!("{prefix}.gamma"), gamma.clone()));
                out.push(StateEntry::Param(format!("{prefix}.beta"), beta.clone()));
                let s = stats.borrow();
                out.push(StateEntry::Buffer(format!("{prefix}.running_mean"), s.mean.clone()));
                out.push(StateEntry::Buffer(format!("{prefix}.running_var"), s.var.clone()));
            }
            Layer::Dense { weight, bias } => {
                out.push(StateEntry::Param(format!("{prefix}.weight"), weight.clone()));
                out.push(StateEntry::Param(format!("{prefix}.bias"), bias.clone()));
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }

    fn deep_clone(&self, trainable: bool) -> Layer {
        let copy = |t: &Tensor| {
            let fresh = if trainable {
                Tensor::param(t.shape(), t.to_vec())
            } else {
                Tensor::new(t.shape(), t.to_vec())
            };
            fresh.expect("shape already validated").named(t.name())
        };
        match self {
            Layer::Conv { weight, stride, padding } => Layer::Conv {
                weight: copy(weight),
                stride: *stride,
                padding: *padding,
            },
            Layer::BatchNorm { gamma, beta, stats } => Layer::BatchNorm {
                gamma: copy(gamma),
                beta: copy(beta),
                stats: RefCell::new(stats.borrow().clone()),
            },
            Layer::Relu => Layer::Relu,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: copy(weight),
                bias: copy(bias),
            },
        }
    }
}

/// A named parameter tensor or a named non-trainable buffer.
pub enum StateEntry {
    Param(String, Tensor),
    Buffer(String, Vec<f64>),
}

/// Layers between two downsampling boundaries.
pub struct Block {
    pub layers: Vec<Layer>,
    /// Per-sample input shape.
    pub in_shape: Vec<usize>,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
}

impl Block {
    /// `index` is only used to label errors.
    pub fn forward(&self, x: &Tensor, mode: Mode, index: usize) -> Result<Tensor> {
        if x.ndim() < 2 || x.shape()[1..] != self.in_shape[..] {
            return Err(Error::Structural {
                block: index,
                detail: format!("expected per-sample shape {:?}, got {:?}", self.in_shape, x.shape()),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode)?;
        }
        if h.shape()[1..] != self.out_shape[..] {
            return Err(Error::Structural {
                block: index,
                detail: format!("produced {:?}, declared {:?}", h.shape(), self.out_shape),
            });
        }
        Ok(h)
    }

    fn deep_clone(&self, trainable: bool) -> Block {
        Block {
            layers: self.layers.iter().map(|l| l.deep_clone(trainable)).collect(),
            in_shape: self.in_shape.clone(),
            out_shape: self.out_shape.clone(),
        }
    }
}

fn fan_in_uniform(rng: &mut SeededRng, shape: &[usize], fan_in: usize, name: String) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform_sym(rng, bound)).collect();
    Tensor::param(shape, data).expect("positive dims").named(name)
}

fn bn_layer(channels: usize, prefix: &str) -> Layer {
    Layer::BatchNorm {
        gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("positive dims").named(format!("{prefix}.gamma")),
        beta: Tensor::param(&[channels], vec![0.0; channels]).expect("positive dims").named(format!("{prefix}.beta")),
        stats: RefCell::new(RunningStats::new(channels)),
    }
}

/// Backbone blocks plus classifier head.
pub struct CompositeNet {
    pub arch: NetArch,
    pub blocks: Vec<Block>,
    pub classifier: Block,
    frozen: bool,
}

/// Logits plus the output of every block.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

impl CompositeNet {
    /// Fresh network with fan-in uniform weights and unit/zero batch norm.
    pub fn new(arch: &NetArch, rng: &mut SeededRng) -> Result<CompositeNet> {
        if arch.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", arch.classes)));
        }
        let shapes = arch.feature_shapes()?;
        let k = arch.net.kernel;
        let pad = k / 2;
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut in_shape = arch.input.to_vec();
        for (i, shape) in shapes.iter().enumerate() {
            let mut layers = Vec::new();
            let mut c_in = in_shape[0];
            for j in 0..arch.net.depth {
                let stride = if j == 0 { arch.net.strides[i] } else { 1 };
                let prefix = format!("block{}.{}", i + 1, 3 * j);
                layers.push(Layer::Conv {
                    weight: fan_in_uniform(rng, &[shape[0], c_in, k, k], c_in * k * k, format!("{prefix}.weight")),
                    stride,
                    padding: pad,
                });
                layers.push(bn_layer(shape[0], &format!("block{}.{}", i + 1, 3 * j + 1)));
                layers.push(Layer::Relu);
                c_in = shape[0];
            }
            blocks.push(Block { layers, in_shape: in_shape.clone(), out_shape: shape.to_vec() });
            in_shape = shape.to_vec();
        }
        let width = in_shape[0];
        let classifier = Block {
            layers: vec![
                Layer::GlobalAvgPool,
                Layer::Dense {
                    weight: fan_in_uniform(rng, &[width, arch.classes], width, "classifier.1.weight".into()),
                    bias: fan_in_uniform(rng, &[arch.classes], width, "classifier.1.bias".into()),
                },
            ],
            in_shape,
            out_shape: vec![arch.classes],
        };
        Ok(CompositeNet { arch: arch.clone(), blocks, classifier, frozen: false })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Turn every parameter into a constant. Gradients still flow through
    /// the net to its inputs, and batch norm always uses running stats.
    pub fn freeze(self) -> CompositeNet {
        CompositeNet {
            arch: self.arch,
            blocks: self.blocks.iter().map(|b| b.deep_clone(false)).collect(),
            classifier: self.classifier.deep_clone(false),
            frozen: true,
        }
    }

    /// Independent copy with its own storage. The copy is trainable unless
    /// this net is frozen.
    pub fn deep_clone(&self) -> CompositeNet {
        let trainable = !self.frozen;
        CompositeNet {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(|b| b.deep_clone(trainable)).collect(),
            classifier: self.classifier.deep_clone(trainable),
            frozen: self.frozen,
        }
    }

    /// Trainable copy, e.g. a student initialized from a teacher.
    pub fn unfrozen_clone(&self) -> CompositeNet {
        CompositeNet {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(|b| b.deep_clone(true)).collect(),
            classifier: self.classifier.deep_clone(true),
            frozen: false,
        }
    }

    fn mode(&self, requested: Mode) -> Mode {
        if self.frozen {
            Mode::Eval
        } else {
            requested
        }
    }

    /// Accept `[N, C, H, W]` or a flat `[N, D]` with matching volume.
    fn shape_input(&self, x: &Tensor) -> Result<Tensor> {
        let want: Vec<usize> = self.arch.input.to_vec();
        if x.ndim() >= 2 && x.shape()[1..] == want[..] {
            return Ok(x.clone());
        }
        let per_sample: usize = x.shape()[1..].iter().product();
        if x.ndim() >= 2 && per_sample == want.iter().product::<usize>() {
            return x.reshape(&[x.shape()[0], want[0], want[1], want[2]]);
        }
        Err(Error::Structural {
            block: 1,
            detail: format!("input {:?} does not match declared {:?}", x.shape(), want),
        })
    }

    pub fn forward_with_features(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let mode = self.mode(mode);
        let mut h = self.shape_input(x)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, mode, i + 1)?;
            features.push(h.clone());
        }
        let logits = self.classifier.forward(&h, mode, self.blocks.len() + 1)?;
        Ok(ForwardOutput { logits, features })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_features(x, mode)?.logits)
    }

    /// Run the tail after block `i` (1-based): blocks `i+1..=n` then the
    /// classifier. `i == n` applies only the classifier.
    pub fn forward_tail(&self, i: usize, feature: &Tensor, mode: Mode) -> Result<Tensor> {
        if i == 0 || i > self.blocks.len() {
            return Err(Error::Usage(format!("tail index {i} outside 1..={}", self.blocks.len())));
        }
        let mode = self.mode(mode);
        let mut h = feature.clone();
        for (j, block) in self.blocks.iter().enumerate().skip(i) {
            h = block.forward(&h, mode, j + 1)?;
        }
        self.classifier.forward(&h, mode, self.blocks.len() + 1)
    }

    /// Run blocks `1..=i` only.
    pub fn forward_head(&self, i: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if i == 0 || i > self.blocks.len() {
            return Err(Error::Usage(format!("head index {i} outside 1..={}", self.blocks.len())));
        }
        let mode = self.mode(mode);
        let mut h = self.shape_input(x)?;
        for (j, block) in self.blocks.iter().enumerate().take(i) {
            h = block.forward(&h, mode, j + 1)?;
        }
        Ok(h)
    }

    /// Parameters and buffers in a fixed order.
    pub fn state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, layer) in block.layers.iter().enumerate() {
                layer.state(&format!("block{}.{}", i + 1, j), &mut out);
            }
        }
        for (j, layer) in self.classifier.layers.iter().enumerate() {
            layer.state(&format!("classifier.{j}"), &mut out);
        }
        out
    }

    /// Trainable parameters (empty for frozen nets).
    pub fn parameters(&self) -> Vec<Tensor> {
        self.state()
            .into_iter()
            .filter_map(|e| match e {
                StateEntry::Param(_, t) if t.requires_grad() => Some(t),
                _ => None,
            })
            .collect()
    }

    /// Every named tensor, parameters and buffers, as flat values.
    pub fn named_values(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.state()
            .into_iter()
            .map(|e| match e {
                StateEntry::Param(name, t) => (name, t.shape().to_vec(), t.to_vec()),
                StateEntry::Buffer(name, v) => (name, vec![v.len()], v),
            })
            .collect()
    }

    /// Overwrite a named parameter or buffer.
    pub fn set_value(&self, name: &str, values: &[f64]) -> Result<()> {
        let (prefix, field) = name.rsplit_once('.').ok_or_else(|| Error::Compatibility(format!("bad tensor name '{name}'")))?;
        let layer = self.layer_by_prefix(prefix).ok_or_else(|| Error::Compatibility(format!("unknown tensor '{name}'")))?;
        let check = |len: usize| {
            if len != values.len() {
                Err(Error::Compatibility(format!("tensor '{name}' has {len} values, file has {}", values.len())))
            } else {
                Ok(())
            }
        };
        let write = |t: &Tensor| -> Result<()> {
            check(t.numel())?;
            t.data_mut().copy_from_slice(values);
            Ok(())
        };
        match (layer, field) {
            (Layer::Conv { weight, .. }, "weight") | (Layer::Dense { weight, .. }, "weight") => write(weight),
            (Layer::Dense { bias, .. }, "bias") => write(bias),
            (Layer::BatchNorm { gamma, .. }, "gamma") => write(gamma),
            (Layer::BatchNorm { beta, .. }, "beta") => write(beta),
            (Layer::BatchNorm { stats, .. }, "running_mean") => {
                let mut s = stats.borrow_mut();
                check(s.mean.len())?;
                s.mean.copy_from_slice(values);
                Ok(())
            }
            (Layer::BatchNorm { stats, .. }, "running_var") => {
                let mut s = stats.borrow_mut();
                check(s.var.len())?;
                s.var.copy_from_slice(values);
                Ok(())
            }
            _ => Err(Error::Compatibility(format!("unknown tensor '{name}'"))),
        }
    }

    fn layer_by_prefix(&self, prefix: &str) -> Option<&Layer> {
        let (head, idx) = prefix.split_once('.')?;
        let j: usize = idx.parse().ok()?;
        let block = if head == "classifier" {
            &self.classifier
        } else {
            let i: usize = head.strip_prefix("block")?.parse().ok()?;
            self.blocks.get(i.checked_sub(1)?)?
        };
        block.layers.get(j)
    }

    /// Copy all parameters and buffers from a net of identical architecture.
    pub fn load_state_from(&self, other: &CompositeNet) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Compatibility("architectures differ".into()));
        }
        for (name, _, values) in other.named_values() {
            self.set_value(&name, &values)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }
}

/// Channel adapter `C_i`: 1×1 convolution followed by batch norm.
pub struct Connector {
    /// 1-based block index this connector serves.
    pub index: usize,
    pub in_channels: usize,
    /// Teacher feature shape at `index`, per sample.
    pub out_shape: [usize; 3],
    pub conv: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RefCell<RunningStats>,
}

impl Connector {
    pub fn new(index: usize, in_channels: usize, out_shape: [usize; 3], rng: &mut SeededRng) -> Connector {
        let c_out = out_shape[0];
        let prefix = format!("connector{index}");
        Connector {
            index,
            in_channels,
            out_shape,
            conv: fan_in_uniform(rng, &[c_out, in_channels, 1, 1], in_channels, format!("{prefix}.conv.weight")),
            gamma: Tensor::param(&[c_out], vec![1.0; c_out]).expect("positive dims").named(format!("{prefix}.bn.gamma")),
            beta: Tensor::param(&[c_out], vec![0.0; c_out]).expect("positive dims").named(format!("{prefix}.bn.beta")),
            stats: RefCell::new(RunningStats::new(c_out)),
        }
    }

    /// Square connector that is exactly the identity in eval mode: identity
    /// weights and running stats chosen so that `var + eps == 1`.
    pub fn identity(index: usize, shape: [usize; 3]) -> Connector {
        let c = shape[0];
        let mut w = vec![0.0; c * c];
        (0..c).for_each(|i| w[i * c + i] = 1.0);
        let mut stats = RunningStats::new(c);
        stats.var = vec![1.0 - stats.eps; c];
        debug_assert!(stats.var.iter().all(|v| v + stats.eps == 1.0));
        let prefix = format!("connector{index}");
        Connector {
            index,
            in_channels: c,
            out_shape: shape,
            conv: Tensor::param(&[c, c, 1, 1], w).expect("positive dims").named(format!("{prefix}.conv.weight")),
            gamma: Tensor::param(&[c], vec![1.0; c]).expect("positive dims").named(format!("{prefix}.bn.gamma")),
            beta: Tensor::param(&[c], vec![0.0; c]).expect("positive dims").named(format!("{prefix}.bn.beta")),
            stats: RefCell::new(stats),
        }
    }

    /// Map a student feature to the teacher's feature shape.
    pub fn apply(&self, f_student: &Tensor, mode: Mode) -> Result<Tensor> {
        if f_student.ndim() != 4 || f_student.shape()[1] != self.in_channels {
            return Err(Error::Structural {
                block: self.index,
                detail: format!(
                    "connector expects {} input channels, got shape {:?}",
                    self.in_channels,
                    f_student.shape()
                ),
            });
        }
        let y = f_student
            .conv2d(&self.conv, 1, 0)?
            .batchnorm(&self.gamma, &self.beta, mode, &mut self.stats.borrow_mut())?;
        if y.shape()[1..] != self.out_shape[..] {
            return Err(Error::Structural {
                block: self.index,
                detail: format!("connector produced {:?}, teacher feature is {:?}", y.shape(), self.out_shape),
            });
        }
        Ok(y)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.conv.clone(), self.gamma.clone(), self.beta.clone()]
    }

    pub fn param_count(&self) -> usize {
        self.conv.numel() + self.gamma.numel() + self.beta.numel()
    }
}

/// Output of [`build_factory_pair`].
pub struct FactoryPair {
    pub teacher: CompositeNet,
    pub student: CompositeNet,
    /// One connector per block index, in order.
    pub connectors: Vec<Connector>,
}

/// Check a teacher/student pairing and return the teacher feature shapes.
pub fn validate_pair(spec: &ArchSpec) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    spec.teacher.validate("teacher")?;
    spec.student.validate("student")?;
    if spec.teacher.blocks() != spec.student.blocks() {
        return Err(Error::Config(format!(
            "teacher has {} blocks but student has {}; block pairing requires equal counts",
            spec.teacher.blocks(),
            spec.student.blocks()
        )));
    }
    let t_shapes = spec.teacher_arch().feature_shapes()?;
    let s_shapes = spec.student_arch().feature_shapes()?;
    for (i, (t, s)) in t_shapes.iter().zip(&s_shapes).enumerate() {
        if t[1..] != s[1..] {
            return Err(Error::Config(format!(
                "block {}: teacher spatial size {:?} differs from student {:?}",
                i + 1,
                &t[1..],
                &s[1..]
            )));
        }
    }
    Ok((t_shapes, s_shapes))
}

/// Build a frozen teacher, a trainable student and one connector per block.
/// Each gets its own random stream derived from `seed`.
pub fn build_factory_pair(spec: &ArchSpec, seed: u64) -> Result<FactoryPair> {
    let (t_shapes, s_shapes) = validate_pair(spec)?;
    let teacher = CompositeNet::new(&spec.teacher_arch(), &mut substream(seed, "teacher-init"))?.freeze();
    let student = CompositeNet::new(&spec.student_arch(), &mut substream(seed, "student-init"))?;
    let connectors = build_connectors(&t_shapes, &s_shapes, &mut substream(seed, "connector-init"));
    Ok(FactoryPair { teacher, student, connectors })
}

pub fn build_connectors(t_shapes: &[[usize; 3]], s_shapes: &[[usize; 3]], rng: &mut SeededRng) -> Vec<Connector> {
    t_shapes
        .iter()
        .zip(s_shapes)
        .enumerate()
        .map(|(i, (t, s))| Connector::new(i + 1, s[0], *t, rng))
        .collect()
}

/// Convenience for tests and demos: a fresh net from a seed.
pub fn init_net(arch: &NetArch, seed: u64) -> Result<CompositeNet> {
    CompositeNet::new(arch, &mut seeded(seed))
}
