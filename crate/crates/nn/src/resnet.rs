//! ResNet18 classifier.
//!
//! Stem: 7x7/2 conv, batchnorm, relu, 3x3/2 max pool. Four stages of two
//! basic blocks with widths 64, 128, 256, 512; stages 2-4 open with a
//! stride-2 block whose shortcut is a 1x1/2 projection followed by
//! batchnorm. Global average pooling feeds a `512 x num_classes` affine head.
//!
//! Convolutions carry no bias since every one of them feeds a batchnorm.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::checkpoint::{read_archive, write_archive, Archive};
use crate::error::{invalid, NnError, Result};
use crate::ops::activation;
use crate::ops::batchnorm::{BatchNormParams, BatchStats};
use crate::ops::conv::ConvParams;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::Mode;

pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: ConvParams<T>,
    pub bn1: BatchNormParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BatchNormParams<T>,
    pub downsample: Option<(ConvParams<T>, BatchNormParams<T>)>,
}

#[derive(Debug, Clone)]
pub struct ResNet18<T> {
    pub config: ResNetConfig,
    pub stem: ConvParams<T>,
    pub stem_bn: BatchNormParams<T>,
    pub stages: Vec<Vec<BasicBlock<T>>>,
    /// `512 x num_classes`
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

/// Result of recording one forward pass on a tape.
pub struct Forward<T> {
    pub logits: Var,
    /// Parameter leaves in [`ResNet18::named_parameters`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batchnorm layer (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
    /// Activation shapes after the stem conv, max pool, each stage, the
    /// global pool and the head.
    pub trace: Vec<(String, Vec<usize>)>,
}

fn he_conv<T: Element>(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> ConvParams<T> {
    let fan_in = (in_ch * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out_ch * in_ch * k * k)
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    let w = Tensor::new(&[out_ch, in_ch, k, k], data).expect("consistent shape");
    ConvParams::new(w, None, stride, padding).expect("valid conv geometry")
}

impl<T: Element> ResNet18<T> {
    pub fn new(config: ResNetConfig) -> Result<Self> {
        if !(3..=4).contains(&config.in_channels) {
            return Err(invalid(
                "build_resnet18",
                format!("in_channels must be 3 or 4, got {}", config.in_channels),
            ));
        }
        if config.num_classes < 2 {
            return Err(invalid("build_resnet18", "num_classes must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stem = he_conv(&mut rng, 64, config.in_channels, 7, 2, 3);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 64;
        for (s, &width) in STAGE_WIDTHS.iter().enumerate() {
            let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
            for b in 0..BLOCKS_PER_STAGE {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = he_conv(&mut rng, width, in_ch, 3, stride, 1);
                let conv2 = he_conv(&mut rng, width, width, 3, 1, 1);
                let downsample = (stride != 1 || in_ch != width)
                    .then(|| (he_conv(&mut rng, width, in_ch, 1, stride, 0), BatchNormParams::new(width)));
                blocks.push(BasicBlock {
                    conv1,
                    bn1: BatchNormParams::new(width),
                    conv2,
                    bn2: BatchNormParams::new(width),
                    downsample,
                });
                in_ch = width;
            }
            stages.push(blocks);
        }
        let bound = 1.0 / (in_ch as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let fc = (0..in_ch * config.num_classes)
            .map(|_| T::from_f64(uniform.sample(&mut rng)))
            .collect();
        let mut model = Self {
            config,
            stem,
            stem_bn: BatchNormParams::new(64),
            stages,
            fc_weight: Tensor::new(&[in_ch, config.num_classes], fc)?,
            fc_bias: Tensor::zeros(&[config.num_classes]),
        };
        // running statistics start at mean 0 / variance 1
        for (_, bn) in model.batchnorms_mut() {
            bn.running_mean = Some(Tensor::zeros(&[bn.channels()]));
            bn.running_var = Some(Tensor::full(&[bn.channels()], T::one()));
        }
        Ok(model)
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("stem.conv.weight".to_string(), &self.stem.weights),
            ("stem.bn.gamma".to_string(), &self.stem_bn.gamma),
            ("stem.bn.beta".to_string(), &self.stem_bn.beta),
        ];
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                let p = format!("layer{}.{b}", s + 1);
                out.push((format!("{p}.conv1.weight"), &blk.conv1.weights));
                out.push((format!("{p}.bn1.gamma"), &blk.bn1.gamma));
                out.push((format!("{p}.bn1.beta"), &blk.bn1.beta));
                out.push((format!("{p}.conv2.weight"), &blk.conv2.weights));
                out.push((format!("{p}.bn2.gamma"), &blk.bn2.gamma));
                out.push((format!("{p}.bn2.beta"), &blk.bn2.beta));
                if let Some((conv, bn)) = &blk.downsample {
                    out.push((format!("{p}.downsample.conv.weight"), &conv.weights));
                    out.push((format!("{p}.downsample.bn.gamma"), &bn.gamma));
                    out.push((format!("{p}.downsample.bn.beta"), &bn.beta));
                }
            }
        }
        out.push(("fc.weight".to_string(), &self.fc_weight));
        out.push(("fc.bias".to_string(), &self.fc_bias));
        out
    }

    /// Same order as [`Self::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.stem.weights,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for blocks in &mut self.stages {
            for blk in blocks {
                out.push(&mut blk.conv1.weights);
                out.push(&mut blk.bn1.gamma);
                out.push(&mut blk.bn1.beta);
                out.push(&mut blk.conv2.weights);
                out.push(&mut blk.bn2.gamma);
                out.push(&mut blk.bn2.beta);
                if let Some((conv, bn)) = &mut blk.downsample {
                    out.push(&mut conv.weights);
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Batchnorm layers in forward order.
    pub fn batchnorms(&self) -> Vec<(String, &BatchNormParams<T>)> {
        let mut out = vec![("stem.bn".to_string(), &self.stem_bn)];
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                let p = format!("layer{}.{b}", s + 1);
                out.push((format!("{p}.bn1"), &blk.bn1));
                out.push((format!("{p}.bn2"), &blk.bn2));
                if let Some((_, bn)) = &blk.downsample {
                    out.push((format!("{p}.downsample.bn"), bn));
                }
            }
        }
        out
    }

    pub fn batchnorms_mut(&mut self) -> Vec<(String, &mut BatchNormParams<T>)> {
        let mut out = vec![("stem.bn".to_string(), &mut self.stem_bn)];
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                let p = format!("layer{}.{b}", s + 1);
                out.push((format!("{p}.bn1"), &mut blk.bn1));
                out.push((format!("{p}.bn2"), &mut blk.bn2));
                if let Some((_, bn)) = &mut blk.downsample {
                    out.push((format!("{p}.downsample.bn"), bn));
                }
            }
        }
        out
    }

    /// Number of learnable scalars; running statistics are not counted.
    pub fn count_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for (_, bn) in self.batchnorms_mut() {
            bn.mode = mode;
        }
    }

    /// Records a forward pass. `mode` overrides the per-layer batchnorm mode.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a, T>, input: Var, mode: Mode) -> Result<Forward<T>> {
        let shape = tape.value(input).dims4("resnet18")?;
        if shape.1 != self.config.in_channels {
            return Err(NnError::ShapeMismatch {
                op: "resnet18",
                dim: "input channels",
                expected: self.config.in_channels,
                actual: shape.1,
            });
        }
        let mut rec = Recorder {
            mode,
            params: Vec::new(),
            batch_stats: Vec::new(),
        };
        let mut trace = Vec::new();
        let x = rec.conv(tape, &self.stem, input)?;
        trace.push(("stem.conv".to_string(), tape.value(x).shape().to_vec()));
        let x = rec.bn(tape, &self.stem_bn, x)?;
        let x = tape.relu(x)?;
        let mut x = tape.maxpool2d(x, 3, 2, 1)?;
        trace.push(("stem.maxpool".to_string(), tape.value(x).shape().to_vec()));
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                x = rec.block(tape, blk, x)?;
            }
            trace.push((format!("layer{}", s + 1), tape.value(x).shape().to_vec()));
        }
        let pooled = tape.global_avgpool(x)?;
        trace.push(("avgpool".to_string(), tape.value(pooled).shape().to_vec()));
        let w = tape.param(&self.fc_weight)?;
        let b = tape.param(&self.fc_bias)?;
        rec.params.push(w);
        rec.params.push(b);
        let logits = tape.linear(pooled, w, b)?;
        trace.push(("fc".to_string(), tape.value(logits).shape().to_vec()));
        Ok(Forward {
            logits,
            params: rec.params,
            batch_stats: rec.batch_stats,
            trace,
        })
    }

    /// Runs a forward pass; train mode updates the running statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (logits, stats) = {
            let mut tape = Tape::new();
            let x = tape.constant(batch)?;
            let f = self.forward_tape(&mut tape, x, mode)?;
            (tape.value(f.logits).clone(), f.batch_stats)
        };
        self.apply_batch_stats(&stats);
        Ok(logits)
    }

    /// Eval-mode logits and class probabilities.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch)?;
        let f = self.forward_tape(&mut tape, x, Mode::Eval)?;
        let logits = tape.value(f.logits).clone();
        let probs = activation::softmax(&logits)?;
        Ok((logits, probs))
    }

    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        for ((_, bn), s) in self.batchnorms_mut().into_iter().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Moves leaf gradients from `grads` into each parameter's `grad` buffer.
    pub fn store_gradients(&mut self, grads: &mut Gradients<T>, vars: &[Var]) -> Result<()> {
        let params = self.parameters_mut();
        if params.len() != vars.len() {
            return Err(NnError::ShapeMismatch {
                op: "store_gradients",
                dim: "parameter count",
                expected: params.len(),
                actual: vars.len(),
            });
        }
        for (p, &v) in params.into_iter().zip(vars) {
            match grads.take(v) {
                Some(g) => p.set_grad(g)?,
                None => p.zero_grad(),
            }
        }
        Ok(())
    }

    fn archive_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.named_parameters();
        for (name, bn) in self.batchnorms() {
            if let (Some(m), Some(v)) = (&bn.running_mean, &bn.running_var) {
                out.push((format!("{name}.running_mean"), m));
                out.push((format!("{name}.running_var"), v));
            }
        }
        out
    }

    /// Writes a checkpoint with the architecture config plus `extra` metadata.
    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut meta = vec![
            ("arch".to_string(), "resnet18".to_string()),
            ("in_channels".to_string(), self.config.in_channels.to_string()),
            ("num_classes".to_string(), self.config.num_classes.to_string()),
            ("seed".to_string(), self.config.seed.to_string()),
        ];
        meta.extend_from_slice(extra);
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write_archive(&mut w, &meta, &self.archive_tensors())?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Archive)> {
        let file = std::fs::File::open(path)?;
        let archive = read_archive(BufReader::new(file))?;
        let model = Self::from_archive(&archive)?;
        Ok((model, archive))
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let parse = |key: &str| -> Result<u64> {
            archive
                .meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| NnError::Checkpoint(format!("missing or invalid meta {key}")))
        };
        if archive.meta("arch") != Some("resnet18") {
            return Err(NnError::Checkpoint("not a resnet18 checkpoint".into()));
        }
        let config = ResNetConfig {
            in_channels: parse("in_channels")? as usize,
            num_classes: parse("num_classes")? as usize,
            seed: parse("seed")?,
        };
        let mut model = Self::new(config)?;
        let fetch = |name: &str, expect: &[usize]| -> Result<Tensor<T>> {
            let t = archive
                .tensor(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != expect {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {expect:?}",
                    t.shape()
                )));
            }
            Ok(t.cast())
        };
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.parameters_mut()) {
            *p = fetch(name, p.shape())?;
        }
        for (name, bn) in model.batchnorms_mut() {
            let c = [bn.channels()];
            bn.running_mean = Some(fetch(&format!("{name}.running_mean"), &c)?);
            bn.running_var = Some(fetch(&format!("{name}.running_var"), &c)?);
        }
        Ok(model)
    }
}

struct Recorder<T> {
    mode: Mode,
    params: Vec<Var>,
    batch_stats: Vec<BatchStats<T>>,
}

impl<T: Element> Recorder<T> {
    fn conv<'a>(&mut self, tape: &mut Tape<'a, T>, conv: &'a ConvParams<T>, x: Var) -> Result<Var> {
        let w = tape.param(&conv.weights)?;
        self.params.push(w);
        let b = match &conv.bias {
            Some(b) => {
                let v = tape.param(b)?;
                self.params.push(v);
                Some(v)
            }
            None => None,
        };
        tape.conv2d(x, w, b, conv.stride, conv.padding)
    }

    fn bn<'a>(&mut self, tape: &mut Tape<'a, T>, bn: &'a BatchNormParams<T>, x: Var) -> Result<Var> {
        let g = tape.param(&bn.gamma)?;
        let b = tape.param(&bn.beta)?;
        self.params.push(g);
        self.params.push(b);
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, bn.eps)?;
                self.batch_stats.push(stats);
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = bn.running()?;
                tape.batchnorm_eval(x, g, b, mean, var, bn.eps)
            }
        }
    }

    /// `relu(F(x) + shortcut(x))` with `F = conv-bn-relu-conv-bn`.
    fn block<'a>(&mut self, tape: &mut Tape<'a, T>, blk: &'a BasicBlock<T>, x: Var) -> Result<Var> {
        let h = self.conv(tape, &blk.conv1, x)?;
        let h = self.bn(tape, &blk.bn1, h)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, &blk.conv2, h)?;
        let h = self.bn(tape, &blk.bn2, h)?;
        let shortcut = match &blk.downsample {
            Some((conv, bn)) => {
                let s = self.conv(tape, conv, x)?;
                self.bn(tape, bn, s)?
            }
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        tape.relu(sum)
    }
}
