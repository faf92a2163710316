//! MicroResNet: a small residual classifier with four freezable blocks.
//!
//! Layout: a stride-2 conv/bn/relu stem, four residual blocks (each one
//! residual unit with a 1x1 projection shortcut, stride 2), global average
//! pooling and a linear head. A 64x64 input reaches the head as 2x2 maps.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormConfig, BatchStats, BnMode, Gradients, Graph, RunningStats, Scalar, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, Provenance, FORMAT_VERSION, MAGIC,
};

pub const NUM_BLOCKS: usize = 4;
pub const DEFAULT_WIDTHS: [usize; NUM_BLOCKS] = [16, 32, 64, 128];
const STEM_STRIDE: usize = 2;
const BLOCK_STRIDE: usize = 2;
const HEAD_SALT: u64 = 0x4ead_5eed_0000_0001;

/// Whether a forward pass trains (batch statistics in unfrozen units) or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that maps an NCHW batch to logits; the attack works against this.
pub trait Classifier<T: Scalar> {
    fn num_classes(&self) -> usize;

    /// Eval-mode logits with parameters held constant.
    fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Convolution followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Leaves and batch statistics gathered during one forward pass.
pub struct ForwardPass<T> {
    pub logits: Var,
    params: Vec<Var>,
    batch_stats: Vec<Option<BatchStats<T>>>,
}

struct PassState<T> {
    track_params: bool,
    params: Vec<Var>,
    batch_stats: Vec<Option<BatchStats<T>>>,
}

fn he_normal<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(dims.to_vec(), values).expect("dims match")
}

impl<T: Scalar> ConvBn<T> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_normal(&[cout, cin, k, k], cin * k * k, rng).with_grad(true),
            gamma: Tensor::full(&[cout], T::one()).with_grad(true),
            beta: Tensor::zeros(&[cout]).with_grad(true),
            stats: RunningStats::new(cout),
            stride,
            pad: k / 2,
        }
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn_mode: BnMode,
        bn: BatchNormConfig,
        st: &mut PassState<T>,
    ) -> Result<Var> {
        let mut bind = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = g.leaf_copy(t, st.track_params && t.requires_grad);
            st.params.push(v);
            v
        };
        let w = bind(g, &self.weight);
        let gm = bind(g, &self.gamma);
        let bt = bind(g, &self.beta);
        let h = g.conv2d(x, w, self.stride, self.pad)?;
        let (y, batch) = g.batchnorm2d(h, gm, bt, &self.stats, bn_mode, bn)?;
        st.batch_stats.push(batch);
        Ok(y)
    }

    fn set_trainable(&mut self, on: bool) {
        self.weight.requires_grad = on;
        self.gamma.requires_grad = on;
        self.beta.requires_grad = on;
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bn.gamma"), &self.gamma));
        out.push((format!("{prefix}.bn.beta"), &self.beta));
        out.push((format!("{prefix}.bn.running_mean"), &self.stats.mean));
        out.push((format!("{prefix}.bn.running_var"), &self.stats.var));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bn.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.bn.beta"), &mut self.beta));
        out.push((format!("{prefix}.bn.running_mean"), &mut self.stats.mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.stats.var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bn.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.bn.beta"), &mut self.beta));
    }
}

/// One residual unit: two conv-bn pairs plus a projection shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    /// `None` means identity; only used when stride is 1 and widths agree.
    pub shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = ConvBn::new(cin, cout, 3, stride, rng);
        let conv2 = ConvBn::new(cout, cout, 3, 1, rng);
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng));
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn units(&self) -> impl Iterator<Item = (&'static str, &ConvBn<T>)> {
        [("conv1", Some(&self.conv1)), ("conv2", Some(&self.conv2)), ("shortcut", self.shortcut.as_ref())]
            .into_iter()
            .filter_map(|(n, u)| u.map(|u| (n, u)))
    }

    fn units_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut ConvBn<T>)> {
        [
            ("conv1", Some(&mut self.conv1)),
            ("conv2", Some(&mut self.conv2)),
            ("shortcut", self.shortcut.as_mut()),
        ]
        .into_iter()
        .filter_map(|(n, u)| u.map(|u| (n, u)))
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn_mode: BnMode,
        bn: BatchNormConfig,
        st: &mut PassState<T>,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, x, bn_mode, bn, st)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h, bn_mode, bn, st)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(g, x, bn_mode, bn, st)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// Global-pool + linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    fn new(features: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_normal(&[classes, features], features, rng).with_grad(true),
            bias: Tensor::zeros(&[classes]).with_grad(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroResNet<T> {
    widths: [usize; NUM_BLOCKS],
    num_classes: usize,
    frozen_prefix: usize,
    pub bn: BatchNormConfig,
    pub stem: ConvBn<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Head<T>,
}

pub type Model<T> = MicroResNet<T>;

/// Parameter count of a MicroResNet built from `widths` for `num_classes`.
pub fn parameter_count(widths: &[usize; NUM_BLOCKS], num_classes: usize) -> usize {
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let mut total = conv_bn(3, widths[0], 3);
    let mut cin = widths[0];
    for &cout in widths {
        total += conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3);
        if BLOCK_STRIDE != 1 || cin != cout {
            total += conv_bn(cin, cout, 1);
        }
        cin = cout;
    }
    total + cin * num_classes + num_classes
}

impl<T: Scalar> MicroResNet<T> {
    /// Deterministic He-initialized model.
    pub fn build(widths: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let widths: [usize; NUM_BLOCKS] = widths.try_into().map_err(|_| {
            Error::config(format!("expected {NUM_BLOCKS} block widths, got {}", widths.len()))
        })?;
        if widths.contains(&0) {
            return Err(Error::config(format!("block widths must be positive, got {widths:?}")));
        }
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvBn::new(3, widths[0], 3, STEM_STRIDE, &mut rng);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = widths[0];
        for &cout in &widths {
            blocks.push(ResidualBlock::new(cin, cout, BLOCK_STRIDE, &mut rng));
            cin = cout;
        }
        let head = Head::new(cin, num_classes, &mut rng);
        Ok(Self {
            widths,
            num_classes,
            frozen_prefix: 0,
            bn: BatchNormConfig::default(),
            stem,
            blocks,
            head,
        })
    }

    pub fn widths(&self) -> [usize; NUM_BLOCKS] {
        self.widths
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    /// Freezes the stem and blocks `1..=l`; everything after stays trainable.
    pub fn freeze_prefix(&mut self, l: usize) -> Result<()> {
        if l > NUM_BLOCKS {
            return Err(Error::config(format!("frozen prefix must be in 0..={NUM_BLOCKS}, got {l}")));
        }
        self.frozen_prefix = l;
        self.stem.set_trainable(l == 0);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (_, unit) in block.units_mut() {
                unit.set_trainable(i >= l);
            }
        }
        self.head.weight.requires_grad = true;
        self.head.bias.requires_grad = true;
        Ok(())
    }

    /// Reinitializes the head for a new class count; the backbone is untouched.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SALT);
        self.head = Head::new(self.widths[NUM_BLOCKS - 1], num_classes, &mut rng);
        self.num_classes = num_classes;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// All state (parameters and running statistics) in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.tensors("stem", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, unit) in block.units() {
                unit.tensors(&format!("blocks.{i}.{name}"), &mut out);
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.tensors_mut("stem", &mut out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, unit) in block.units_mut() {
                unit.tensors_mut(&format!("blocks.{i}.{name}"), &mut out);
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Learnable tensors in forward-binding order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.params_mut("stem", &mut out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, unit) in block.units_mut() {
                unit.params_mut(&format!("blocks.{i}.{name}"), &mut out);
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    fn bn_units_mut(&mut self) -> Vec<&mut ConvBn<T>> {
        let mut out = vec![&mut self.stem];
        for block in &mut self.blocks {
            out.extend(block.units_mut().map(|(_, u)| u));
        }
        out
    }

    /// Records the forward computation on `g`.
    ///
    /// In [`Mode::Train`] unfrozen units normalize with batch statistics and
    /// trainable parameters become gradient-tracked leaves; frozen units
    /// always behave as in eval mode. `track_params` can disable parameter
    /// gradients entirely (input-gradient computations).
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, track_params: bool) -> Result<ForwardPass<T>> {
        let dims = g.value(x).dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::config(format!("expected N x 3 x H x W input, got {dims:?}")));
        }
        let mut st = PassState {
            track_params,
            params: Vec::new(),
            batch_stats: Vec::new(),
        };
        let unit_mode = |frozen: bool| {
            if mode == Mode::Train && !frozen {
                BnMode::Train
            } else {
                BnMode::Eval
            }
        };
        let h = self.stem.forward(g, x, unit_mode(self.frozen_prefix >= 1), self.bn, &mut st)?;
        let mut h = g.relu(h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, unit_mode(i < self.frozen_prefix), self.bn, &mut st)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let mut bind = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = g.leaf_copy(t, track_params && t.requires_grad);
            st.params.push(v);
            v
        };
        let hw = bind(g, &self.head.weight);
        let hb = bind(g, &self.head.bias);
        let logits = g.linear(pooled, hw, hb)?;
        Ok(ForwardPass {
            logits,
            params: st.params,
            batch_stats: st.batch_stats,
        })
    }

    /// Stores gradients from `grads` into the `grad` slot of each trainable tensor.
    pub fn collect_gradients(&mut self, pass: &ForwardPass<T>, grads: &mut Gradients<T>) {
        let params = self.named_parameters_mut();
        debug_assert_eq!(params.len(), pass.params.len());
        for ((_, tensor), &v) in params.into_iter().zip(&pass.params) {
            tensor.grad = grads.take(v);
        }
    }

    /// Applies the running-statistics update for every unit normalized in train mode.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass<T>) {
        let momentum = self.bn.momentum;
        for (unit, batch) in self.bn_units_mut().into_iter().zip(&pass.batch_stats) {
            if let Some(batch) = batch {
                unit.stats.update(batch, momentum);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.grad = None;
        }
    }

    /// Eval-mode logits for a batch, as a plain tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf_copy(x, false);
        let pass = self.forward(&mut g, xv, Mode::Eval, false)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Bitwise equality of all state tensors.
    pub fn state_bit_eq(&self, other: &Self) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

impl<T: Scalar> Classifier<T> for MicroResNet<T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(self.forward(g, x, Mode::Eval, false)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_config() {
        assert!(MicroResNet::<f32>::build(&[16, 0, 64, 128], 4, 0).is_err());
        assert!(MicroResNet::<f32>::build(&[16, 32, 64], 4, 0).is_err());
        assert!(MicroResNet::<f32>::build(&[16, 32, 64, 128], 1, 0).is_err());
    }

    #[test]
    fn freeze_out_of_range() {
        let mut m = MicroResNet::<f32>::build(&[2, 2, 2, 2], 3, 0).unwrap();
        assert!(m.freeze_prefix(5).is_err());
        m.freeze_prefix(4).unwrap();
        let trainable: Vec<String> = m
            .named_parameters_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n)
            .collect();
        assert_eq!(trainable, vec!["head.weight", "head.bias"]);
        m.freeze_prefix(0).unwrap();
        assert!(m.named_parameters_mut().iter().all(|(_, t)| t.requires_grad));
    }

    #[test]
    fn stem_freezes_with_block_one() {
        let mut m = MicroResNet::<f32>::build(&[2, 2, 2, 2], 3, 0).unwrap();
        m.freeze_prefix(1).unwrap();
        for (name, t) in m.named_parameters_mut() {
            let frozen = name.starts_with("stem") || name.starts_with("blocks.0.");
            assert_eq!(t.requires_grad, !frozen, "{name}");
        }
    }
}
