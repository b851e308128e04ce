//! The network: residual grid blocks assembled into a classifier.
//!
//! One block computes `y = F(x) + x` where `F` routes the input through a
//! lattice of small convolutional units (see [`crate::topology`]):
//!
//! 1. *split* — a 1x1 convolution plus batch norm widens `x` to the sum of
//!    all unit input widths, and the result is sliced into one band per
//!    unit (bands follow the evaluation order of the units);
//! 2. *grid* — each unit averages its band with the outputs of its
//!    in-neighbors (the average keeps signal magnitude independent of the
//!    in-degree) and applies `unit_depth` stages of 3x3 convolution,
//!    batch norm, and ReLU;
//! 3. *join* — the unit outputs are concatenated, and a 1x1 convolution
//!    plus batch norm plus ReLU projects them back to the block width.
//!
//! The full network is a plain 3x3 stem convolution, `blocks` grid blocks
//! with doubling widths, an average-pool/1x1-conv/batch-norm transition
//! between consecutive blocks (halving the spatial extent), global average
//! pooling, and a fully connected head.

use crate::error::{Error, Result};
use crate::rng::GaussianSource;
use crate::tensor::{
    channel_concat, mean_combine, BatchNormState, ConvParams, LinearParams, Scalar, Tensor,
};
use crate::topology::{
    channel_in, channel_out, neighbors_in, split_width, topological_order, GridSpec, UnitCoord,
};

/// Static description of a network: grid geometry plus classifier facts.
///
/// `base_channels` is the channel scale `k`: block `i` ramps its unit
/// widths from `k * 2^i` to `2k * 2^i` and carries `2k * 2^i` channels on
/// its residual stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Lattice dimensionality of every block.
    pub dims: usize,
    /// Units per lattice axis.
    pub side: usize,
    /// Channel scale `k`.
    pub base_channels: usize,
    /// Number of grid blocks (transitions sit between consecutive blocks).
    pub blocks: usize,
    /// Convolution stages inside each unit.
    pub unit_depth: usize,
    /// Classifier output count.
    pub classes: usize,
    /// Height and width of the (square) input images.
    pub image_size: usize,
    /// Channels of the input images.
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            dims: 2,
            side: 4,
            base_channels: 16,
            blocks: 3,
            unit_depth: 1,
            classes: 10,
            image_size: 32,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    /// Checks every structural constraint.
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.side == 0 {
            return Err(Error::Config("grid dims and side must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.unit_depth == 0 {
            return Err(Error::Config("unit_depth must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        let halvings = self.blocks - 1;
        let divisor = 1usize
            .checked_shl(halvings as u32)
            .ok_or_else(|| Error::Config(format!("{} blocks stack too many halvings", self.blocks)))?;
        if self.image_size == 0 || self.image_size % divisor != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the {halvings} halvings between blocks",
                self.image_size
            )));
        }
        // Building the spec revalidates the channel ramp per block.
        for i in 0..self.blocks {
            self.block_spec(i)?;
        }
        Ok(())
    }

    /// Grid spec of block `i`: widths `k * 2^i` to `2k * 2^i`.
    pub fn block_spec(&self, i: usize) -> Result<GridSpec> {
        let scale = 1usize.checked_shl(i as u32).ok_or_else(|| {
            Error::Config(format!("block index {i} overflows the width doubling"))
        })?;
        let c_min = self.base_channels.checked_mul(scale).ok_or_else(|| {
            Error::Config(format!("block {i} channel width overflows"))
        })?;
        GridSpec::new(self.dims, self.side, c_min, 2 * c_min)
    }

    /// Residual stream width of block `i`, `2k * 2^i`.
    pub fn block_width(&self, i: usize) -> usize {
        2 * self.base_channels << i
    }

    /// Spatial extent of the feature maps entering block `i`.
    pub fn block_image_size(&self, i: usize) -> usize {
        self.image_size >> i
    }

    /// Canonical `key = value` rendering; checkpoints digest and embed it,
    /// and the config parser accepts it back.
    pub fn canonical_text(&self) -> String {
        format!(
            "base_channels = {}\nblocks = {}\nclasses = {}\ndims = {}\nimage_size = {}\ninput_channels = {}\nside = {}\nunit_depth = {}\n",
            self.base_channels,
            self.blocks,
            self.classes,
            self.dims,
            self.image_size,
            self.input_channels,
            self.side,
            self.unit_depth,
        )
    }
}

/// How the optimizer should treat one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight: weight decay applies.
    DecayedWeight,
    /// Bias or batch-norm scale/shift: no weight decay.
    PlainParam,
    /// Running statistic: not trained at all, but serialized.
    Buffer,
}

/// A named tensor discovered by the parameter walk.
pub struct StateEntry<S: Scalar> {
    /// Stable hierarchical name, e.g. `block0.unit1-0.stage0.conv.weight`.
    pub name: String,
    /// The tensor itself (a shared handle).
    pub tensor: Tensor<S>,
    /// Trainability/decay classification.
    pub kind: ParamKind,
}

/// The split projection: widen, normalize, slice into per-unit bands.
struct SplitLayer<S: Scalar> {
    conv: ConvParams<S>,
    bn: BatchNormState<S>,
    bands: Vec<(usize, usize)>,
}

impl<S: Scalar> SplitLayer<S> {
    fn new(spec: &GridSpec, block_width: usize) -> Result<Self> {
        let total = split_width(spec)?;
        let mut bands = Vec::new();
        let mut offset = 0;
        for coord in topological_order(spec)? {
            let width = channel_in(spec, &coord)?;
            bands.push((offset, width));
            offset += width;
        }
        debug_assert_eq!(offset, total);
        Ok(SplitLayer {
            conv: ConvParams::new(total, block_width, 1, 1, 0, false)?,
            bn: BatchNormState::new(total)?,
            bands,
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        x.conv2d(&self.conv)?.batch_norm(&self.bn)?.channel_slice(&self.bands)
    }
}

/// One processing unit: average the incoming signals, then `unit_depth`
/// stages of 3x3 convolution, batch norm, ReLU.
pub struct GridUnit<S: Scalar> {
    coord: UnitCoord,
    stages: Vec<(ConvParams<S>, BatchNormState<S>)>,
    in_channels: usize,
    out_channels: usize,
}

impl<S: Scalar> GridUnit<S> {
    fn new(spec: &GridSpec, coord: UnitCoord, unit_depth: usize) -> Result<Self> {
        let in_channels = channel_in(spec, &coord)?;
        let out_channels = channel_out(spec, &coord)?;
        let mut stages = Vec::with_capacity(unit_depth);
        for stage in 0..unit_depth {
            let cin = if stage == 0 { in_channels } else { out_channels };
            stages.push((
                ConvParams::new(out_channels, cin, 3, 1, 1, false)?,
                BatchNormState::new(out_channels)?,
            ));
        }
        Ok(GridUnit { coord, stages, in_channels, out_channels })
    }

    /// Lattice position of this unit.
    pub fn coord(&self) -> &UnitCoord {
        &self.coord
    }

    /// Width of the averaged input signal.
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Width of the unit output.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Applies the unit to its split band plus the in-neighbor outputs
    /// (ordered by lattice axis).
    fn forward(&self, band: &Tensor<S>, incoming: &[Tensor<S>]) -> Result<Tensor<S>> {
        let mut signals = Vec::with_capacity(1 + incoming.len());
        signals.push(band.clone());
        signals.extend(incoming.iter().cloned());
        for s in &signals {
            if s.dims()[1] != self.in_channels {
                return Err(Error::InvalidInput(format!(
                    "unit {} expects {}-channel signals, got {}",
                    self.coord,
                    self.in_channels,
                    s.dims()[1]
                )));
            }
        }
        let mut h = mean_combine(&signals)?;
        for (conv, bn) in &self.stages {
            h = h.conv2d(conv)?.batch_norm(bn)?.relu();
        }
        Ok(h)
    }
}

/// The join projection: concatenate unit outputs, narrow back to the block
/// width, normalize, activate.
struct JoinLayer<S: Scalar> {
    conv: ConvParams<S>,
    bn: BatchNormState<S>,
}

impl<S: Scalar> JoinLayer<S> {
    fn new(spec: &GridSpec, block_width: usize) -> Result<Self> {
        let total = crate::topology::join_width(spec)?;
        Ok(JoinLayer {
            conv: ConvParams::new(block_width, total, 1, 1, 0, false)?,
            bn: BatchNormState::new(block_width)?,
        })
    }

    fn forward(&self, units: &[Tensor<S>]) -> Result<Tensor<S>> {
        Ok(channel_concat(units)?.conv2d(&self.conv)?.batch_norm(&self.bn)?.relu())
    }
}

/// One residual grid block.
pub struct GridBlock<S: Scalar> {
    spec: GridSpec,
    split: SplitLayer<S>,
    units: Vec<GridUnit<S>>,
    /// For each unit (in evaluation order), the indices of its in-neighbor
    /// units, ordered by lattice axis. Wired once at construction.
    wiring: Vec<Vec<usize>>,
    join: JoinLayer<S>,
}

impl<S: Scalar> GridBlock<S> {
    /// Builds a block with zeroed weights (initialize or load afterwards).
    pub fn new(spec: GridSpec, block_width: usize, unit_depth: usize) -> Result<Self> {
        let order = topological_order(&spec)?;
        let position: std::collections::HashMap<&UnitCoord, usize> =
            order.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let mut units = Vec::with_capacity(order.len());
        let mut wiring = Vec::with_capacity(order.len());
        for coord in &order {
            let mut sources = Vec::new();
            for q in neighbors_in(&spec, coord)? {
                let qi = position[&q];
                debug_assert!(qi < units.len() + 1, "evaluation order must respect edges");
                sources.push(qi);
            }
            wiring.push(sources);
            units.push(GridUnit::new(&spec, coord.clone(), unit_depth)?);
        }
        let split = SplitLayer::new(&spec, block_width)?;
        let join = JoinLayer::new(&spec, block_width)?;
        Ok(GridBlock { spec, split, units, wiring, join })
    }

    /// The lattice geometry this block was built from.
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Units in evaluation order.
    pub fn units(&self) -> &[GridUnit<S>] {
        &self.units
    }

    /// In-neighbor indices per unit, aligned with [`GridBlock::units`].
    pub fn wiring(&self) -> &[Vec<usize>] {
        &self.wiring
    }

    /// Runs the block: `join(grid(split(x))) + x`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let bands = self.split.forward(x)?;
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(self.units.len());
        for (i, unit) in self.units.iter().enumerate() {
            let incoming: Vec<Tensor<S>> =
                self.wiring[i].iter().map(|&j| outputs[j].clone()).collect();
            outputs.push(unit.forward(&bands[i], &incoming)?);
        }
        self.join.forward(&outputs)?.add(x)
    }

    /// Walks every tensor of the block (weights, normalization parameters,
    /// running statistics) under hierarchical names rooted at `prefix`.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>, ParamKind)) {
        f(format!("{prefix}.split.conv.weight"), self.split.conv.weight(), ParamKind::DecayedWeight);
        visit_bn(&format!("{prefix}.split.bn"), &self.split.bn, f);
        for unit in &self.units {
            for (stage, (conv, bn)) in unit.stages.iter().enumerate() {
                let base = format!("{prefix}.unit{}.stage{stage}", unit.coord);
                f(format!("{base}.conv.weight"), conv.weight(), ParamKind::DecayedWeight);
                visit_bn(&format!("{base}.bn"), bn, f);
            }
        }
        f(format!("{prefix}.join.conv.weight"), self.join.conv.weight(), ParamKind::DecayedWeight);
        visit_bn(&format!("{prefix}.join.bn"), &self.join.bn, f);
    }

    /// Switches every batch-norm layer in the block between batch
    /// statistics (training) and running statistics (inference).
    pub fn set_training(&self, training: bool) {
        self.split.bn.set_training(training);
        for unit in &self.units {
            for (_, bn) in &unit.stages {
                bn.set_training(training);
            }
        }
        self.join.bn.set_training(training);
    }
}

/// Downsampling bridge between consecutive blocks: average pool by 2, then
/// a 1x1 convolution plus batch norm onto the next block's width.
struct Transition<S: Scalar> {
    conv: ConvParams<S>,
    bn: BatchNormState<S>,
}

impl<S: Scalar> Transition<S> {
    fn new(from_width: usize, to_width: usize) -> Result<Self> {
        Ok(Transition {
            conv: ConvParams::new(to_width, from_width, 1, 1, 0, false)?,
            bn: BatchNormState::new(to_width)?,
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.avg_pool2d(2, 2)?.conv2d(&self.conv)?.batch_norm(&self.bn)
    }
}

fn visit_bn<S: Scalar>(
    prefix: &str,
    bn: &BatchNormState<S>,
    f: &mut dyn FnMut(String, &Tensor<S>, ParamKind),
) {
    f(format!("{prefix}.gamma"), bn.gamma(), ParamKind::PlainParam);
    f(format!("{prefix}.beta"), bn.beta(), ParamKind::PlainParam);
    f(format!("{prefix}.running_mean"), bn.running_mean(), ParamKind::Buffer);
    f(format!("{prefix}.running_var"), bn.running_var(), ParamKind::Buffer);
}

/// The full classifier network.
pub struct SwGridNetwork<S: Scalar> {
    config: NetworkConfig,
    stem: ConvParams<S>,
    blocks: Vec<GridBlock<S>>,
    transitions: Vec<Transition<S>>,
    head: LinearParams<S>,
}

impl<S: Scalar> std::fmt::Debug for SwGridNetwork<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SwGridNetwork")
            .field("config", &self.config)
            .field("parameters", &self.param_count())
            .finish()
    }
}

impl<S: Scalar> SwGridNetwork<S> {
    /// Builds the network with zeroed weights.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvParams::new(config.block_width(0), config.input_channels, 3, 1, 1, true)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut transitions = Vec::new();
        for i in 0..config.blocks {
            blocks.push(GridBlock::new(
                config.block_spec(i)?,
                config.block_width(i),
                config.unit_depth,
            )?);
            if i + 1 < config.blocks {
                transitions.push(Transition::new(config.block_width(i), config.block_width(i + 1))?);
            }
        }
        let head = LinearParams::new(config.classes, config.block_width(config.blocks - 1), true)?;
        Ok(SwGridNetwork { config, stem, blocks, transitions, head })
    }

    /// Builds and initializes the network from a seed.
    pub fn seeded(config: NetworkConfig, seed: u64) -> Result<Self> {
        let net = Self::new(config)?;
        net.init_weights(seed);
        Ok(net)
    }

    /// The static description this network was built from.
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// The grid blocks, outermost structure for inspection in tests.
    pub fn blocks(&self) -> &[GridBlock<S>] {
        &self.blocks
    }

    /// Classifier logits for a batch of images shaped
    /// `(batch, input_channels, image_size, image_size)`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, c, h, w) = x.shape().nchw()?;
        if c != self.config.input_channels
            || h != self.config.image_size
            || w != self.config.image_size
        {
            return Err(Error::InvalidInput(format!(
                "network expects {}x{}x{} images, got {}x{h}x{w}",
                self.config.input_channels, self.config.image_size, self.config.image_size, c
            )));
        }
        let mut feat = x.conv2d(&self.stem)?;
        for (i, block) in self.blocks.iter().enumerate() {
            feat = block.forward(&feat)?;
            if let Some(transition) = self.transitions.get(i) {
                feat = transition.forward(&feat)?;
            }
        }
        let pooled = feat.global_avg_pool()?;
        let flat = pooled.reshape(&[b, self.config.block_width(self.config.blocks - 1)])?;
        flat.linear(&self.head)
    }

    /// Switches every batch-norm layer between batch statistics (training)
    /// and running statistics (inference).
    pub fn set_training(&self, training: bool) {
        for block in &self.blocks {
            block.set_training(training);
        }
        for t in &self.transitions {
            t.bn.set_training(training);
        }
    }

    /// Visits every named tensor in a fixed, documented order: stem, then
    /// each block (split, units in evaluation order, join) followed by its
    /// transition, then the head. Serialization and initialization both
    /// walk this order.
    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor<S>, ParamKind)) {
        f("stem.weight".into(), self.stem.weight(), ParamKind::DecayedWeight);
        if let Some(bias) = self.stem.bias() {
            f("stem.bias".into(), bias, ParamKind::PlainParam);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit_state(&format!("block{i}"), f);
            if let Some(t) = self.transitions.get(i) {
                f(format!("transition{i}.conv.weight"), t.conv.weight(), ParamKind::DecayedWeight);
                visit_bn(&format!("transition{i}.bn"), &t.bn, f);
            }
        }
        f("head.weight".into(), self.head.weight(), ParamKind::DecayedWeight);
        if let Some(bias) = self.head.bias() {
            f("head.bias".into(), bias, ParamKind::PlainParam);
        }
    }

    /// All named tensors (trainable and buffers) in walk order.
    pub fn state_entries(&self) -> Vec<StateEntry<S>> {
        let mut out = Vec::new();
        self.visit_state(&mut |name, tensor, kind| {
            out.push(StateEntry { name, tensor: tensor.clone(), kind });
        });
        out
    }

    /// Trainable tensors only, in walk order.
    pub fn parameters(&self) -> Vec<StateEntry<S>> {
        self.state_entries().into_iter().filter(|e| e.kind != ParamKind::Buffer).collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|e| e.tensor.numel()).sum()
    }

    /// Initializes all weights in place: convolution and linear weights are
    /// drawn from a zero-mean Gaussian with variance `2 / fan_in` (the
    /// ReLU-preserving choice), biases and batch-norm shifts start at zero,
    /// batch-norm scales at one, and running statistics at mean 0 / var 1.
    ///
    /// Draws happen in `f64` in walk order, so a given seed produces the
    /// same network regardless of the scalar type.
    pub fn init_weights(&self, seed: u64) {
        let mut source = GaussianSource::new(seed);
        self.visit_state(&mut |name, tensor, kind| match kind {
            ParamKind::DecayedWeight => {
                let fan_in = if tensor.rank() == 4 {
                    tensor.dims()[1] * tensor.dims()[2] * tensor.dims()[3]
                } else {
                    tensor.dims()[1]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                for v in tensor.data_mut().iter_mut() {
                    *v = S::from_f64(source.next() * std);
                }
                tensor.zero_grad();
            }
            ParamKind::PlainParam => {
                let value = if name.ends_with(".gamma") { S::one() } else { S::zero() };
                for v in tensor.data_mut().iter_mut() {
                    *v = value;
                }
                tensor.zero_grad();
            }
            ParamKind::Buffer => {
                let value = if name.ends_with(".running_var") { S::one() } else { S::zero() };
                for v in tensor.data_mut().iter_mut() {
                    *v = value;
                }
            }
        });
    }
}
