//! The configurable U-Net graph: construction, forward/backward execution,
//! and parameter/FLOP accounting.
//!
//! The encoder halves the spatial extent and doubles the channel count at
//! each of `depth` pooling stages; the decoder mirrors it with transposed
//! convolutions and skip concatenations. Every 3x3 convolution is "same"
//! padded, optionally followed by batch normalization, then ReLU. A final
//! 1x1 convolution plus sigmoid produces per-pixel probabilities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    backprop, batchnorm_eval, batchnorm_train, concat_channels, conv2d, conv_transpose2d,
    maxpool2x2, relu, sigmoid, BatchNormState, ConvKernel, Mode, OpGrads, OpRecord,
};
use crate::tensor::Tensor;

/// Architecture hyperparameters. `base_width` is the channel count of the
/// first encoder stage and doubles at each deeper level.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub use_batchnorm: bool,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 8,
            depth: 4,
            in_channels: 1,
            out_channels: 1,
            use_batchnorm: true,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be >= 1".to_string()));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".to_string()));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".to_string()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "bn_epsilon must be positive, got {}",
                self.bn_epsilon
            )));
        }
        Ok(())
    }

    /// Channel count at resolution level `i` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Input spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Two same-padded 3x3 convolutions, each optionally followed by batch
/// normalization, then ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: ConvKernel,
    bn1: Option<BatchNormState>,
    conv2: ConvKernel,
    bn2: Option<BatchNormState>,
}

impl ConvBlock {
    fn new(cfg: &ModelConfig, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<ConvBlock> {
        let bn = |c: usize| -> Result<Option<BatchNormState>> {
            if cfg.use_batchnorm {
                Ok(Some(BatchNormState::new(c, cfg.bn_momentum, cfg.bn_epsilon)?))
            } else {
                Ok(None)
            }
        };
        Ok(ConvBlock {
            conv1: init_conv(cout, cin, 3, 1, 1, rng)?,
            bn1: bn(cout)?,
            conv2: init_conv(cout, cout, 3, 1, 1, rng)?,
            bn2: bn(cout)?,
        })
    }

    fn forward_train(&mut self, x: &Tensor, tape: &mut Vec<OpRecord>) -> Result<Tensor> {
        let (mut y, rec) = conv2d(x, &self.conv1)?;
        tape.push(rec);
        if let Some(bn) = self.bn1.as_mut() {
            let (z, rec) = batchnorm_train(&y, bn)?;
            tape.push(rec);
            y = z;
        }
        let (y, rec) = relu(&y);
        tape.push(rec);
        let (mut z, rec) = conv2d(&y, &self.conv2)?;
        tape.push(rec);
        if let Some(bn) = self.bn2.as_mut() {
            let (z2, rec) = batchnorm_train(&z, bn)?;
            tape.push(rec);
            z = z2;
        }
        let (out, rec) = relu(&z);
        tape.push(rec);
        Ok(out)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (mut y, _) = conv2d(x, &self.conv1)?;
        if let Some(bn) = self.bn1.as_ref() {
            y = batchnorm_eval(&y, bn)?;
        }
        let (y, _) = relu(&y);
        let (mut z, _) = conv2d(&y, &self.conv2)?;
        if let Some(bn) = self.bn2.as_ref() {
            z = batchnorm_eval(&z, bn)?;
        }
        let (out, _) = relu(&z);
        Ok(out)
    }

    /// Reverse the block, popping its records off the tape. `sink` receives
    /// (suffix, shape, values) gradient entries; `prefix` names the block.
    fn backward(
        &self,
        tape: &mut Vec<OpRecord>,
        upstream: Tensor,
        prefix: &str,
        sink: &mut GradSink,
    ) -> Result<Tensor> {
        // relu2
        let mut g = pop_activation(tape, &upstream)?;
        // bn2
        if self.bn2.is_some() {
            g = pop_batchnorm(tape, &g, prefix, "bn2", sink)?;
        }
        // conv2
        g = pop_conv(tape, &g, prefix, "conv2", sink)?;
        // relu1
        g = pop_activation(tape, &g)?;
        // bn1
        if self.bn1.is_some() {
            g = pop_batchnorm(tape, &g, prefix, "bn1", sink)?;
        }
        // conv1
        g = pop_conv(tape, &g, prefix, "conv1", sink)?;
        Ok(g)
    }
}

/// One named gradient: flat values plus the logical shape of the parameter.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named gradients for every trainable parameter, in the model's canonical
/// traversal order. Batch-norm running statistics are not trainable and
/// never appear here.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<GradEntry>,
}

impl Gradients {
    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

type GradSink = Vec<GradEntry>;

fn pop_record(tape: &mut Vec<OpRecord>) -> Result<OpRecord> {
    tape.pop()
        .ok_or_else(|| Error::Usage("backward ran out of cached records".to_string()))
}

fn pop_activation(tape: &mut Vec<OpRecord>, upstream: &Tensor) -> Result<Tensor> {
    let rec = pop_record(tape)?;
    match backprop(&rec, upstream)? {
        OpGrads::Activation { dx } => Ok(dx),
        _ => Err(Error::Usage("tape out of sync: expected an activation record".to_string())),
    }
}

fn pop_batchnorm(
    tape: &mut Vec<OpRecord>,
    upstream: &Tensor,
    prefix: &str,
    which: &str,
    sink: &mut GradSink,
) -> Result<Tensor> {
    let rec = pop_record(tape)?;
    match backprop(&rec, upstream)? {
        OpGrads::BatchNorm { dx, dgamma, dbeta } => {
            let c = dgamma.len();
            sink.push(GradEntry {
                name: format!("{prefix}.{which}.gamma"),
                shape: vec![c],
                values: dgamma,
            });
            sink.push(GradEntry {
                name: format!("{prefix}.{which}.beta"),
                shape: vec![c],
                values: dbeta,
            });
            Ok(dx)
        }
        _ => Err(Error::Usage("tape out of sync: expected a batchnorm record".to_string())),
    }
}

fn pop_conv(
    tape: &mut Vec<OpRecord>,
    upstream: &Tensor,
    prefix: &str,
    which: &str,
    sink: &mut GradSink,
) -> Result<Tensor> {
    let rec = pop_record(tape)?;
    match backprop(&rec, upstream)? {
        OpGrads::Conv { dx, dweights, dbias } => {
            let name = if which.is_empty() {
                prefix.to_string()
            } else {
                format!("{prefix}.{which}")
            };
            sink.push(GradEntry {
                name: format!("{name}.weight"),
                shape: dweights.shape().to_vec(),
                values: dweights.into_vec(),
            });
            sink.push(GradEntry {
                name: format!("{name}.bias"),
                shape: vec![dbias.len()],
                values: dbias,
            });
            Ok(dx)
        }
        _ => Err(Error::Usage("tape out of sync: expected a convolution record".to_string())),
    }
}

fn init_conv(
    cout: usize,
    cin: usize,
    ksize: usize,
    padding: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvKernel> {
    let fan_in = cin * ksize * ksize;
    let bound = (2.0 / fan_in as f32).sqrt();
    let mut weights = Tensor::zeros([cout, cin, ksize, ksize]);
    for v in weights.data_mut() {
        *v = bound * (2.0 * rng.gen::<f32>() - 1.0);
    }
    ConvKernel::new(weights, vec![0.0; cout], padding, stride)
}

/// The U-Net model: the ordered layer graph plus its parameter store.
/// Parameter names are unique and stable across save/load.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Transposed convolutions, indexed by target level (ups[i] maps
    /// level i+1 channels to level i). Executed deepest first.
    ups: Vec<ConvKernel>,
    decoders: Vec<ConvBlock>,
    head: ConvKernel,
    tape: Option<Vec<OpRecord>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        // the forward cache is deliberately not cloned
        Model {
            config: self.config.clone(),
            encoders: self.encoders.clone(),
            bottleneck: self.bottleneck.clone(),
            ups: self.ups.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
            tape: None,
        }
    }
}

/// Build a U-Net for the given configuration, initializing parameters from
/// `seed`: weights are zero-mean uniform scaled by sqrt(2 / fan_in), biases
/// zero, batch-norm gamma 1 and beta 0.
pub fn build_unet(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = config.depth;

    let mut encoders = Vec::with_capacity(depth);
    for level in 0..depth {
        let cin = if level == 0 { config.in_channels } else { config.channels_at(level - 1) };
        encoders.push(ConvBlock::new(config, cin, config.channels_at(level), &mut rng)?);
    }

    let bottleneck = ConvBlock::new(
        config,
        config.channels_at(depth - 1),
        config.channels_at(depth),
        &mut rng,
    )?;

    // decoder built in execution order (deepest level first) so parameter
    // initialization order matches traversal order
    let mut ups: Vec<Option<ConvKernel>> = (0..depth).map(|_| None).collect();
    let mut decoders: Vec<Option<ConvBlock>> = (0..depth).map(|_| None).collect();
    for level in (0..depth).rev() {
        let c = config.channels_at(level);
        ups[level] = Some(init_conv(c, config.channels_at(level + 1), 2, 0, 2, &mut rng)?);
        decoders[level] = Some(ConvBlock::new(config, 2 * c, c, &mut rng)?);
    }
    let ups = ups.into_iter().map(Option::unwrap).collect();
    let decoders = decoders.into_iter().map(Option::unwrap).collect();

    let head = init_conv(config.out_channels, config.base_width, 1, 0, 1, &mut rng)?;

    Ok(Model { config: config.clone(), encoders, bottleneck, ups, decoders, head, tape: None })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.shape();
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input extent {h}x{w} is not divisible by {m} (depth {}); \
                 apply pad_to_multiple first and crop_back after",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Run the network. Train mode caches records for [`Model::backward`]
    /// and updates batch-norm running statistics; eval mode does neither.
    /// Output is per-pixel probabilities in [0, 1] with `out_channels`
    /// channels and the input's spatial extents.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => {
                self.check_input(batch)?;
                let mut tape = Vec::new();
                let mut skips = Vec::with_capacity(self.config.depth);

                let mut x = batch.clone();
                for level in 0..self.config.depth {
                    x = self.encoders[level].forward_train(&x, &mut tape)?;
                    skips.push(x.clone());
                    let (pooled, rec) = maxpool2x2(&x)?;
                    tape.push(rec);
                    x = pooled;
                }
                x = self.bottleneck.forward_train(&x, &mut tape)?;
                for level in (0..self.config.depth).rev() {
                    let (up, rec) = conv_transpose2d(&x, &self.ups[level])?;
                    tape.push(rec);
                    let (cat, rec) = concat_channels(&up, &skips[level])?;
                    tape.push(rec);
                    x = self.decoders[level].forward_train(&cat, &mut tape)?;
                }
                let (logits, rec) = conv2d(&x, &self.head)?;
                tape.push(rec);
                let (probs, rec) = sigmoid(&logits);
                tape.push(rec);

                self.tape = Some(tape);
                Ok(probs)
            }
        }
    }

    /// Eval-mode forward pass. Read-only: a model in eval mode may serve
    /// concurrent callers.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = batch.clone();
        for level in 0..self.config.depth {
            x = self.encoders[level].forward_eval(&x)?;
            skips.push(x.clone());
            let (pooled, _) = maxpool2x2(&x)?;
            x = pooled;
        }
        x = self.bottleneck.forward_eval(&x)?;
        for level in (0..self.config.depth).rev() {
            let (up, _) = conv_transpose2d(&x, &self.ups[level])?;
            let (cat, _) = concat_channels(&up, &skips[level])?;
            x = self.decoders[level].forward_eval(&cat)?;
        }
        let (logits, _) = conv2d(&x, &self.head)?;
        let (probs, _) = sigmoid(&logits);
        Ok(probs)
    }

    /// Reverse traversal of the records cached by the last train-mode
    /// forward, producing a gradient for every trainable parameter.
    /// `loss_grad` is the loss gradient w.r.t. the forward output.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<Gradients> {
        let mut tape = self.tape.take().ok_or_else(|| {
            Error::Usage("backward requires a preceding train-mode forward".to_string())
        })?;
        let depth = self.config.depth;
        let mut sink: GradSink = Vec::new();

        // head
        let mut g = pop_activation(&mut tape, loss_grad)?; // sigmoid
        g = pop_conv(&mut tape, &g, "head", "", &mut sink)?;

        // decoder, shallowest stage first (reverse of execution order)
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for level in 0..depth {
            g = self.decoders[level].backward(&mut tape, g, &format!("dec{level}"), &mut sink)?;
            let rec = pop_record(&mut tape)?;
            let (da, db) = match backprop(&rec, &g)? {
                OpGrads::Concat { da, db } => (da, db),
                _ => return Err(Error::Usage("tape out of sync: expected a concat record".to_string())),
            };
            skip_grads[level] = Some(db);
            g = pop_conv(&mut tape, &da, &format!("up{level}"), "", &mut sink)?;
        }

        g = self.bottleneck.backward(&mut tape, g, "bottleneck", &mut sink)?;

        // encoder, deepest stage first
        for level in (0..depth).rev() {
            let rec = pop_record(&mut tape)?;
            let mut block_out_grad = match backprop(&rec, &g)? {
                OpGrads::MaxPool { dx } => dx,
                _ => return Err(Error::Usage("tape out of sync: expected a maxpool record".to_string())),
            };
            if let Some(sg) = skip_grads[level].take() {
                block_out_grad.add_in_place(&sg);
            }
            g = self.encoders[level].backward(
                &mut tape,
                block_out_grad,
                &format!("enc{level}"),
                &mut sink,
            )?;
        }
        debug_assert!(tape.is_empty(), "tape not fully consumed");

        // the reverse walk emits entries backwards; restore traversal order
        let order = self.param_names();
        let index: std::collections::HashMap<&str, usize> =
            order.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        sink.sort_by_key(|e| index.get(e.name.as_str()).copied().unwrap_or(usize::MAX));
        Ok(Gradients { entries: sink })
    }

    /// Names of all trainable parameters in canonical traversal order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_layers(|layer| {
            names.extend(layer.trainable_names());
        });
        names
    }

    /// Apply `f` to every trainable parameter as (name, values) in
    /// traversal order.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        let depth = self.config.depth;
        for level in 0..depth {
            visit_block_mut(&mut self.encoders[level], &format!("enc{level}"), &mut f);
        }
        visit_block_mut(&mut self.bottleneck, "bottleneck", &mut f);
        for level in (0..depth).rev() {
            {
                let k = &mut self.ups[level];
                f(&format!("up{level}.weight"), k.weights.data_mut());
                f(&format!("up{level}.bias"), &mut k.bias);
            }
            visit_block_mut(&mut self.decoders[level], &format!("dec{level}"), &mut f);
        }
        f("head.weight", self.head.weights.data_mut());
        f("head.bias", &mut self.head.bias);
    }

    /// Apply `f` to every stored tensor — trainable parameters plus
    /// batch-norm running statistics — as (name, shape, values) in
    /// traversal order. This is the serialization order.
    pub fn for_each_stored(&self, mut f: impl FnMut(&str, &[usize], &[f32])) {
        self.visit_layers(|layer| layer.visit_stored(&mut f));
    }

    /// Mutable variant of [`Model::for_each_stored`], used when loading.
    pub fn for_each_stored_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [f32])) {
        let depth = self.config.depth;
        for level in 0..depth {
            visit_block_stored_mut(&mut self.encoders[level], &format!("enc{level}"), &mut f);
        }
        visit_block_stored_mut(&mut self.bottleneck, "bottleneck", &mut f);
        for level in (0..depth).rev() {
            {
                let k = &mut self.ups[level];
                let shape = k.weights.shape().to_vec();
                f(&format!("up{level}.weight"), &shape, k.weights.data_mut());
                let blen = k.bias.len();
                f(&format!("up{level}.bias"), &[blen], &mut k.bias);
            }
            visit_block_stored_mut(&mut self.decoders[level], &format!("dec{level}"), &mut f);
        }
        let shape = self.head.weights.shape().to_vec();
        f("head.weight", &shape, self.head.weights.data_mut());
        let blen = self.head.bias.len();
        f("head.bias", &[blen], &mut self.head.bias);
    }

    fn visit_layers(&self, mut f: impl FnMut(&LayerView<'_>)) {
        let depth = self.config.depth;
        for level in 0..depth {
            visit_block(&self.encoders[level], &format!("enc{level}"), &mut f);
        }
        visit_block(&self.bottleneck, "bottleneck", &mut f);
        for level in (0..depth).rev() {
            f(&LayerView::Conv { name: format!("up{level}"), kernel: &self.ups[level] });
            visit_block(&self.decoders[level], &format!("dec{level}"), &mut f);
        }
        f(&LayerView::Conv { name: "head".to_string(), kernel: &self.head });
    }
}

/// A named view of one weighted layer, used by the accounting walkers.
enum LayerView<'a> {
    Conv { name: String, kernel: &'a ConvKernel },
    BatchNorm { name: String, state: &'a BatchNormState },
}

impl LayerView<'_> {
    fn trainable_names(&self) -> Vec<String> {
        match self {
            LayerView::Conv { name, .. } => {
                vec![format!("{name}.weight"), format!("{name}.bias")]
            }
            LayerView::BatchNorm { name, .. } => {
                vec![format!("{name}.gamma"), format!("{name}.beta")]
            }
        }
    }

    fn visit_stored(&self, f: &mut impl FnMut(&str, &[usize], &[f32])) {
        match self {
            LayerView::Conv { name, kernel } => {
                f(&format!("{name}.weight"), &kernel.weights.shape(), kernel.weights.data());
                f(&format!("{name}.bias"), &[kernel.bias.len()], &kernel.bias);
            }
            LayerView::BatchNorm { name, state } => {
                let c = state.channels();
                f(&format!("{name}.gamma"), &[c], &state.gamma);
                f(&format!("{name}.beta"), &[c], &state.beta);
                f(&format!("{name}.running_mean"), &[c], &state.running_mean);
                f(&format!("{name}.running_var"), &[c], &state.running_var);
            }
        }
    }
}

fn visit_block(block: &ConvBlock, prefix: &str, f: &mut impl FnMut(&LayerView<'_>)) {
    f(&LayerView::Conv { name: format!("{prefix}.conv1"), kernel: &block.conv1 });
    if let Some(bn) = block.bn1.as_ref() {
        f(&LayerView::BatchNorm { name: format!("{prefix}.bn1"), state: bn });
    }
    f(&LayerView::Conv { name: format!("{prefix}.conv2"), kernel: &block.conv2 });
    if let Some(bn) = block.bn2.as_ref() {
        f(&LayerView::BatchNorm { name: format!("{prefix}.bn2"), state: bn });
    }
}

fn visit_block_mut(block: &mut ConvBlock, prefix: &str, f: &mut impl FnMut(&str, &mut [f32])) {
    f(&format!("{prefix}.conv1.weight"), block.conv1.weights.data_mut());
    f(&format!("{prefix}.conv1.bias"), &mut block.conv1.bias);
    if let Some(bn) = block.bn1.as_mut() {
        f(&format!("{prefix}.bn1.gamma"), &mut bn.gamma);
        f(&format!("{prefix}.bn1.beta"), &mut bn.beta);
    }
    f(&format!("{prefix}.conv2.weight"), block.conv2.weights.data_mut());
    f(&format!("{prefix}.conv2.bias"), &mut block.conv2.bias);
    if let Some(bn) = block.bn2.as_mut() {
        f(&format!("{prefix}.bn2.gamma"), &mut bn.gamma);
        f(&format!("{prefix}.bn2.beta"), &mut bn.beta);
    }
}

fn visit_block_stored_mut(
    block: &mut ConvBlock,
    prefix: &str,
    f: &mut impl FnMut(&str, &[usize], &mut [f32]),
) {
    let conv = |name: String, k: &mut ConvKernel, f: &mut dyn FnMut(&str, &[usize], &mut [f32])| {
        let shape = k.weights.shape().to_vec();
        f(&format!("{name}.weight"), &shape, k.weights.data_mut());
        let blen = k.bias.len();
        f(&format!("{name}.bias"), &[blen], &mut k.bias);
    };
    conv(format!("{prefix}.conv1"), &mut block.conv1, f);
    if let Some(bn) = block.bn1.as_mut() {
        let c = bn.channels();
        f(&format!("{prefix}.bn1.gamma"), &[c], &mut bn.gamma);
        f(&format!("{prefix}.bn1.beta"), &[c], &mut bn.beta);
        f(&format!("{prefix}.bn1.running_mean"), &[c], &mut bn.running_mean);
        f(&format!("{prefix}.bn1.running_var"), &[c], &mut bn.running_var);
    }
    conv(format!("{prefix}.conv2"), &mut block.conv2, f);
    if let Some(bn) = block.bn2.as_mut() {
        let c = bn.channels();
        f(&format!("{prefix}.bn2.gamma"), &[c], &mut bn.gamma);
        f(&format!("{prefix}.bn2.beta"), &[c], &mut bn.beta);
        f(&format!("{prefix}.bn2.running_mean"), &[c], &mut bn.running_mean);
        f(&format!("{prefix}.bn2.running_var"), &[c], &mut bn.running_var);
    }
}

/// Parameter counts for one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParamCount {
    pub name: String,
    pub trainable: u64,
    pub non_trainable: u64,
}

/// Exact per-layer parameter counts. Non-trainable values are the
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub layers: Vec<LayerParamCount>,
    pub trainable_total: u64,
    pub non_trainable_total: u64,
}

/// Count parameters layer by layer from the live parameter store.
/// 3x3 conv = 9*cin*cout + cout, transposed 2x2 = 4*cin*cout + cout,
/// 1x1 = cin*cout + cout, batch norm = 2c trainable + 2c running stats.
pub fn count_parameters(model: &Model) -> ParamReport {
    let mut layers = Vec::new();
    model.visit_layers(|layer| match layer {
        LayerView::Conv { name, kernel } => {
            layers.push(LayerParamCount {
                name: name.clone(),
                trainable: kernel.param_count() as u64,
                non_trainable: 0,
            });
        }
        LayerView::BatchNorm { name, state } => {
            let c = state.channels() as u64;
            layers.push(LayerParamCount { name: name.clone(), trainable: 2 * c, non_trainable: 2 * c });
        }
    });
    let trainable_total = layers.iter().map(|l| l.trainable).sum();
    let non_trainable_total = layers.iter().map(|l| l.non_trainable).sum();
    ParamReport { layers, trainable_total, non_trainable_total }
}

/// Work accounted to one layer for a given input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub name: String,
    /// Multiply-accumulates for convolution-type layers.
    pub macs: u64,
    /// Elementwise operations (pooling, activations, batch norm),
    /// reported separately from MACs.
    pub elementwise: u64,
}

/// Per-layer multiply-accumulate counts for a given input shape.
/// `total_flops` counts 2 FLOPs per MAC.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_elementwise: u64,
}

/// MACs of one convolution on one batch item: k^2 * cin * cout * oh * ow.
pub fn conv_macs(ksize: usize, cin: usize, cout: usize, oh: usize, ow: usize) -> u64 {
    (ksize * ksize * cin * cout * oh * ow) as u64
}

/// Analytic FLOP accounting for a config and input shape; no model needs to
/// be built. Convolutions are counted in MACs, everything else as
/// elementwise operations over its input.
pub fn count_flops(config: &ModelConfig, input_shape: [usize; 4]) -> Result<FlopReport> {
    config.validate()?;
    let [n, c, h, w] = input_shape;
    if c != config.in_channels {
        return Err(Error::Config(format!(
            "input shape has {c} channels, config expects {}",
            config.in_channels
        )));
    }
    let m = config.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Config(format!(
            "input extent {h}x{w} is not divisible by {m}"
        )));
    }

    let n = n as u64;
    let mut layers: Vec<LayerFlops> = Vec::new();
    let block = |prefix: &str, cin: usize, cout: usize, hh: usize, ww: usize,
                     layers: &mut Vec<LayerFlops>| {
        let elems = n * (cout * hh * ww) as u64;
        layers.push(LayerFlops {
            name: format!("{prefix}.conv1"),
            macs: n * conv_macs(3, cin, cout, hh, ww),
            elementwise: 0,
        });
        if config.use_batchnorm {
            layers.push(LayerFlops { name: format!("{prefix}.bn1"), macs: 0, elementwise: elems });
        }
        layers.push(LayerFlops { name: format!("{prefix}.relu1"), macs: 0, elementwise: elems });
        layers.push(LayerFlops {
            name: format!("{prefix}.conv2"),
            macs: n * conv_macs(3, cout, cout, hh, ww),
            elementwise: 0,
        });
        if config.use_batchnorm {
            layers.push(LayerFlops { name: format!("{prefix}.bn2"), macs: 0, elementwise: elems });
        }
        layers.push(LayerFlops { name: format!("{prefix}.relu2"), macs: 0, elementwise: elems });
    };

    let (mut hh, mut ww) = (h, w);
    for level in 0..config.depth {
        let cin = if level == 0 { config.in_channels } else { config.channels_at(level - 1) };
        let cout = config.channels_at(level);
        block(&format!("enc{level}"), cin, cout, hh, ww, &mut layers);
        layers.push(LayerFlops {
            name: format!("pool{level}"),
            macs: 0,
            elementwise: n * (cout * hh * ww) as u64,
        });
        hh /= 2;
        ww /= 2;
    }
    block(
        "bottleneck",
        config.channels_at(config.depth - 1),
        config.channels_at(config.depth),
        hh,
        ww,
        &mut layers,
    );
    for level in (0..config.depth).rev() {
        let cin = config.channels_at(level + 1);
        let cout = config.channels_at(level);
        // transposed conv: one MAC per (output element, input channel)
        layers.push(LayerFlops {
            name: format!("up{level}"),
            macs: n * conv_macs(2, cin, cout, hh, ww),
            elementwise: 0,
        });
        hh *= 2;
        ww *= 2;
        block(&format!("dec{level}"), 2 * cout, cout, hh, ww, &mut layers);
    }
    layers.push(LayerFlops {
        name: "head".to_string(),
        macs: n * conv_macs(1, config.base_width, config.out_channels, hh, ww),
        elementwise: 0,
    });
    layers.push(LayerFlops {
        name: "sigmoid".to_string(),
        macs: 0,
        elementwise: n * (config.out_channels * hh * ww) as u64,
    });

    let total_macs = layers.iter().map(|l| l.macs).sum::<u64>();
    let total_elementwise = layers.iter().map(|l| l.elementwise).sum::<u64>();
    Ok(FlopReport { layers, total_macs, total_flops: 2 * total_macs, total_elementwise })
}
