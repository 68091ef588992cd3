//! Network definitions: per-source translation generators, patch
//! discriminators, the feature discriminator and the segmenter.
//!
//! Each network owns a [`ParamSet`] and knows how to replay itself into a
//! [`Graph`] given a [`Bound`] copy of those parameters. Parameter order is
//! fixed by construction, which is also the checkpoint order.

use madan_nn::{Bound, ConvSpec, Float, Graph, NodeId, ParamSet, Tensor};

use crate::error::{MadanError, Result};
use crate::rng::{self, Rng};

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
/// Standard deviation of the Gaussian init used for every adversarial
/// component (generators and all discriminators).
pub const GAN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Widths of the stem, first and second downsampling stage.
    pub channels: [usize; 3],
    pub residual_blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Widths of the four stride-2 layers.
    pub channels: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    /// Widths of the four encoder blocks; the last one is the feature width.
    pub channels: [usize; 4],
    /// Group count of the per-sample group normalization.
    pub norm_groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDiscriminatorConfig {
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sources: usize,
    pub classes: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segmenter: SegmenterConfig,
    pub feature_discriminator: FeatureDiscriminatorConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sources: 2,
            classes: 5,
            generator: GeneratorConfig {
                channels: [32, 64, 128],
                residual_blocks: 4,
            },
            discriminator: DiscriminatorConfig {
                channels: [32, 64, 128, 256],
            },
            segmenter: SegmenterConfig {
                channels: [16, 32, 64, 64],
                norm_groups: 4,
            },
            feature_discriminator: FeatureDiscriminatorConfig { channels: 64 },
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Widths and depth used by the original full-scale experiments:
    /// nine residual blocks and 64-wide generators.
    pub fn full_scale() -> Self {
        Self {
            generator: GeneratorConfig {
                channels: [64, 128, 256],
                residual_blocks: 9,
            },
            discriminator: DiscriminatorConfig {
                channels: [64, 128, 256, 512],
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

impl ConvLayer {
    fn apply<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        Ok(g.conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.spec)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn add_conv<T: Float>(
    ps: &mut ParamSet<T>,
    r: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    spec: ConvSpec,
    bias: bool,
    std: Option<f64>,
) -> ConvLayer {
    let fan_in = (cin * k * k) as f64;
    let std = std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
    let n = cout * cin * k * k;
    let data = (0..n).map(|_| T::of(std * rng::normal(r))).collect();
    let w = ps.push(
        format!("{name}.weight"),
        Tensor::from_vec(&[cout, cin, k, k], data).expect("consistent"),
    );
    let b = bias.then(|| ps.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
    ConvLayer { w, b, spec }
}

fn check_image<T: Float>(g: &Graph<T>, x: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let dims = g.value(x).dims4()?;
    if dims.1 != 3 {
        return Err(MadanError::Nn(madan_nn::NnError::Shape {
            op,
            detail: format!("expected 3 input channels, got {}", dims.1),
        }));
    }
    Ok(dims)
}

fn shape_error(op: &'static str, detail: String) -> MadanError {
    MadanError::Nn(madan_nn::NnError::Shape { op, detail })
}

/// Runs `forward` on `x` in a fresh graph with constant parameters, in
/// chunks of at most `chunk` samples.
fn infer_batched<T: Float>(
    params: &ParamSet<T>,
    x: &Tensor<T>,
    chunk: usize,
    forward: impl Fn(&mut Graph<T>, &Bound, NodeId) -> Result<Vec<NodeId>>,
) -> Result<Vec<Tensor<T>>> {
    let b = x.shape()[0];
    let mut parts: Vec<Vec<Tensor<T>>> = Vec::new();
    let mut start = 0;
    while start < b {
        let len = chunk.min(b - start);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xi = g.constant(x.slice_batch(start, len)?);
        let outs = forward(&mut g, &bound, xi)?;
        parts.push(outs.iter().map(|&o| g.value(o).clone()).collect());
        start += len;
    }
    let n_out = parts.first().map_or(0, Vec::len);
    (0..n_out)
        .map(|k| {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &p[k]).collect();
            Ok(Tensor::stack_batch(&refs)?)
        })
        .collect()
}

const INFER_CHUNK: usize = 16;

/// Access to a network's parameters.
pub trait Network<T> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
}

macro_rules! impl_network {
    ($($t:ident),*) => {$(
        impl<T> Network<T> for $t<T> {
            fn params(&self) -> &ParamSet<T> {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamSet<T> {
                &mut self.params
            }
        }
    )*};
}

impl_network!(Generator, Discriminator, FeatureDiscriminator, Segmenter);

/// Image-to-image translator: 7×7 stem, two stride-2 downsamplers,
/// residual blocks, two nearest-upsample + 3×3 stages and a 7×7 tanh head.
/// Instance normalization throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    stem: ConvLayer,
    down: [ConvLayer; 2],
    blocks: Vec<[ConvLayer; 2]>,
    up: [ConvLayer; 2],
    head: ConvLayer,
}

impl<T: Float> Generator<T> {
    pub fn new(config: &GeneratorConfig, r: &mut Rng) -> Self {
        let [c0, c1, c2] = config.channels;
        let mut ps = ParamSet::new();
        let s = Some(GAN_INIT_STD);
        let stem = add_conv(&mut ps, r, "stem", 3, c0, 7, ConvSpec::new(1, 3), false, s);
        let down = [
            add_conv(&mut ps, r, "down0", c0, c1, 3, ConvSpec::new(2, 1), false, s),
            add_conv(&mut ps, r, "down1", c1, c2, 3, ConvSpec::new(2, 1), false, s),
        ];
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                [
                    add_conv(
                        &mut ps,
                        r,
                        &format!("res{i}.a"),
                        c2,
                        c2,
                        3,
                        ConvSpec::new(1, 1),
                        false,
                        s,
                    ),
                    add_conv(
                        &mut ps,
                        r,
                        &format!("res{i}.b"),
                        c2,
                        c2,
                        3,
                        ConvSpec::new(1, 1),
                        false,
                        s,
                    ),
                ]
            })
            .collect();
        let up = [
            add_conv(&mut ps, r, "up0", c2, c1, 3, ConvSpec::new(1, 1), false, s),
            add_conv(&mut ps, r, "up1", c1, c0, 3, ConvSpec::new(1, 1), false, s),
        ];
        let head = add_conv(&mut ps, r, "head", c0, 3, 7, ConvSpec::new(1, 3), true, s);
        Self {
            config: config.clone(),
            params: ps,
            stem,
            down,
            blocks,
            up,
            head,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = check_image(g, x, "generator")?;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(shape_error("generator", format!("{h}x{w} not divisible by 4")));
        }
        let norm_relu = |g: &mut Graph<T>, y: NodeId| -> Result<NodeId> {
            let c = g.value(y).shape()[1];
            let n = g.group_norm(y, c, NORM_EPS)?;
            Ok(g.relu(n))
        };
        let mut y = self.stem.apply(g, p, x)?;
        y = norm_relu(g, y)?;
        for layer in &self.down {
            y = layer.apply(g, p, y)?;
            y = norm_relu(g, y)?;
        }
        for [a, b] in &self.blocks {
            let t = a.apply(g, p, y)?;
            let t = norm_relu(g, t)?;
            let t = b.apply(g, p, t)?;
            let c = g.value(t).shape()[1];
            let t = g.group_norm(t, c, NORM_EPS)?;
            y = g.add(y, t)?;
        }
        for layer in &self.up {
            y = g.upsample2x(y)?;
            y = layer.apply(g, p, y)?;
            y = norm_relu(g, y)?;
        }
        let y = self.head.apply(g, p, y)?;
        Ok(g.tanh(y))
    }

    /// Gradient-free translation of a `[B, 3, H, W]` batch.
    pub fn translate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = infer_batched(&self.params, x, INFER_CHUNK, |g, p, xi| {
            Ok(vec![self.forward(g, p, xi)?])
        })?;
        Ok(out.remove(0))
    }
}

/// Patch discriminator: four stride-2 4×4 convolutions with leaky ReLU and a
/// one-channel 3×3 head, giving a `H/16 × W/16` logit map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
    layers: [ConvLayer; 4],
    head: ConvLayer,
}

impl<T: Float> Discriminator<T> {
    pub fn new(config: &DiscriminatorConfig, r: &mut Rng) -> Self {
        let c = config.channels;
        let mut ps = ParamSet::new();
        let s = Some(GAN_INIT_STD);
        let mut cin = 3;
        let layers = std::array::from_fn(|i| {
            let l = add_conv(
                &mut ps,
                r,
                &format!("conv{i}"),
                cin,
                c[i],
                4,
                ConvSpec::new(2, 1),
                true,
                s,
            );
            cin = c[i];
            l
        });
        let head = add_conv(&mut ps, r, "head", c[3], 1, 3, ConvSpec::new(1, 1), true, s);
        Self {
            config: config.clone(),
            params: ps,
            layers,
            head,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = check_image(g, x, "discriminator")?;
        if h < 16 || w < 16 {
            return Err(shape_error("discriminator", format!("{h}x{w} smaller than 16x16")));
        }
        let mut y = x;
        for l in &self.layers {
            y = l.apply(g, p, y)?;
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        self.head.apply(g, p, y)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = infer_batched(&self.params, x, INFER_CHUNK, |g, p, xi| {
            Ok(vec![self.forward(g, p, xi)?])
        })?;
        Ok(out.remove(0))
    }
}

/// Discriminator over segmenter feature maps: three stride-1 3×3
/// convolutions with leaky ReLU and a one-channel head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDiscriminator<T> {
    pub config: FeatureDiscriminatorConfig,
    pub params: ParamSet<T>,
    layers: [ConvLayer; 3],
    head: ConvLayer,
}

impl<T: Float> FeatureDiscriminator<T> {
    pub fn new(config: &FeatureDiscriminatorConfig, feature_channels: usize, r: &mut Rng) -> Self {
        let c = config.channels;
        let mut ps = ParamSet::new();
        let s = Some(GAN_INIT_STD);
        let mut cin = feature_channels;
        let layers = std::array::from_fn(|i| {
            let l = add_conv(&mut ps, r, &format!("conv{i}"), cin, c, 3, ConvSpec::new(1, 1), true, s);
            cin = c;
            l
        });
        let head = add_conv(&mut ps, r, "head", c, 1, 3, ConvSpec::new(1, 1), true, s);
        Self {
            config: config.clone(),
            params: ps,
            layers,
            head,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, feature: NodeId) -> Result<NodeId> {
        let mut y = feature;
        for l in &self.layers {
            y = l.apply(g, p, y)?;
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        self.head.apply(g, p, y)
    }
}

/// Output of [`Segmenter::forward`].
#[derive(Clone, Copy, Debug)]
pub struct SegmenterOutput {
    /// Un-normalized class scores, `[B, L, H, W]`.
    pub logits: NodeId,
    /// Encoder tail activation, `[B, C_f, H/8, W/8]`.
    pub feature: NodeId,
}

/// Encoder–decoder segmenter with skip connections. The encoder's last
/// block is the feature tap used for feature-level alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter<T> {
    pub config: SegmenterConfig,
    pub classes: usize,
    pub params: ParamSet<T>,
    encoder: [ConvLayer; 4],
    decoder: [ConvLayer; 3],
    head: ConvLayer,
}

impl<T: Float> Segmenter<T> {
    pub fn new(config: &SegmenterConfig, classes: usize, r: &mut Rng) -> Self {
        let c = config.channels;
        let mut ps = ParamSet::new();
        let enc_specs = [
            ConvSpec::new(1, 1),
            ConvSpec::new(2, 1),
            ConvSpec::new(2, 1),
            ConvSpec::new(2, 1),
        ];
        let mut cin = 3;
        let encoder = std::array::from_fn(|i| {
            let l = add_conv(&mut ps, r, &format!("enc{i}"), cin, c[i], 3, enc_specs[i], true, None);
            cin = c[i];
            l
        });
        // decoder stage k consumes upsampled features plus the skip of encoder block 2-k
        let dec_in = [c[3] + c[2], c[2] + c[1], c[1] + c[0]];
        let dec_out = [c[2], c[1], c[0]];
        let decoder = std::array::from_fn(|i| {
            add_conv(
                &mut ps,
                r,
                &format!("dec{i}"),
                dec_in[i],
                dec_out[i],
                3,
                ConvSpec::new(1, 1),
                true,
                None,
            )
        });
        let head = add_conv(&mut ps, r, "head", c[0], classes, 1, ConvSpec::new(1, 0), true, None);
        Self {
            config: config.clone(),
            classes,
            params: ps,
            encoder,
            decoder,
            head,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.config.channels[3]
    }

    fn block(&self, g: &mut Graph<T>, p: &Bound, l: &ConvLayer, x: NodeId) -> Result<NodeId> {
        let y = l.apply(g, p, x)?;
        let y = g.group_norm(y, self.config.norm_groups, NORM_EPS)?;
        Ok(g.relu(y))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<SegmenterOutput> {
        let (_, _, h, w) = check_image(g, x, "segmenter")?;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(shape_error("segmenter", format!("{h}x{w} not divisible by 8")));
        }
        let mut skips = Vec::with_capacity(4);
        let mut y = x;
        for l in &self.encoder {
            y = self.block(g, p, l, y)?;
            skips.push(y);
        }
        let feature = y;
        for (k, l) in self.decoder.iter().enumerate() {
            let up = g.upsample2x(y)?;
            let cat = g.concat_channels(up, skips[2 - k])?;
            y = self.block(g, p, l, cat)?;
        }
        let logits = self.head.apply(g, p, y)?;
        Ok(SegmenterOutput { logits, feature })
    }

    /// Gradient-free `(logits, feature)` for a batch.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut out = infer_batched(&self.params, x, INFER_CHUNK, |g, p, xi| {
            let o = self.forward(g, p, xi)?;
            Ok(vec![o.logits, o.feature])
        })?;
        let feature = out.pop().expect("two outputs");
        Ok((out.pop().expect("two outputs"), feature))
    }

    /// Per-pixel argmax class, `B×H×W` row-major.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let (logits, _) = self.infer(x)?;
        argmax_channels(&logits)
    }
}

/// Argmax over the channel axis of a `[B, L, H, W]` tensor.
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (b, l, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..l {
                if d[bi * l * hw + c * hw + p] > d[bi * l * hw + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// All networks of the framework.
///
/// The dynamic segmenter used inside the semantic-consistency loss is the
/// task segmenter itself ([`ModelBundle::adapted_segmenter`] borrows
/// [`ModelBundle::segmenter`]); there is no second copy of its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    /// `G_{S_i → T}` per source.
    pub to_target: Vec<Generator<T>>,
    /// `G_{T → S_i}` per source.
    pub to_source: Vec<Generator<T>>,
    /// Shared target-domain discriminator.
    pub disc_target: Discriminator<T>,
    /// Source-domain discriminators, also used for cross-domain cycles.
    pub disc_source: Vec<Discriminator<T>>,
    /// Sub-domain aggregation discriminators.
    pub disc_aggregate: Vec<Discriminator<T>>,
    pub disc_feature: FeatureDiscriminator<T>,
    pub segmenter: Segmenter<T>,
    source_segmenters: Vec<Segmenter<T>>,
    source_segmenters_frozen: bool,
}

impl<T: Float> ModelBundle<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if config.sources == 0 {
            return Err(MadanError::range("sources", "at least one source domain is required"));
        }
        if config.classes < 2 {
            return Err(MadanError::range("classes", format!("{} < 2", config.classes)));
        }
        if config
            .segmenter
            .channels
            .iter()
            .any(|c| c % config.segmenter.norm_groups != 0)
        {
            return Err(MadanError::range(
                "segmenter.norm_groups",
                "must divide every encoder width",
            ));
        }
        let m = config.sources;
        // one independent stream per network so widening one leaves others unchanged
        let mut streams = (0u64..).map(|k| rng::stream(config.seed, 0x4D0D_E100 + k));
        let mut next = || streams.next().expect("infinite");
        let to_target = (0..m).map(|_| Generator::new(&config.generator, &mut next())).collect();
        let to_source = (0..m).map(|_| Generator::new(&config.generator, &mut next())).collect();
        let disc_target = Discriminator::new(&config.discriminator, &mut next());
        let disc_source = (0..m)
            .map(|_| Discriminator::new(&config.discriminator, &mut next()))
            .collect();
        let disc_aggregate = (0..m)
            .map(|_| Discriminator::new(&config.discriminator, &mut next()))
            .collect();
        let segmenter = Segmenter::new(&config.segmenter, config.classes, &mut next());
        let disc_feature =
            FeatureDiscriminator::new(&config.feature_discriminator, segmenter.feature_channels(), &mut next());
        let source_segmenters = (0..m)
            .map(|_| Segmenter::new(&config.segmenter, config.classes, &mut next()))
            .collect();
        Ok(Self {
            config: config.clone(),
            to_target,
            to_source,
            disc_target,
            disc_source,
            disc_aggregate,
            disc_feature,
            segmenter,
            source_segmenters,
            source_segmenters_frozen: false,
        })
    }

    pub fn sources(&self) -> usize {
        self.config.sources
    }

    /// The dynamic segmenter `F_A`: the task segmenter's own parameters.
    pub fn adapted_segmenter(&self) -> &Segmenter<T> {
        &self.segmenter
    }

    /// Frozen source-pretrained segmenter `F_i`.
    pub fn source_segmenter(&self, i: usize) -> &Segmenter<T> {
        &self.source_segmenters[i]
    }

    pub fn source_segmenters_frozen(&self) -> bool {
        self.source_segmenters_frozen
    }

    /// Installs the pretrained source segmenters and freezes them. Fails if
    /// they were already frozen.
    pub fn freeze_source_segmenters(&mut self, trained: Vec<Segmenter<T>>) -> Result<()> {
        if self.source_segmenters_frozen {
            return Err(MadanError::Rejected("source segmenters are frozen".into()));
        }
        if trained.len() != self.sources() {
            return Err(MadanError::range(
                "source segmenters",
                format!("{} given for {} sources", trained.len(), self.sources()),
            ));
        }
        self.source_segmenters = trained;
        self.source_segmenters_frozen = true;
        Ok(())
    }

    /// Every parameter set with its checkpoint name, in a stable order.
    pub fn named_params(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut v = Vec::new();
        for (i, n) in self.to_target.iter().enumerate() {
            v.push((format!("g_st.{i}"), &n.params));
        }
        for (i, n) in self.to_source.iter().enumerate() {
            v.push((format!("g_ts.{i}"), &n.params));
        }
        v.push(("d_t".into(), &self.disc_target.params));
        for (i, n) in self.disc_source.iter().enumerate() {
            v.push((format!("d_s.{i}"), &n.params));
        }
        for (i, n) in self.disc_aggregate.iter().enumerate() {
            v.push((format!("d_a.{i}"), &n.params));
        }
        v.push(("d_f".into(), &self.disc_feature.params));
        v.push(("f".into(), &self.segmenter.params));
        for (i, n) in self.source_segmenters.iter().enumerate() {
            v.push((format!("f_src.{i}"), &n.params));
        }
        v
    }

    /// Mutable counterpart of [`Self::named_params`], used to restore
    /// checkpoints.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ParamSet<T>)> {
        let mut v = Vec::new();
        for (i, n) in self.to_target.iter_mut().enumerate() {
            v.push((format!("g_st.{i}"), &mut n.params));
        }
        for (i, n) in self.to_source.iter_mut().enumerate() {
            v.push((format!("g_ts.{i}"), &mut n.params));
        }
        v.push(("d_t".into(), &mut self.disc_target.params));
        for (i, n) in self.disc_source.iter_mut().enumerate() {
            v.push((format!("d_s.{i}"), &mut n.params));
        }
        for (i, n) in self.disc_aggregate.iter_mut().enumerate() {
            v.push((format!("d_a.{i}"), &mut n.params));
        }
        v.push(("d_f".into(), &mut self.disc_feature.params));
        v.push(("f".into(), &mut self.segmenter.params));
        for (i, n) in self.source_segmenters.iter_mut().enumerate() {
            v.push((format!("f_src.{i}"), &mut n.params));
        }
        v
    }

    pub(crate) fn set_source_segmenters_frozen(&mut self, frozen: bool) {
        self.source_segmenters_frozen = frozen;
    }

    /// Mutable access for pretraining; fails once the segmenters are frozen.
    pub(crate) fn source_segmenter_mut(&mut self, i: usize) -> Result<&mut Segmenter<T>> {
        if self.source_segmenters_frozen {
            return Err(MadanError::Rejected("source segmenters are frozen".into()));
        }
        Ok(&mut self.source_segmenters[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            sources: 2,
            classes: 5,
            generator: GeneratorConfig {
                channels: [4, 8, 8],
                residual_blocks: 1,
            },
            discriminator: DiscriminatorConfig { channels: [4, 4, 8, 8] },
            segmenter: SegmenterConfig {
                channels: [4, 8, 8, 8],
                norm_groups: 2,
            },
            feature_discriminator: FeatureDiscriminatorConfig { channels: 4 },
            seed: 1,
        }
    }

    fn input(b: usize, h: usize, w: usize) -> Tensor<f32> {
        let n = b * 3 * h * w;
        Tensor::from_vec(&[b, 3, h, w], (0..n).map(|i| ((i as f32) * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn bundle_is_deterministic_in_seed() {
        let a = ModelBundle::<f32>::new(&tiny()).unwrap();
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = ModelBundle::<f32>::new(&ModelConfig { seed: 2, ..tiny() }).unwrap();
        assert_ne!(a.segmenter, c.segmenter);
    }

    #[test]
    fn bundle_cardinality() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        assert_eq!(b.to_target.len(), 2);
        assert_eq!(b.to_source.len(), 2);
        assert_eq!(b.disc_source.len(), 2);
        assert_eq!(b.disc_aggregate.len(), 2);
        assert_eq!(b.named_params().len(), 2 + 2 + 1 + 2 + 2 + 1 + 1 + 2);
    }

    #[test]
    fn zero_sources_rejected() {
        assert!(ModelBundle::<f32>::new(&ModelConfig { sources: 0, ..tiny() }).is_err());
    }

    #[test]
    fn adapted_segmenter_aliases_task_segmenter() {
        let mut b = ModelBundle::<f32>::new(&tiny()).unwrap();
        b.segmenter.params.tensors_mut()[0].data_mut()[0] = 123.0;
        assert_eq!(b.adapted_segmenter().params.get(0).data()[0], 123.0);
        assert!(std::ptr::eq(b.adapted_segmenter(), &b.segmenter));
    }

    #[test]
    fn source_segmenters_freeze_once() {
        let mut b = ModelBundle::<f32>::new(&tiny()).unwrap();
        let segs: Vec<_> = (0..2).map(|i| b.source_segmenter(i).clone()).collect();
        b.freeze_source_segmenters(segs.clone()).unwrap();
        assert!(b.freeze_source_segmenters(segs).is_err());
    }

    #[test]
    fn generator_shape_and_range() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        let x = input(2, 16, 16).map(|v| v * 5.0);
        let y = b.to_target[0].translate(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        assert!(b.to_target[0].translate(&input(1, 10, 12)).is_err());
    }

    #[test]
    fn generator_param_count_depends_only_on_config() {
        let cfg = tiny();
        let a = Generator::<f32>::new(&cfg.generator, &mut rng::stream(1, 0));
        let b = Generator::<f32>::new(&cfg.generator, &mut rng::stream(2, 9));
        assert_eq!(a.params.numel(), b.params.numel());
        // stem + 2 down + 2 per block + 2 up + head weight + head bias
        let [c0, c1, c2] = cfg.generator.channels;
        let expect =
            3 * c0 * 49 + c0 * c1 * 9 + c1 * c2 * 9 + 2 * c2 * c2 * 9 + c2 * c1 * 9 + c1 * c0 * 9 + c0 * 3 * 49 + 3;
        assert_eq!(a.params.numel(), expect);
    }

    #[test]
    fn discriminator_patch_shape_and_independence() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        let one = input(1, 64, 64);
        let two = Tensor::stack_batch(&[&one, &one]).unwrap();
        let y = b.disc_target.logits(&two).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 4]);
        assert_eq!(y.slice_batch(0, 1).unwrap(), y.slice_batch(1, 1).unwrap());
        assert!(b.disc_target.logits(&input(1, 8, 8)).is_err());
    }

    #[test]
    fn segmenter_shapes_and_softmax() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        let (logits, feat) = b.segmenter.infer(&input(2, 32, 32)).unwrap();
        assert_eq!(logits.shape(), &[2, 5, 32, 32]);
        assert_eq!(feat.shape(), &[2, 8, 4, 4]);
        let hw = 32 * 32;
        for p in 0..hw {
            let m = (0..5).map(|c| logits.data()[c * hw + p]).fold(f32::MIN, f32::max);
            let s: f64 = (0..5).map(|c| ((logits.data()[c * hw + p] - m) as f64).exp()).sum();
            let probs: f64 = (0..5).map(|c| ((logits.data()[c * hw + p] - m) as f64).exp() / s).sum();
            assert!((probs - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_tap_gradient_reaches_only_the_encoder() {
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        let mut g = Graph::new();
        let p = b.segmenter.params.bind(&mut g, true);
        let x = g.constant(input(1, 16, 16));
        let out = b.segmenter.forward(&mut g, &p, x).unwrap();
        let w = Tensor::from_vec(
            g.value(out.feature).shape(),
            (0..g.value(out.feature).numel())
                .map(|i| (i as f32 * 0.7).cos())
                .collect(),
        )
        .unwrap();
        let loss = g.dot_const(out.feature, w).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, name) in b.segmenter.params.names().iter().enumerate() {
            let nonzero = grads.get(p.get(i)).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(nonzero, name.starts_with("enc"), "{name}");
        }
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let t = Tensor::<f32>::from_vec(&[1, 3, 1, 2], vec![0.0, 5.0, 2.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![1, 0]);
    }
}
