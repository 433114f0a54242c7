//! Backbone CNN, projection heads and fine-tuning classifier.
//!
//! Parameters live here as plain tensors; every forward pass binds them
//! into a fresh [`Graph`] as leaves, so one model can drive training
//! (batch-norm in batch-statistics mode, running averages updated) and
//! inference (running statistics, batch-decoupled) without copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// conv(3x3, stride 2)-BN-ReLU, four blocks doubling channels
    Tiny,
    /// four pairs of conv-BN units with projection skips
    MiniRes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeOn {
    /// classifier reads the pooled backbone feature (D0)
    F,
    /// classifier reads the second projection (D2)
    H2,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input_size: usize,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    /// (D0, D1, D2): backbone feature size and the two projection sizes
    pub dims: (usize, usize, usize),
    pub num_classes: usize,
    /// insert a ReLU between the two projection layers
    #[serde(default)]
    pub head_relu: bool,
    #[serde(default = "default_probe")]
    pub probe_on: ProbeOn,
}

fn default_channels() -> usize {
    3
}

fn default_probe() -> ProbeOn {
    ProbeOn::F
}

impl ModelConfig {
    pub fn desk(input_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            input_size,
            input_channels: 3,
            dims: (128, 64, 32),
            num_classes,
            head_relu: false,
            probe_on: ProbeOn::F,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d1, d2) = self.dims;
        if d0 % 4 != 0 || d1 != d0 / 2 || d2 != d0 / 4 {
            return Err(Error::config(format!(
                "model dims ({d0}, {d1}, {d2}) must halve twice from a multiple of 4"
            )));
        }
        if d0 % 8 != 0 {
            return Err(Error::config(format!(
                "model: D0 = {d0} must be divisible by 8 so four doubling blocks start on an integer width"
            )));
        }
        if self.input_size < 8 {
            return Err(Error::config(format!(
                "model: input size {} leaves nothing after four stride-2 blocks",
                self.input_size
            )));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::config(format!(
                "model: input channels {} not supported",
                self.input_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "model: {} classes is not a classification task",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn probe_dim(&self) -> usize {
        match self.probe_on {
            ProbeOn::F => self.dims.0,
            ProbeOn::H2 => self.dims.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Graph leaves for one forward pass, parallel to `Model::params`.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageFeatureIds {
    pub f: NodeId,
    pub h1: NodeId,
    pub h2: NodeId,
}

#[derive(Debug, Clone)]
pub struct StageFeatures<S: Scalar> {
    pub f: Tensor<S>,
    pub h1: Tensor<S>,
    pub h2: Tensor<S>,
}

impl StageFeatureIds {
    pub fn extract<S: Scalar>(&self, g: &Graph<S>) -> StageFeatures<S> {
        StageFeatures {
            f: g.value(self.f).clone(),
            h1: g.value(self.h1).clone(),
            h2: g.value(self.h2).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Serializable view of one tensor for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct ConvUnit {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct SkipProj {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Plain(ConvUnit),
    Residual { c1: ConvUnit, c2: ConvUnit, skip: SkipProj },
}

#[derive(Debug, Clone)]
struct BnBuffer<S: Scalar> {
    mean: Vec<S>,
    var: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    params: Vec<Param<S>>,
    bn: Vec<BnBuffer<S>>,
    stages: Vec<Stage>,
    head1: (usize, usize),
    head2: (usize, usize),
    classifier: (usize, usize),
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model {
            cfg: cfg.clone(),
            params: Vec::new(),
            bn: Vec::new(),
            stages: Vec::new(),
            head1: (0, 0),
            head2: (0, 0),
            classifier: (0, 0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d0, d1, d2) = cfg.dims;
        let widths = [d0 / 8, d0 / 4, d0 / 2, d0];

        match cfg.backbone {
            BackboneKind::Tiny => {
                let mut c_in = cfg.input_channels;
                for (i, &c_out) in widths.iter().enumerate() {
                    let unit = model.add_conv_unit(
                        &format!("backbone.conv{}", i + 1),
                        &format!("backbone.bn{}", i + 1),
                        c_in,
                        c_out,
                        3,
                        2,
                        1,
                        &mut rng,
                    );
                    model.stages.push(Stage::Plain(unit));
                    c_in = c_out;
                }
            }
            BackboneKind::MiniRes => {
                let mut c_in = cfg.input_channels;
                for (i, &c_out) in widths.iter().enumerate() {
                    let c1 = model.add_conv_unit(
                        &format!("backbone.conv{}", 2 * i + 1),
                        &format!("backbone.bn{}", 2 * i + 1),
                        c_in,
                        c_out,
                        3,
                        2,
                        1,
                        &mut rng,
                    );
                    let c2 = model.add_conv_unit(
                        &format!("backbone.conv{}", 2 * i + 2),
                        &format!("backbone.bn{}", 2 * i + 2),
                        c_out,
                        c_out,
                        3,
                        1,
                        1,
                        &mut rng,
                    );
                    let sw = model.add_param(
                        format!("backbone.skip{}.weight", i + 1),
                        vec![c_out, c_in, 1, 1],
                        he_std(c_in),
                        ParamGroup::Backbone,
                        &mut rng,
                    );
                    let sb = model.add_param(
                        format!("backbone.skip{}.bias", i + 1),
                        vec![c_out],
                        0.0,
                        ParamGroup::Backbone,
                        &mut rng,
                    );
                    model.stages.push(Stage::Residual { c1, c2, skip: SkipProj { w: sw, b: sb } });
                    c_in = c_out;
                }
            }
        }

        model.head1 = model.add_linear("head1", d0, d1, ParamGroup::Head, &mut rng);
        model.head2 = model.add_linear("head2", d1, d2, ParamGroup::Head, &mut rng);
        let probe_dim = cfg.probe_dim();
        model.classifier =
            model.add_linear("classifier", probe_dim, cfg.num_classes, ParamGroup::Classifier, &mut rng);
        Ok(model)
    }

    fn add_param(
        &mut self,
        name: String,
        shape: Vec<usize>,
        std: f64,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let value = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, std, rng)
        };
        self.params.push(Param { name, value, trainable: true, group });
        self.params.len() - 1
    }

    fn add_const_param(&mut self, name: String, shape: Vec<usize>, fill: S, group: ParamGroup) -> usize {
        self.params.push(Param {
            name,
            value: Tensor::full(shape, fill),
            trainable: true,
            group,
        });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn add_conv_unit(
        &mut self,
        conv_name: &str,
        bn_name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvUnit {
        let w = self.add_param(
            format!("{conv_name}.weight"),
            vec![c_out, c_in, kernel, kernel],
            he_std(c_in * kernel * kernel),
            ParamGroup::Backbone,
            rng,
        );
        let b = self.add_param(format!("{conv_name}.bias"), vec![c_out], 0.0, ParamGroup::Backbone, rng);
        let gamma = self.add_const_param(format!("{bn_name}.gamma"), vec![c_out], S::one(), ParamGroup::Backbone);
        let beta = self.add_const_param(format!("{bn_name}.beta"), vec![c_out], S::zero(), ParamGroup::Backbone);
        self.bn.push(BnBuffer { mean: vec![S::zero(); c_out], var: vec![S::one(); c_out] });
        ConvUnit { w, b, gamma, beta, bn: self.bn.len() - 1, stride, pad }
    }

    fn add_linear(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize) {
        let w = self.add_param(format!("{name}.weight"), vec![d_in, d_out], he_std(d_in), group, rng);
        let b = self.add_param(format!("{name}.bias"), vec![d_out], 0.0, group, rng);
        (w, b)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    /// Create graph leaves for every parameter; trainable ones require
    /// gradients.
    pub fn bind(&self, g: &mut Graph<S>) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect();
        Binding { nodes }
    }

    fn conv_bn(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        unit: &ConvUnit,
        x: NodeId,
        mode: Mode,
        stat_updates: &mut Vec<(usize, crate::graph::BatchStats<S>)>,
    ) -> Result<NodeId> {
        let y = g.conv2d(x, bind.nodes[unit.w], bind.nodes[unit.b], unit.stride, unit.pad)?;
        match mode {
            Mode::Train => {
                let (out, stats) =
                    g.batch_norm2d_train(y, bind.nodes[unit.gamma], bind.nodes[unit.beta], BN_EPS)?;
                stat_updates.push((unit.bn, stats));
                Ok(out)
            }
            Mode::Eval => {
                let buf = &self.bn[unit.bn];
                g.batch_norm2d_eval(
                    y,
                    bind.nodes[unit.gamma],
                    bind.nodes[unit.beta],
                    &buf.mean,
                    &buf.var,
                    BN_EPS,
                )
            }
        }
    }

    fn forward_impl(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        images: NodeId,
        mode: Mode,
    ) -> Result<(StageFeatureIds, Vec<(usize, crate::graph::BatchStats<S>)>)> {
        let shape = g.value(images).shape().to_vec();
        let want = [self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(format!(
                "forward: input {shape:?}, expected [n, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        let mut stat_updates = Vec::new();
        let mut x = images;
        for stage in &self.stages {
            match stage {
                Stage::Plain(unit) => {
                    let y = self.conv_bn(g, bind, unit, x, mode, &mut stat_updates)?;
                    x = g.relu(y)?;
                }
                Stage::Residual { c1, c2, skip } => {
                    let y = self.conv_bn(g, bind, c1, x, mode, &mut stat_updates)?;
                    let y = g.relu(y)?;
                    let y = self.conv_bn(g, bind, c2, y, mode, &mut stat_updates)?;
                    let s = g.conv2d(x, bind.nodes[skip.w], bind.nodes[skip.b], c1.stride, 0)?;
                    let added = g.add(y, s)?;
                    x = g.relu(added)?;
                }
            }
        }
        let f = g.global_avg_pool(x)?;
        let h1 = g.linear(f, bind.nodes[self.head1.0], bind.nodes[self.head1.1])?;
        let h2_in = if self.cfg.head_relu { g.relu(h1)? } else { h1 };
        let h2 = g.linear(h2_in, bind.nodes[self.head2.0], bind.nodes[self.head2.1])?;
        for (name, id) in [("f", f), ("h1", h1), ("h2", h2)] {
            if !g.value(id).is_finite() {
                return Err(Error::numeric(format!("forward: non-finite values in {name}")));
            }
        }
        Ok((StageFeatureIds { f, h1, h2 }, stat_updates))
    }

    /// Training forward: batch statistics feed the normalization and decay
    /// into the running buffers.
    pub fn forward_features(
        &mut self,
        g: &mut Graph<S>,
        bind: &Binding,
        images: NodeId,
    ) -> Result<StageFeatureIds> {
        let (ids, updates) = self.forward_impl(g, bind, images, Mode::Train)?;
        let m = S::from_f64(BN_MOMENTUM);
        let one_m = S::from_f64(1.0 - BN_MOMENTUM);
        for (bn_idx, stats) in updates {
            let buf = &mut self.bn[bn_idx];
            for (r, &b) in buf.mean.iter_mut().zip(&stats.mean) {
                *r = one_m * *r + m * b;
            }
            for (r, &b) in buf.var.iter_mut().zip(&stats.var) {
                *r = one_m * *r + m * b;
            }
        }
        Ok(ids)
    }

    /// Inference forward on running statistics; batch rows are independent.
    pub fn forward_features_eval(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        images: NodeId,
    ) -> Result<StageFeatureIds> {
        Ok(self.forward_impl(g, bind, images, Mode::Eval)?.0)
    }

    /// Linear classifier on the configured probe feature (`f` or `h2`).
    pub fn forward_classifier(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        features: &StageFeatureIds,
    ) -> Result<NodeId> {
        let input = match self.cfg.probe_on {
            ProbeOn::F => features.f,
            ProbeOn::H2 => features.h2,
        };
        g.linear(input, bind.nodes[self.classifier.0], bind.nodes[self.classifier.1])
    }

    /// Classifier applied to a raw feature tensor (for cached-feature
    /// probes).
    pub fn forward_classifier_on(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        features: NodeId,
    ) -> Result<NodeId> {
        g.linear(features, bind.nodes[self.classifier.0], bind.nodes[self.classifier.1])
    }

    /// Head forward from a precomputed pooled feature `f` — the same ops
    /// `forward_features` applies after pooling, so a frozen backbone can be
    /// evaluated once and its `f` rows replayed through the trainable layers.
    pub fn forward_from_pooled(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        f: NodeId,
    ) -> Result<StageFeatureIds> {
        let shape = g.value(f).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.dims.0 {
            return Err(Error::shape(format!(
                "forward_from_pooled: input {shape:?}, expected [n, {}]",
                self.cfg.dims.0
            )));
        }
        let h1 = g.linear(f, bind.nodes[self.head1.0], bind.nodes[self.head1.1])?;
        let h2_in = if self.cfg.head_relu { g.relu(h1)? } else { h1 };
        let h2 = g.linear(h2_in, bind.nodes[self.head2.0], bind.nodes[self.head2.1])?;
        Ok(StageFeatureIds { f, h1, h2 })
    }

    pub fn freeze_backbone(&mut self) {
        for p in &mut self.params {
            if p.group == ParamGroup::Backbone {
                p.trainable = false;
            }
        }
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }

    /// FNV-1a over all backbone parameters and batch-norm buffers, in
    /// 32-bit little-endian form; fine-tuning with a frozen backbone must
    /// leave this unchanged.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            if p.group != ParamGroup::Backbone {
                continue;
            }
            for &v in p.value.data() {
                h = ops::fnv1a64_extend(h, &v.as_f32().to_le_bytes());
            }
        }
        for buf in &self.bn {
            for &v in buf.mean.iter().chain(&buf.var) {
                h = ops::fnv1a64_extend(h, &v.as_f32().to_le_bytes());
            }
        }
        h
    }

    /// All state needed to reconstruct the model: parameters plus
    /// batch-norm running buffers, in declaration order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect();
        for (i, buf) in self.bn.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("backbone.bn{}.running_mean", i + 1),
                shape: vec![buf.mean.len()],
                data: buf.mean.iter().map(|v| v.as_f32()).collect(),
            });
            out.push(NamedTensor {
                name: format!("backbone.bn{}.running_var", i + 1),
                shape: vec![buf.var.len()],
                data: buf.var.iter().map(|v| v.as_f32()).collect(),
            });
        }
        out
    }

    /// Replace all parameters and buffers. The set of names must match the
    /// model exactly; shapes are checked per tensor.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let expected = self.named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::data(format!(
                "load: {} tensors for a model with {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut by_name: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != tensors.len() {
            return Err(Error::data("load: duplicate tensor names".to_string()));
        }
        // validate everything before touching state
        for want in &expected {
            let got = by_name
                .get(want.name.as_str())
                .ok_or_else(|| Error::data(format!("load: missing tensor '{}'", want.name)))?;
            if got.shape != want.shape {
                return Err(Error::data(format!(
                    "load: tensor '{}' has shape {:?}, expected {:?}",
                    want.name, got.shape, want.shape
                )));
            }
        }
        for p in &mut self.params {
            let t = by_name.remove(p.name.as_str()).expect("validated above");
            p.value = Tensor::new(
                t.shape.clone(),
                t.data.iter().map(|&v| S::from_f32(v)).collect(),
            )?;
        }
        for (i, buf) in self.bn.iter_mut().enumerate() {
            let m = by_name
                .remove(format!("backbone.bn{}.running_mean", i + 1).as_str())
                .expect("validated above");
            let v = by_name
                .remove(format!("backbone.bn{}.running_var", i + 1).as_str())
                .expect("validated above");
            buf.mean = m.data.iter().map(|&x| S::from_f32(x)).collect();
            buf.var = v.data.iter().map(|&x| S::from_f32(x)).collect();
        }
        Ok(())
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
