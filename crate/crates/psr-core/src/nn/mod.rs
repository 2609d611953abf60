//! Deterministic tensor/layer engine: enough to train small residual CNNs
//! with group normalization, and to differentiate them with respect to both
//! parameters and inputs.
//!
//! There is deliberately no batch-statistics layer kind; normalization is
//! per-sample group norm only.

pub mod exec;
pub mod loss;
pub mod ops;
pub mod optim;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use exec::SampleTape;
pub use loss::cross_entropy;
pub use optim::SgdOptimizer;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    GroupNorm { groups: usize, channels: usize },
    Relu,
    Linear { in_features: usize, out_features: usize },
    /// Adds the activation saved under `source` by an earlier layer's tag.
    ResidualAdd { source: String },
    MaxPool { k: usize },
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// When set, the layer's output is saved under this tag for ResidualAdd.
    pub tag: Option<String>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind, tag: None }
    }

    pub fn tagged(name: impl Into<String>, kind: LayerKind, tag: impl Into<String>) -> Self {
        Self { name: name.into(), kind, tag: Some(tag.into()) }
    }

    /// Parameter tensors this layer owns, as `(suffix, shape)` pairs.
    fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        match &self.kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => vec![
                ("weight", vec![*out_ch, *in_ch, *kernel, *kernel]),
                ("bias", vec![*out_ch]),
            ],
            LayerKind::GroupNorm { channels, .. } => {
                vec![("gamma", vec![*channels]), ("beta", vec![*channels])]
            }
            LayerKind::Linear { in_features, out_features } => vec![
                ("weight", vec![*out_features, *in_features]),
                ("bias", vec![*out_features]),
            ],
            _ => vec![],
        }
    }

    fn param_name(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }
}

/// Activation shape as it flows through the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat layout of all parameters in name order; per-sample gradients and
/// optimizer state use this layout.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<(String, usize, usize)>,
    pub total: usize,
    index: HashMap<String, (usize, usize)>,
}

impl ParamLayout {
    fn from_params(params: &BTreeMap<String, Tensor>) -> Self {
        let mut entries = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        let mut offset = 0usize;
        for (name, t) in params {
            entries.push((name.clone(), offset, t.len()));
            index.insert(name.clone(), (offset, t.len()));
            offset += t.len();
        }
        Self { entries, total: offset, index }
    }

    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).copied()
    }
}

/// Ordered computation graph of layers plus the named parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub architecture_id: String,
    pub layers: Vec<Layer>,
    pub params: BTreeMap<String, Tensor>,
    pub input_shape: (usize, usize, usize),
    pub n_classes: usize,
    pub(crate) shapes: Vec<Shape>, // len layers+1: input shape of each layer, then logits
    pub(crate) layout: ParamLayout,
}

impl Model {
    /// Builds and validates a model from explicit layers and parameters.
    pub fn from_layers(
        architecture_id: impl Into<String>,
        input_shape: (usize, usize, usize),
        n_classes: usize,
        layers: Vec<Layer>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        let last = *shapes.last().expect("nonempty shapes");
        if last != Shape::Flat(n_classes) && last.len() != n_classes {
            return Err(Error::ShapeMismatch(format!(
                "model output {last:?} does not match {n_classes} classes"
            )));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            for (suffix, shape) in layer.param_specs() {
                let name = layer.param_name(suffix);
                if !seen.insert(name.clone()) {
                    return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
                }
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::ShapeMismatch(format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            shape
                        )))
                    }
                    None => {
                        return Err(Error::InvalidConfig(format!("missing parameter {name}")))
                    }
                }
            }
        }
        if params.len() != seen.len() {
            let extra: Vec<_> = params.keys().filter(|k| !seen.contains(*k)).collect();
            return Err(Error::InvalidConfig(format!("unused parameters: {extra:?}")));
        }
        let layout = ParamLayout::from_params(&params);
        Ok(Self {
            architecture_id: architecture_id.into(),
            layers,
            params,
            input_shape,
            n_classes,
            shapes,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// All parameters flattened in layout order.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.layout.total);
        for (name, _, _) in &self.layout.entries {
            out.extend_from_slice(self.params[name].data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.layout.total {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} values, model wants {}",
                flat.len(),
                self.layout.total
            )));
        }
        for (name, offset, len) in &self.layout.entries {
            self.params
                .get_mut(name)
                .expect("layout matches params")
                .data_mut()
                .copy_from_slice(&flat[*offset..*offset + *len]);
        }
        Ok(())
    }

    /// Writes a flat gradient vector into each parameter's `grad` buffer.
    pub fn store_grads(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.layout.total {
            return Err(Error::ShapeMismatch("gradient length mismatch".into()));
        }
        for (name, offset, len) in &self.layout.entries.clone() {
            let t = self.params.get_mut(name).expect("layout matches params");
            t.grad = Some(flat[*offset..*offset + *len].to_vec());
        }
        Ok(())
    }

    /// Forward pass over a `[B,C,H,W]` batch, producing `[B,K]` logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut rows = Vec::with_capacity(batch.n_samples());
        for i in 0..batch.n_samples() {
            let (logits, _) = exec::forward_sample(self, batch.sample(i), false, None)?;
            rows.push(logits);
        }
        Tensor::stack(&rows, &[self.n_classes])
    }

    /// Forward with per-sample activation tapes for a later backward pass.
    pub fn forward_recorded(&self, batch: &Tensor) -> Result<(Tensor, Vec<SampleTape>)> {
        self.check_batch(batch)?;
        let mut rows = Vec::with_capacity(batch.n_samples());
        let mut tapes = Vec::with_capacity(batch.n_samples());
        for i in 0..batch.n_samples() {
            let (logits, tape) = exec::forward_sample(self, batch.sample(i), true, None)?;
            rows.push(logits);
            tapes.push(tape.expect("tape requested"));
        }
        Ok((Tensor::stack(&rows, &[self.n_classes])?, tapes))
    }

    /// Mean cross-entropy loss and mean flat parameter gradient over a batch.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
        let (losses, per_sample) = self.per_sample_loss_and_grads(batch, labels)?;
        let b = losses.len() as f64;
        let mut grad = vec![0.0f64; self.layout.total];
        for g in &per_sample {
            for (acc, &v) in grad.iter_mut().zip(g) {
                *acc += v as f64;
            }
        }
        let mean_grad: Vec<f32> = grad.into_iter().map(|v| (v / b) as f32).collect();
        let mean_loss = (losses.iter().map(|&l| l as f64).sum::<f64>() / b) as f32;
        Ok((mean_loss, mean_grad))
    }

    /// Per-sample cross-entropy losses and flat parameter gradients.
    pub fn per_sample_loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
    ) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        self.check_batch(batch)?;
        if labels.len() != batch.n_samples() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                batch.n_samples()
            )));
        }
        let mut losses = Vec::with_capacity(labels.len());
        let mut grads = Vec::with_capacity(labels.len());
        for i in 0..batch.n_samples() {
            let (logits, tape) = exec::forward_sample(self, batch.sample(i), true, None)?;
            let (l, dlogits) = loss::ce_grad_sample(&logits, labels[i], self.n_classes)?;
            let (pg, _) = exec::backward_sample(self, tape.as_ref().expect("tape"), &dlogits)?;
            losses.push(l);
            grads.push(pg);
        }
        Ok((losses, grads))
    }

    /// Fraction of samples whose argmax logit equals the label.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(images)?;
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if argmax(logits.sample(i)) == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?} does not match model input [B,{},{},{}]",
                batch.shape(),
                c,
                h,
                w
            )));
        }
        Ok(())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Common surface of float and quantized models; all attacks operate
/// through this trait.
pub trait Classifier: Sync {
    fn architecture_id(&self) -> &str;
    fn input_shape(&self) -> (usize, usize, usize);
    fn n_classes(&self) -> usize;
    /// Logits for one sample.
    fn logits(&self, x: &[f32]) -> Result<Vec<f32>>;
    /// Cross-entropy loss and its gradient w.r.t. the input.
    fn loss_input_grad(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)>;
    /// Margin `f_y - f_s` and its gradient w.r.t. the input.
    fn margin_input_grad(&self, x: &[f32], y: usize, s: usize) -> Result<(f32, Vec<f32>)>;

    fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape();
        c * h * w
    }
}

impl Classifier for Model {
    fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(exec::forward_sample(self, x, false, None)?.0)
    }

    fn loss_input_grad(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
        let (logits, tape) = exec::forward_sample(self, x, true, None)?;
        let (l, dlogits) = loss::ce_grad_sample(&logits, y, self.n_classes)?;
        let (_, dx) = exec::backward_sample(self, tape.as_ref().expect("tape"), &dlogits)?;
        Ok((l, dx))
    }

    fn margin_input_grad(&self, x: &[f32], y: usize, s: usize) -> Result<(f32, Vec<f32>)> {
        let (logits, tape) = exec::forward_sample(self, x, true, None)?;
        let mut dlogits = vec![0.0f32; self.n_classes];
        dlogits[y] = 1.0;
        dlogits[s] -= 1.0;
        let margin = logits[y] - logits[s];
        let (_, dx) = exec::backward_sample(self, tape.as_ref().expect("tape"), &dlogits)?;
        Ok((margin, dx))
    }
}

fn infer_shapes(layers: &[Layer], input: (usize, usize, usize)) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    let mut cur = Shape::Chw(input.0, input.1, input.2);
    let mut tags: HashMap<&str, Shape> = HashMap::new();
    for layer in layers {
        shapes.push(cur);
        cur = match &layer.kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad } => match cur {
                Shape::Chw(c, h, w) if c == *in_ch => {
                    let geom = ops::ConvGeom {
                        in_ch: *in_ch,
                        out_ch: *out_ch,
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let (oh, ow) = geom.out_hw(h, w).ok_or_else(|| {
                        Error::ShapeMismatch(format!(
                            "conv {} collapses {h}x{w} to nothing",
                            layer.name
                        ))
                    })?;
                    Shape::Chw(*out_ch, oh, ow)
                }
                other => {
                    return Err(Error::ShapeMismatch(format!(
                        "conv {} expects {in_ch} channels, got {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::GroupNorm { groups, channels } => {
                if channels % groups != 0 || *groups == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "group norm {}: {channels} channels not divisible by {groups} groups",
                        layer.name
                    )));
                }
                match cur {
                    Shape::Chw(c, _, _) if c == *channels => cur,
                    other => {
                        return Err(Error::ShapeMismatch(format!(
                            "group norm {} expects {channels} channels, got {other:?}",
                            layer.name
                        )))
                    }
                }
            }
            LayerKind::Relu => cur,
            LayerKind::Linear { in_features, out_features } => {
                let flat = cur.len();
                if flat != *in_features {
                    return Err(Error::ShapeMismatch(format!(
                        "linear {} expects {in_features} inputs, got {flat}",
                        layer.name
                    )));
                }
                Shape::Flat(*out_features)
            }
            LayerKind::ResidualAdd { source } => match tags.get(source.as_str()) {
                Some(s) if *s == cur => cur,
                Some(s) => {
                    return Err(Error::ShapeMismatch(format!(
                        "residual {}: source {source} has {s:?}, current is {cur:?}",
                        layer.name
                    )))
                }
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "residual {}: tag {source} not defined by an earlier layer",
                        layer.name
                    )))
                }
            },
            LayerKind::MaxPool { k } => match cur {
                Shape::Chw(c, h, w) if *k > 0 && h >= *k && w >= *k => {
                    Shape::Chw(c, h / k, w / k)
                }
                other => {
                    return Err(Error::ShapeMismatch(format!(
                        "max pool {} (k={k}) cannot apply to {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::GlobalAvgPool => match cur {
                Shape::Chw(c, _, _) => Shape::Flat(c),
                other => {
                    return Err(Error::ShapeMismatch(format!(
                        "global avg pool {} needs a CHW input, got {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::Flatten => Shape::Flat(cur.len()),
        };
        if let Some(tag) = &layer.tag {
            tags.insert(tag, cur);
        }
    }
    shapes.push(cur);
    Ok(shapes)
}

/// He-normal initialization for conv/linear weights, zero biases, unit
/// gamma / zero beta for group norm. Deterministic under `seed`.
pub fn init_params(layers: &[Layer], seed: u64) -> BTreeMap<String, Tensor> {
    let mut params = BTreeMap::new();
    for (li, layer) in layers.iter().enumerate() {
        let mut rng = rng::stream(seed, &[0x1217, li as u64]);
        for (suffix, shape) in layer.param_specs() {
            let n: usize = shape.iter().product();
            let data = match (&layer.kind, suffix) {
                (LayerKind::Conv2d { in_ch, kernel, .. }, "weight") => {
                    let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
                    (0..n).map(|_| (rng::standard_normal(&mut rng) * std) as f32).collect()
                }
                (LayerKind::Linear { in_features, .. }, "weight") => {
                    let std = (2.0 / *in_features as f64).sqrt();
                    (0..n).map(|_| (rng::standard_normal(&mut rng) * std) as f32).collect()
                }
                (LayerKind::GroupNorm { .. }, "gamma") => vec![1.0; n],
                _ => vec![0.0; n],
            };
            params.insert(
                layer.param_name(suffix),
                Tensor::new(shape, data).expect("spec shapes are consistent"),
            );
        }
    }
    params
}

pub fn default_groups(channels: usize) -> usize {
    let mut g = 8.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g.max(1)
}

fn conv(name: &str, in_ch: usize, out_ch: usize) -> Layer {
    Layer::new(name, LayerKind::Conv2d { in_ch, out_ch, kernel: 3, stride: 1, pad: 1 })
}

fn gnorm(name: &str, channels: usize) -> Layer {
    Layer::new(name, LayerKind::GroupNorm { groups: default_groups(channels), channels })
}

fn relu(name: &str) -> Layer {
    Layer::new(name, LayerKind::Relu)
}

/// Two conv stages plus one residual block, widths `(w1, w2)`.
pub fn micro_resnet_9(
    input_shape: (usize, usize, usize),
    n_classes: usize,
    widths: (usize, usize),
    seed: u64,
) -> Result<Model> {
    let (c, _, _) = input_shape;
    let (w1, w2) = widths;
    let layers = vec![
        conv("conv1", c, w1),
        gnorm("gn1", w1),
        relu("relu1"),
        Layer::new("pool1", LayerKind::MaxPool { k: 2 }),
        conv("conv2", w1, w2),
        gnorm("gn2", w2),
        Layer::tagged("relu2", LayerKind::Relu, "res1"),
        conv("conv3", w2, w2),
        gnorm("gn3", w2),
        relu("relu3"),
        conv("conv4", w2, w2),
        gnorm("gn4", w2),
        Layer::new("add1", LayerKind::ResidualAdd { source: "res1".into() }),
        relu("relu4"),
        Layer::new("gap", LayerKind::GlobalAvgPool),
        Layer::new("fc", LayerKind::Linear { in_features: w2, out_features: n_classes }),
    ];
    let params = init_params(&layers, seed);
    Model::from_layers("micro-resnet-9", input_shape, n_classes, layers, params)
}

/// Four residual blocks at widths `(w1, w2, w3)`.
pub fn micro_resnet_18_like(
    input_shape: (usize, usize, usize),
    n_classes: usize,
    widths: (usize, usize, usize),
    seed: u64,
) -> Result<Model> {
    let (c, _, _) = input_shape;
    let (w1, w2, w3) = widths;
    let mut layers = vec![
        conv("conv1", c, w1),
        gnorm("gn1", w1),
        Layer::tagged("relu1", LayerKind::Relu, "b1"),
    ];
    let mut n = 2;
    let mut res_block = |layers: &mut Vec<Layer>, width: usize, tag_in: &str, tag_out: Option<&str>| {
        layers.push(conv(&format!("conv{n}"), width, width));
        layers.push(gnorm(&format!("gn{n}"), width));
        layers.push(relu(&format!("relu{n}")));
        layers.push(conv(&format!("conv{}", n + 1), width, width));
        layers.push(gnorm(&format!("gn{}", n + 1), width));
        layers.push(Layer::new(
            format!("add{}", n / 2),
            LayerKind::ResidualAdd { source: tag_in.into() },
        ));
        let r = relu(&format!("relu{}", n + 1));
        layers.push(match tag_out {
            Some(t) => Layer { tag: Some(t.into()), ..r },
            None => r,
        });
        n += 2;
    };
    res_block(&mut layers, w1, "b1", None);
    layers.push(conv("convt1", w1, w2));
    layers.push(gnorm("gnt1", w2));
    layers.push(relu("relut1"));
    layers.push(Layer::tagged("poolt1", LayerKind::MaxPool { k: 2 }, "b2"));
    res_block(&mut layers, w2, "b2", None);
    layers.push(conv("convt2", w2, w3));
    layers.push(gnorm("gnt2", w3));
    layers.push(relu("relut2"));
    layers.push(Layer::tagged("poolt2", LayerKind::MaxPool { k: 2 }, "b3"));
    res_block(&mut layers, w3, "b3", Some("b4"));
    res_block(&mut layers, w3, "b4", None);
    layers.push(Layer::new("gap", LayerKind::GlobalAvgPool));
    layers.push(Layer::new("fc", LayerKind::Linear { in_features: w3, out_features: n_classes }));
    let params = init_params(&layers, seed);
    Model::from_layers("micro-resnet-18-like", input_shape, n_classes, layers, params)
}

/// Builds a registered architecture by id. `widths` empty means defaults.
pub fn build_architecture(
    id: &str,
    input_shape: (usize, usize, usize),
    n_classes: usize,
    widths: &[usize],
    seed: u64,
) -> Result<Model> {
    match id {
        "micro-resnet-9" => {
            let w = match widths {
                [] => (16, 32),
                [a, b] => (*a, *b),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "micro-resnet-9 takes 2 widths, got {widths:?}"
                    )))
                }
            };
            micro_resnet_9(input_shape, n_classes, w, seed)
        }
        "micro-resnet-18-like" => {
            let w = match widths {
                [] => (16, 32, 64),
                [a, b, c] => (*a, *b, *c),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "micro-resnet-18-like takes 3 widths, got {widths:?}"
                    )))
                }
            };
            micro_resnet_18_like(input_shape, n_classes, w, seed)
        }
        other => Err(Error::InvalidConfig(format!("unknown architecture {other}"))),
    }
}
