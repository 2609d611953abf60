//! Single-sample executor: walks the layer stack forward (optionally
//! recording a tape and applying per-site activation fake-quantization) and
//! backward (producing flat parameter gradients and the input gradient).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ops, LayerKind, Model, Shape};
use crate::quant::QuantParams;

#[derive(Debug, Clone)]
pub(crate) enum Saved {
    Conv { input: Vec<f32>, in_hw: (usize, usize) },
    GroupNorm { xhat: Vec<f32>, inv_std: Vec<f32>, in_chw: (usize, usize, usize) },
    Relu { mask: Vec<bool> },
    Linear { input: Vec<f32> },
    Residual,
    MaxPool { argmax: Vec<u32>, in_len: usize },
    Gap { in_chw: (usize, usize, usize) },
    Flatten,
}

/// Activation tape for one sample; owned by the caller, never shared.
#[derive(Debug, Clone)]
pub struct SampleTape {
    pub(crate) saved: Vec<Saved>,
    /// Straight-through masks per layer when the pass was fake-quantized.
    pub(crate) fq_masks: Vec<Option<Vec<bool>>>,
}

fn chw(shape: Shape, what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        Shape::Chw(c, h, w) => Ok((c, h, w)),
        other => Err(Error::ShapeMismatch(format!("{what} expects CHW, got {other:?}"))),
    }
}

pub(crate) fn forward_sample(
    model: &Model,
    x: &[f32],
    record: bool,
    act_quant: Option<&[QuantParams]>,
) -> Result<(Vec<f32>, Option<SampleTape>)> {
    forward_sample_observed(model, x, record, act_quant, |_, _| {})
}

/// Forward pass that additionally reports each layer's outgoing activation
/// to `observe(layer_idx, values)`; used by range calibration.
pub(crate) fn forward_sample_observed(
    model: &Model,
    x: &[f32],
    record: bool,
    act_quant: Option<&[QuantParams]>,
    mut observe: impl FnMut(usize, &[f32]),
) -> Result<(Vec<f32>, Option<SampleTape>)> {
    if x.len() != model.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, model wants {}",
            x.len(),
            model.input_len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    if let Some(q) = act_quant {
        if q.len() != model.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} activation sites for {} layers",
                q.len(),
                model.layers.len()
            )));
        }
    }

    let mut tape = record.then(|| SampleTape {
        saved: Vec::with_capacity(model.layers.len()),
        fq_masks: Vec::with_capacity(model.layers.len()),
    });
    let mut act = x.to_vec();
    let mut tags: HashMap<&str, Vec<f32>> = HashMap::new();

    for (idx, layer) in model.layers.iter().enumerate() {
        let in_shape = model.shapes[idx];
        let (out, saved) = match &layer.kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                let (_, h, w) = chw(in_shape, &layer.name)?;
                let geom = ops::ConvGeom {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                let weight = model.params[&layer.param_name("weight")].data();
                let bias = model.params[&layer.param_name("bias")].data();
                let out = ops::conv2d_forward(&act, (h, w), &geom, weight, bias);
                (out, Saved::Conv { input: std::mem::take(&mut act), in_hw: (h, w) })
            }
            LayerKind::GroupNorm { groups, channels: _ } => {
                let dims = chw(in_shape, &layer.name)?;
                let gamma = model.params[&layer.param_name("gamma")].data();
                let beta = model.params[&layer.param_name("beta")].data();
                let (out, xhat, inv_std) =
                    ops::group_norm_forward(&act, dims, *groups, gamma, beta, crate::nn::GROUP_NORM_EPS);
                (out, Saved::GroupNorm { xhat, inv_std, in_chw: dims })
            }
            LayerKind::Relu => {
                let (out, mask) = ops::relu_forward(&act);
                (out, Saved::Relu { mask })
            }
            LayerKind::Linear { out_features, .. } => {
                let weight = model.params[&layer.param_name("weight")].data();
                let bias = model.params[&layer.param_name("bias")].data();
                let out = ops::linear_forward(&act, weight, bias, *out_features);
                (out, Saved::Linear { input: std::mem::take(&mut act) })
            }
            LayerKind::ResidualAdd { source } => {
                let skip = tags.get(source.as_str()).ok_or_else(|| {
                    Error::InvalidConfig(format!("residual source {source} not saved"))
                })?;
                let out: Vec<f32> = act.iter().zip(skip).map(|(a, b)| a + b).collect();
                (out, Saved::Residual)
            }
            LayerKind::MaxPool { k } => {
                let dims = chw(in_shape, &layer.name)?;
                let (out, argmax, _) = ops::max_pool_forward(&act, dims, *k);
                (out, Saved::MaxPool { argmax, in_len: act.len() })
            }
            LayerKind::GlobalAvgPool => {
                let dims = chw(in_shape, &layer.name)?;
                let out = ops::global_avg_pool_forward(&act, dims);
                (out, Saved::Gap { in_chw: dims })
            }
            LayerKind::Flatten => (std::mem::take(&mut act), Saved::Flatten),
        };
        act = out;
        if !act.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("activation after layer {}", layer.name)));
        }
        let mut fq_mask = None;
        if let Some(q) = act_quant {
            let qp = &q[idx];
            let mut mask = Vec::with_capacity(act.len());
            for v in act.iter_mut() {
                let (fq, in_range) = qp.fake(*v);
                *v = fq;
                mask.push(in_range);
            }
            fq_mask = Some(mask);
        }
        observe(idx, &act);
        if let Some(t) = tape.as_mut() {
            t.saved.push(saved);
            t.fq_masks.push(fq_mask);
        }
        if let Some(tag) = &layer.tag {
            tags.insert(tag, act.clone());
        }
    }
    Ok((act, tape))
}

/// Reverse pass over a recorded tape. Returns flat parameter gradients in
/// layout order plus the gradient w.r.t. the input sample.
pub(crate) fn backward_sample(
    model: &Model,
    tape: &SampleTape,
    dlogits: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    if dlogits.len() != model.shapes.last().expect("shapes").len() {
        return Err(Error::ShapeMismatch("dlogits length mismatch".into()));
    }
    let mut flat = vec![0.0f32; model.layout.total];
    let mut g = dlogits.to_vec();
    let mut pending: HashMap<&str, Vec<f32>> = HashMap::new();

    for idx in (0..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        if let Some(tag) = &layer.tag {
            if let Some(p) = pending.remove(tag.as_str()) {
                for (gi, pi) in g.iter_mut().zip(&p) {
                    *gi += pi;
                }
            }
        }
        if let Some(mask) = &tape.fq_masks[idx] {
            for (gi, &m) in g.iter_mut().zip(mask) {
                if !m {
                    *gi = 0.0;
                }
            }
        }
        g = match (&layer.kind, &tape.saved[idx]) {
            (LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad }, Saved::Conv { input, in_hw }) => {
                let geom = ops::ConvGeom {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                let weight = model.params[&layer.param_name("weight")].data();
                let (dx, dw, db) = ops::conv2d_backward(&g, input, *in_hw, &geom, weight);
                add_param_grad(model, &mut flat, &layer.param_name("weight"), &dw)?;
                add_param_grad(model, &mut flat, &layer.param_name("bias"), &db)?;
                dx
            }
            (LayerKind::GroupNorm { groups, .. }, Saved::GroupNorm { xhat, inv_std, in_chw }) => {
                let gamma = model.params[&layer.param_name("gamma")].data();
                let (dx, dgamma, dbeta) =
                    ops::group_norm_backward(&g, xhat, inv_std, *in_chw, *groups, gamma);
                add_param_grad(model, &mut flat, &layer.param_name("gamma"), &dgamma)?;
                add_param_grad(model, &mut flat, &layer.param_name("beta"), &dbeta)?;
                dx
            }
            (LayerKind::Relu, Saved::Relu { mask }) => ops::relu_backward(&g, mask),
            (LayerKind::Linear { .. }, Saved::Linear { input }) => {
                let weight = model.params[&layer.param_name("weight")].data();
                let (dx, dw, db) = ops::linear_backward(&g, input, weight);
                add_param_grad(model, &mut flat, &layer.param_name("weight"), &dw)?;
                add_param_grad(model, &mut flat, &layer.param_name("bias"), &db)?;
                dx
            }
            (LayerKind::ResidualAdd { source }, Saved::Residual) => {
                let entry = pending.entry(source.as_str()).or_insert_with(|| vec![0.0; g.len()]);
                for (e, gi) in entry.iter_mut().zip(&g) {
                    *e += gi;
                }
                g
            }
            (LayerKind::MaxPool { .. }, Saved::MaxPool { argmax, in_len }) => {
                ops::max_pool_backward(&g, argmax, *in_len)
            }
            (LayerKind::GlobalAvgPool, Saved::Gap { in_chw }) => {
                ops::global_avg_pool_backward(&g, *in_chw)
            }
            (LayerKind::Flatten, Saved::Flatten) => g,
            _ => return Err(Error::InvalidConfig("tape does not match model".into())),
        };
    }
    if !pending.is_empty() {
        return Err(Error::InvalidConfig("unresolved residual gradient".into()));
    }
    Ok((flat, g))
}

fn add_param_grad(model: &Model, flat: &mut [f32], name: &str, grad: &[f32]) -> Result<()> {
    let (off, len) = model
        .layout
        .span(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
    if len != grad.len() {
        return Err(Error::ShapeMismatch(format!("gradient for {name} has wrong length")));
    }
    for (f, g) in flat[off..off + len].iter_mut().zip(grad) {
        *f += g;
    }
    Ok(())
}
