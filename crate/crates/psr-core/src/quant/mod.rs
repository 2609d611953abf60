//! Static post-training quantization: per-tensor affine int8 weights plus
//! min-max calibrated activation ranges, with fake-quant inference and a
//! straight-through gradient so quantized models stay attackable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{exec, loss, Classifier, Model};
use crate::tensor::Tensor;

/// Affine int8 mapping `q = clamp(round(v/scale) + zero_point, -128, 127)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Parameters covering `[min, max]`; a degenerate range falls back to a
    /// symmetric grid around zero. The range is anchored to include zero
    /// first, otherwise the clamped zero-point cannot represent it and the
    /// half-scale error bound breaks.
    pub fn from_range(min: f32, max: f32) -> Self {
        let min = min.min(0.0);
        let max = max.max(0.0);
        if max > min {
            let scale = (max - min) / 255.0;
            let zero_point = (-128.0 - min / scale).round().clamp(-128.0, 127.0) as i32;
            Self { scale, zero_point }
        } else {
            // max == min == 0
            let scale = (min.abs().max(1e-8)) / 127.0;
            Self { scale, zero_point: 0 }
        }
    }

    pub fn quantize(&self, v: f32) -> i8 {
        ((v / self.scale).round() + self.zero_point as f32).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }

    /// `dequantize(quantize(v))` plus an in-range flag for the
    /// straight-through gradient (false under saturation).
    pub fn fake(&self, v: f32) -> (f32, bool) {
        let raw = (v / self.scale).round() + self.zero_point as f32;
        let in_range = (-128.0..=127.0).contains(&raw);
        let q = raw.clamp(-128.0, 127.0);
        ((q - self.zero_point as f32) * self.scale, in_range)
    }
}

/// Calibrated per-site (min, max), one site per layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRanges {
    pub sites: Vec<(f32, f32)>,
}

/// One forward sweep over the calibration set, recording running min/max at
/// every layer boundary.
pub fn calibrate_ranges(model: &Model, calibration: &Tensor) -> Result<ActivationRanges> {
    if calibration.n_samples() == 0 {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let mut sites = vec![(f32::INFINITY, f32::NEG_INFINITY); model.layers.len()];
    for i in 0..calibration.n_samples() {
        exec::forward_sample_observed(model, calibration.sample(i), false, None, |idx, act| {
            let (lo, hi) = &mut sites[idx];
            for &v in act {
                if v < *lo {
                    *lo = v;
                }
                if v > *hi {
                    *hi = v;
                }
            }
        })?;
    }
    Ok(ActivationRanges { sites })
}

/// Int8 weights with per-tensor params, calibrated activation sites, and a
/// dequantized execution copy of the source model.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub weight_codes: BTreeMap<String, (Vec<i8>, QuantParams)>,
    pub act_ranges: ActivationRanges,
    pub(crate) act_params: Vec<QuantParams>,
    /// Source model with every weight replaced by its dequantized code.
    pub(crate) exec_model: Model,
}

/// Quantizes every parameter tensor of `model` and freezes the calibrated
/// activation ranges.
pub fn quantize_model(model: &Model, ranges: &ActivationRanges) -> Result<QuantizedModel> {
    if ranges.sites.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} calibrated sites for {} layers",
            ranges.sites.len(),
            model.layers.len()
        )));
    }
    let mut weight_codes = BTreeMap::new();
    let mut exec_model = model.clone();
    for (name, tensor) in &model.params {
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("weight tensor {name}")));
        }
        let lo = tensor.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = tensor.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let qp = QuantParams::from_range(lo, hi);
        let codes: Vec<i8> = tensor.data().iter().map(|&v| qp.quantize(v)).collect();
        let deq: Vec<f32> = codes.iter().map(|&q| qp.dequantize(q)).collect();
        exec_model
            .params
            .get_mut(name)
            .expect("same keys")
            .data_mut()
            .copy_from_slice(&deq);
        weight_codes.insert(name.clone(), (codes, qp));
    }
    let act_params =
        ranges.sites.iter().map(|&(lo, hi)| QuantParams::from_range(lo, hi)).collect();
    Ok(QuantizedModel {
        weight_codes,
        act_ranges: ranges.clone(),
        act_params,
        exec_model,
    })
}

impl QuantizedModel {
    pub fn source_model(&self) -> &Model {
        &self.exec_model
    }

    /// Fake-quant forward over a `[B,C,H,W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(batch.n_samples());
        for i in 0..batch.n_samples() {
            let (logits, _) =
                exec::forward_sample(&self.exec_model, batch.sample(i), false, Some(&self.act_params))?;
            rows.push(logits);
        }
        Tensor::stack(&rows, &[self.exec_model.n_classes])
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(images)?;
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if crate::nn::argmax(logits.sample(i)) == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

impl Classifier for QuantizedModel {
    fn architecture_id(&self) -> &str {
        &self.exec_model.architecture_id
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.exec_model.input_shape
    }

    fn n_classes(&self) -> usize {
        self.exec_model.n_classes
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(exec::forward_sample(&self.exec_model, x, false, Some(&self.act_params))?.0)
    }

    fn loss_input_grad(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
        let (logits, tape) =
            exec::forward_sample(&self.exec_model, x, true, Some(&self.act_params))?;
        let (l, dlogits) = loss::ce_grad_sample(&logits, y, self.exec_model.n_classes)?;
        let (_, dx) =
            exec::backward_sample(&self.exec_model, tape.as_ref().expect("tape"), &dlogits)?;
        Ok((l, dx))
    }

    fn margin_input_grad(&self, x: &[f32], y: usize, s: usize) -> Result<(f32, Vec<f32>)> {
        let (logits, tape) =
            exec::forward_sample(&self.exec_model, x, true, Some(&self.act_params))?;
        let mut dlogits = vec![0.0f32; self.exec_model.n_classes];
        dlogits[y] = 1.0;
        dlogits[s] -= 1.0;
        let margin = logits[y] - logits[s];
        let (_, dx) =
            exec::backward_sample(&self.exec_model, tape.as_ref().expect("tape"), &dlogits)?;
        Ok((margin, dx))
    }
}

/// Float model storage: 4 bytes per parameter.
pub fn model_size_bytes(model: &Model) -> u64 {
    4 * model.n_params() as u64
}

/// Quantized storage: 1 byte per parameter, 5 bytes of scale/zero-point per
/// tensor, 8 bytes per calibrated activation site.
pub fn quantized_size_bytes(q: &QuantizedModel) -> u64 {
    let params: u64 = q.exec_model.n_params() as u64;
    let per_tensor = 5 * q.weight_codes.len() as u64;
    let range_table = 8 * q.act_ranges.sites.len() as u64;
    params + per_tensor + range_table
}

pub fn size_reduction_pct(before: u64, after: u64) -> f64 {
    100.0 * (1.0 - after as f64 / before as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{micro_resnet_9, Layer, LayerKind};
    use crate::rng;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn small_model() -> Model {
        micro_resnet_9((1, 8, 8), 3, (4, 8), 9).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, &[1]);
        let data: Vec<f32> = (0..n * 64).map(|_| rng.random::<f32>()).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn single_sample_calibration_equals_that_samples_extrema() {
        let m = small_model();
        let one = batch(1, 3);
        let ranges = calibrate_ranges(&m, &one).unwrap();
        let mut seen = vec![(f32::INFINITY, f32::NEG_INFINITY); m.layers.len()];
        exec::forward_sample_observed(&m, one.sample(0), false, None, |idx, act| {
            for &v in act {
                seen[idx].0 = seen[idx].0.min(v);
                seen[idx].1 = seen[idx].1.max(v);
            }
        })
        .unwrap();
        assert_eq!(ranges.sites, seen);
    }

    #[test]
    fn calibration_ranges_grow_monotonically_with_the_set() {
        let m = small_model();
        let small = batch(4, 5);
        let big = {
            let mut data = small.data().to_vec();
            data.extend_from_slice(batch(4, 6).data());
            Tensor::new(vec![8, 1, 8, 8], data).unwrap()
        };
        let rs = calibrate_ranges(&m, &small).unwrap();
        let rb = calibrate_ranges(&m, &big).unwrap();
        for ((lo_s, hi_s), (lo_b, hi_b)) in rs.sites.iter().zip(&rb.sites) {
            assert!(lo_b <= lo_s && hi_b >= hi_s);
        }
    }

    #[test]
    fn relu_sites_have_nonnegative_minima() {
        let m = small_model();
        let ranges = calibrate_ranges(&m, &batch(6, 7)).unwrap();
        for (idx, layer) in m.layers.iter().enumerate() {
            if matches!(layer.kind, LayerKind::Relu) {
                assert!(ranges.sites[idx].0 >= 0.0, "relu site {} has min < 0", layer.name);
            }
        }
    }

    #[test]
    fn empty_calibration_set_is_rejected() {
        // zero-sample tensors cannot be built, so exercise the guard directly
        let m = small_model();
        let t = Tensor { shape: vec![0, 1, 8, 8], data: vec![], grad: None };
        assert!(calibrate_ranges(&m, &t).is_err());
    }

    #[test]
    fn constant_tensor_quantizes_to_one_code_within_half_scale() {
        let qp = QuantParams::from_range(0.37, 0.37);
        let q = qp.quantize(0.37);
        assert!((qp.dequantize(q) - 0.37).abs() <= qp.scale / 2.0 + 1e-7);
    }

    #[test]
    fn grid_values_round_trip_exactly() {
        let qp = QuantParams::from_range(-1.0, 1.0);
        for code in [-128i8, -5, 0, 17, 127] {
            let v = qp.dequantize(code);
            let (fq, _) = qp.fake(v);
            assert_eq!(fq, v);
        }
    }

    #[test]
    fn random_tensor_error_bounded_by_half_scale() {
        let mut rng = rng::stream(13, &[0]);
        let vals: Vec<f32> = (0..4096).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let qp = QuantParams::from_range(lo, hi);
        for &v in &vals {
            let (fq, in_range) = qp.fake(v);
            assert!(in_range);
            assert!((fq - v).abs() <= qp.scale / 2.0 + 1e-7, "v={v} fq={fq} s={}", qp.scale);
        }
    }

    #[test]
    fn out_of_range_values_saturate() {
        let qp = QuantParams::from_range(-1.0, 1.0);
        let (fq_hi, in_hi) = qp.fake(10.0);
        let (fq_lo, in_lo) = qp.fake(-10.0);
        assert!(!in_hi && !in_lo);
        assert!((fq_hi - 1.0).abs() <= qp.scale + 1e-6);
        assert!((fq_lo + 1.0).abs() <= qp.scale + 1e-6);
    }

    #[test]
    fn fine_grid_limit_matches_float_model() {
        // Small-magnitude weights and activations make every scale tiny, so
        // fake-quant logits approach the float ones.
        let layers = vec![
            Layer::new("flat", LayerKind::Flatten),
            Layer::new("fc", LayerKind::Linear { in_features: 4, out_features: 3 }),
        ];
        let mut params = BTreeMap::new();
        let w: Vec<f32> = (0..12).map(|i| (i as f32 - 6.0) * 1e-3).collect();
        params.insert("fc.weight".into(), Tensor::new(vec![3, 4], w).unwrap());
        params.insert("fc.bias".into(), Tensor::new(vec![3], vec![1e-3, -1e-3, 0.0]).unwrap());
        let m = Model::from_layers("lin", (1, 1, 4), 3, layers, params).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 4], vec![0.001, 0.004, 0.002, 0.0, 0.003, 0.001, 0.0, 0.002])
            .unwrap();
        let ranges = calibrate_ranges(&m, &x).unwrap();
        let qm = quantize_model(&m, &ranges).unwrap();
        let f = m.forward(&x).unwrap();
        let g = qm.forward(&x).unwrap();
        for (a, b) in f.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn quantized_forward_is_deterministic() {
        let m = small_model();
        let x = batch(3, 21);
        let ranges = calibrate_ranges(&m, &x).unwrap();
        let qm = quantize_model(&m, &ranges).unwrap();
        assert_eq!(qm.forward(&x).unwrap().data(), qm.forward(&x).unwrap().data());
    }

    #[test]
    fn size_accounting_arithmetic() {
        // 1000 params in one tensor: 4000 bytes float, 1005 + range table.
        let layers = vec![
            Layer::new("flat", LayerKind::Flatten),
            Layer::new("fc", LayerKind::Linear { in_features: 1000, out_features: 1 }),
        ];
        let mut params = BTreeMap::new();
        params.insert("fc.weight".into(), Tensor::filled(vec![1, 1000], 0.5));
        params.insert("fc.bias".into(), Tensor::zeros(vec![1]));
        let m = Model::from_layers("lin", (1, 1, 1000), 1, layers, params).unwrap();
        assert_eq!(model_size_bytes(&m), 4 * 1001);
        let x = Tensor::filled(vec![1, 1, 1, 1000], 0.1);
        let qm = quantize_model(&m, &calibrate_ranges(&m, &x).unwrap()).unwrap();
        // 1001 params + 2 tensors * 5 + 2 sites * 8
        assert_eq!(quantized_size_bytes(&qm), 1001 + 10 + 16);
    }

    #[test]
    fn reduction_approaches_75_pct_in_the_large_param_limit() {
        let layers = vec![
            Layer::new("flat", LayerKind::Flatten),
            Layer::new("fc", LayerKind::Linear { in_features: 100_000, out_features: 1 }),
        ];
        let mut params = BTreeMap::new();
        params.insert("fc.weight".into(), Tensor::filled(vec![1, 100_000], 0.01));
        params.insert("fc.bias".into(), Tensor::zeros(vec![1]));
        let m = Model::from_layers("lin", (1, 1, 100_000), 1, layers, params).unwrap();
        let x = Tensor::filled(vec![1, 1, 1, 100_000], 0.1);
        let qm = quantize_model(&m, &calibrate_ranges(&m, &x).unwrap()).unwrap();
        let red = size_reduction_pct(model_size_bytes(&m), quantized_size_bytes(&qm));
        assert!((red - 75.0).abs() < 0.1, "reduction {red}");
    }

    #[test]
    fn micro_resnet_reduction_in_band() {
        let m = micro_resnet_9((1, 10, 10), 4, (16, 32), 5).unwrap();
        let mut rng = rng::stream(33, &[2]);
        let data: Vec<f32> = (0..200).map(|_| rng.random::<f32>()).collect();
        let x = Tensor::new(vec![2, 1, 10, 10], data).unwrap();
        let qm = quantize_model(&m, &calibrate_ranges(&m, &x).unwrap()).unwrap();
        let red = size_reduction_pct(model_size_bytes(&m), quantized_size_bytes(&qm));
        assert!((70.0..=77.0).contains(&red), "reduction {red}");
    }
}
