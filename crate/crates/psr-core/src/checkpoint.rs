//! Checkpoint container.
//!
//! Layout: magic `PSRL`, version (u32 LE), tensor count (u32 LE), then per
//! tensor: name length (u16 LE) + UTF-8 name, dtype tag (1 byte: 0 = f32,
//! 1 = i8), rank (1 byte), dims (u32 LE each), raw little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::quant::{ActivationRanges, QuantParams, QuantizedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSRL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

pub fn write_checkpoint(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("tensor name too long: {}", e.name)));
        }
        let n: usize = e.dims.iter().product();
        if n != e.payload.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} dims {:?} vs payload {}",
                e.name,
                e.dims,
                e.payload.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(match e.payload {
            Payload::F32(_) => 0,
            Payload::I8(_) => 1,
        });
        buf.push(e.dims.len() as u8);
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::format(&p, "truncated payload"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(&p, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(&p, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format(&p, "tensor name is not UTF-8"))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let payload = match dtype {
            0 => {
                let bytes = take(&mut pos, 4 * n)?;
                Payload::F32(
                    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            1 => Payload::I8(take(&mut pos, n)?.iter().map(|&b| b as i8).collect()),
            other => return Err(Error::format(&p, format!("unknown dtype tag {other}"))),
        };
        entries.push(Entry { name, dims, payload });
    }
    if pos != buf.len() {
        return Err(Error::format(&p, "trailing bytes after last tensor"));
    }
    Ok(entries)
}

/// A checkpoint of either flavor, usable wherever a classifier is expected.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Float(Model),
    Quantized(QuantizedModel),
}

impl LoadedModel {
    pub fn classifier(&self) -> &dyn crate::nn::Classifier {
        match self {
            LoadedModel::Float(m) => m,
            LoadedModel::Quantized(q) => q,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, LoadedModel::Quantized(_))
    }
}

/// Loads a checkpoint, dispatching on the embedded kind.
pub fn load_any(path: &Path) -> Result<LoadedModel> {
    let entries = read_checkpoint(path)?;
    let meta = parse_meta(&entries, path)?;
    match meta.kind.as_str() {
        "model" => load_model(path).map(LoadedModel::Float),
        "qmodel" => load_quantized(path).map(LoadedModel::Quantized),
        other => Err(Error::format(path.display().to_string(), format!("unknown kind {other}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    architecture_id: String,
    input_shape: (usize, usize, usize),
    n_classes: usize,
    layers: Vec<Layer>,
}

const META_NAME: &str = "__meta__";
const RANGES_NAME: &str = "__act_ranges__";

fn meta_entry(meta: &ModelMeta) -> Entry {
    let json = serde_json::to_vec(meta).expect("meta serializes");
    Entry {
        name: META_NAME.into(),
        dims: vec![json.len()],
        payload: Payload::I8(json.into_iter().map(|b| b as i8).collect()),
    }
}

fn parse_meta(entries: &[Entry], path: &Path) -> Result<ModelMeta> {
    let p = path.display().to_string();
    let e = entries
        .iter()
        .find(|e| e.name == META_NAME)
        .ok_or_else(|| Error::format(&p, "missing __meta__ tensor"))?;
    let bytes: Vec<u8> = match &e.payload {
        Payload::I8(v) => v.iter().map(|&b| b as u8).collect(),
        _ => return Err(Error::format(&p, "__meta__ must be i8")),
    };
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&p, format!("bad meta json: {e}")))
}

/// Writes a float model: meta + one f32 tensor per parameter.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        kind: "model".into(),
        architecture_id: model.architecture_id.clone(),
        input_shape: model.input_shape,
        n_classes: model.n_classes,
        layers: model.layers.clone(),
    };
    let mut entries = vec![meta_entry(&meta)];
    for (name, t) in &model.params {
        entries.push(Entry {
            name: name.clone(),
            dims: t.shape().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        });
    }
    write_checkpoint(path, &entries)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let entries = read_checkpoint(path)?;
    let meta = parse_meta(&entries, path)?;
    let p = path.display().to_string();
    if meta.kind != "model" {
        return Err(Error::format(&p, format!("expected a float model, found {}", meta.kind)));
    }
    let mut params = BTreeMap::new();
    for e in entries {
        if e.name == META_NAME {
            continue;
        }
        match e.payload {
            Payload::F32(v) => {
                params.insert(e.name, Tensor::new(e.dims, v)?);
            }
            Payload::I8(_) => {
                return Err(Error::format(&p, format!("unexpected i8 tensor {}", e.name)))
            }
        }
    }
    Model::from_layers(meta.architecture_id, meta.input_shape, meta.n_classes, meta.layers, params)
}

/// Writes a quantized model: meta, i8 weight codes, per-tensor qparams and
/// the activation range table (dtype tag 1 for the int8 payloads).
pub fn save_quantized(q: &QuantizedModel, path: &Path) -> Result<()> {
    let m = q.source_model();
    let meta = ModelMeta {
        kind: "qmodel".into(),
        architecture_id: m.architecture_id.clone(),
        input_shape: m.input_shape,
        n_classes: m.n_classes,
        layers: m.layers.clone(),
    };
    let mut entries = vec![meta_entry(&meta)];
    let mut ranges_flat = Vec::with_capacity(q.act_ranges.sites.len() * 2);
    for &(lo, hi) in &q.act_ranges.sites {
        ranges_flat.push(lo);
        ranges_flat.push(hi);
    }
    entries.push(Entry {
        name: RANGES_NAME.into(),
        dims: vec![q.act_ranges.sites.len(), 2],
        payload: Payload::F32(ranges_flat),
    });
    for (name, (codes, qp)) in &q.weight_codes {
        entries.push(Entry {
            name: name.clone(),
            dims: m.params[name].shape().to_vec(),
            payload: Payload::I8(codes.clone()),
        });
        entries.push(Entry {
            name: format!("{name}.qparam"),
            dims: vec![2],
            payload: Payload::F32(vec![qp.scale, qp.zero_point as f32]),
        });
    }
    write_checkpoint(path, &entries)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let entries = read_checkpoint(path)?;
    let meta = parse_meta(&entries, path)?;
    let p = path.display().to_string();
    if meta.kind != "qmodel" {
        return Err(Error::format(&p, format!("expected a quantized model, found {}", meta.kind)));
    }
    let mut ranges = None;
    let mut codes: BTreeMap<String, (Vec<usize>, Vec<i8>)> = BTreeMap::new();
    let mut qparams: BTreeMap<String, QuantParams> = BTreeMap::new();
    for e in entries {
        if e.name == META_NAME {
            continue;
        }
        if e.name == RANGES_NAME {
            if let Payload::F32(v) = e.payload {
                ranges = Some(ActivationRanges {
                    sites: v.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
                });
            }
            continue;
        }
        if let Some(base) = e.name.strip_suffix(".qparam") {
            if let Payload::F32(v) = &e.payload {
                if v.len() != 2 {
                    return Err(Error::format(&p, format!("bad qparam for {base}")));
                }
                qparams.insert(base.to_string(), QuantParams {
                    scale: v[0],
                    zero_point: v[1] as i32,
                });
            }
            continue;
        }
        match e.payload {
            Payload::I8(v) => {
                codes.insert(e.name, (e.dims, v));
            }
            Payload::F32(_) => {
                return Err(Error::format(&p, format!("unexpected f32 tensor {}", e.name)))
            }
        }
    }
    let ranges = ranges.ok_or_else(|| Error::format(&p, "missing activation ranges"))?;

    let mut params = BTreeMap::new();
    let mut weight_codes = BTreeMap::new();
    for (name, (dims, code)) in codes {
        let qp = *qparams
            .get(&name)
            .ok_or_else(|| Error::format(&p, format!("missing qparam for {name}")))?;
        let deq: Vec<f32> = code.iter().map(|&c| qp.dequantize(c)).collect();
        params.insert(name.clone(), Tensor::new(dims, deq)?);
        weight_codes.insert(name, (code, qp));
    }
    let exec_model = Model::from_layers(
        meta.architecture_id,
        meta.input_shape,
        meta.n_classes,
        meta.layers,
        params,
    )?;
    let act_params =
        ranges.sites.iter().map(|&(lo, hi)| QuantParams::from_range(lo, hi)).collect();
    Ok(QuantizedModel { weight_codes, act_ranges: ranges, act_params, exec_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::micro_resnet_9;
    use crate::quant::{calibrate_ranges, quantize_model};

    #[test]
    fn container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let entries = vec![
            Entry {
                name: "a".into(),
                dims: vec![2, 2],
                payload: Payload::F32(vec![1.0, -2.5, 0.0, 3.25]),
            },
            Entry { name: "b".into(), dims: vec![3], payload: Payload::I8(vec![-128, 0, 127]) },
        ];
        write_checkpoint(&path, &entries).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), entries);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        write_checkpoint(
            &path,
            &[Entry { name: "x".into(), dims: vec![1], payload: Payload::I8(vec![7]) }],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PSRL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes()); // version
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes()); // count
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes()); // name len
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 1); // dtype i8
        assert_eq!(bytes[16], 1); // rank
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes()); // dim
        assert_eq!(bytes[21], 7); // payload
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_checkpoint(&path).is_err());
        std::fs::write(&path, b"PSR").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn model_save_load_is_bit_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = micro_resnet_9((1, 8, 8), 3, (4, 8), 17).unwrap();
        save_model(&m, &path).unwrap();
        let m2 = load_model(&path).unwrap();
        assert_eq!(m.flat_params(), m2.flat_params());
        assert_eq!(m.architecture_id, m2.architecture_id);
        assert_eq!(m.layers, m2.layers);
        // identical bytes when saved again
        let path2 = dir.path().join("m2.ckpt");
        save_model(&m2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn quantized_save_load_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        let m = micro_resnet_9((1, 8, 8), 3, (4, 8), 23).unwrap();
        let x = Tensor::filled(vec![2, 1, 8, 8], 0.4);
        let qm = quantize_model(&m, &calibrate_ranges(&m, &x).unwrap()).unwrap();
        save_quantized(&qm, &path).unwrap();
        let qm2 = load_quantized(&path).unwrap();
        assert_eq!(qm.forward(&x).unwrap().data(), qm2.forward(&x).unwrap().data());
    }
}
