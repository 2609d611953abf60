//! IDX binary ingestion and emission.
//!
//! Magic: two zero bytes, dtype byte 0x08 (unsigned byte), rank byte, then
//! big-endian u32 dimension sizes and the raw payload. Image files carry
//! rank 3 `[N,H,W]` (single channel) or rank 4 `[N,C,H,W]`; label files
//! carry rank 1.

use std::fs;
use std::path::Path;

use crate::data::{DataSet, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTYPE_U8: u8 = 0x08;

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx_file(path: &Path) -> Result<IdxFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if buf.len() < 4 || buf[0] != 0 || buf[1] != 0 {
        return Err(Error::format(&p, "bad IDX magic"));
    }
    if buf[2] != DTYPE_U8 {
        return Err(Error::format(&p, format!("unsupported IDX dtype 0x{:02x}", buf[2])));
    }
    let rank = buf[3] as usize;
    let header = 4 + 4 * rank;
    if buf.len() < header {
        return Err(Error::format(&p, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    if buf.len() != header + n {
        return Err(Error::format(
            &p,
            format!("payload has {} bytes, dims {:?} want {}", buf.len() - header, dims, n),
        ));
    }
    Ok(IdxFile { dims, payload: buf[header..].to_vec() })
}

fn write_idx_file(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    buf.extend_from_slice(&[0, 0, DTYPE_U8, dims.len() as u8]);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(payload);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads an image/label IDX pair, scaling pixels by 1/255 into `[0,1]`.
/// The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DataSet> {
    let images = read_idx_file(images_path)?;
    let labels = read_idx_file(labels_path)?;
    let ip = images_path.display().to_string();
    let (n, c, h, w) = match images.dims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        other => return Err(Error::format(&ip, format!("image rank {} unsupported", other.len()))),
    };
    if labels.dims.len() != 1 {
        return Err(Error::format(
            labels_path.display().to_string(),
            "label file must be rank 1",
        ));
    }
    if labels.dims[0] != n {
        return Err(Error::format(
            &ip,
            format!("{} images but {} labels", n, labels.dims[0]),
        ));
    }
    let data: Vec<f32> = images.payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.payload.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    DataSet::new(Tensor::new(vec![n, c, h, w], data)?, labels, n_classes, Provenance::IdxFile)
}

/// Writes a dataset as an IDX pair, rounding pixels onto the byte grid.
/// Single-channel data is written rank 3, multi-channel rank 4.
pub fn write_idx(ds: &DataSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_shape();
    let dims: Vec<usize> =
        if c == 1 { vec![ds.len(), h, w] } else { vec![ds.len(), c, h, w] };
    let payload: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_idx_file(images_path, &dims, &payload)?;
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write_idx_file(labels_path, &[ds.len()], &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn canonical_pair_loads() {
        let dir = tmp();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        let pixels: Vec<u8> = (0..10 * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_idx_file(&ip, &[10, 28, 28], &pixels).unwrap();
        write_idx_file(&lp, &[10], &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[10, 1, 28, 28]);
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.n_classes, 5);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tmp();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        write_idx_file(&ip, &[10, 2, 2], &vec![0u8; 40]).unwrap();
        write_idx_file(&lp, &[9], &vec![0u8; 9]).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let dir = tmp();
        let p = dir.path().join("x.idx");
        std::fs::write(&p, [1u8, 0, 8, 1]).unwrap();
        assert!(read_idx_file(&p).is_err());
        std::fs::write(&p, [0u8, 0, 8, 1, 0, 0, 0, 5, 1, 2]).unwrap();
        assert!(read_idx_file(&p).is_err());
    }

    #[test]
    fn byte_values_scale_exactly() {
        let dir = tmp();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        write_idx_file(&ip, &[1, 1, 2], &[255, 0]).unwrap();
        write_idx_file(&lp, &[1], &[0]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.data(), &[1.0, 0.0]);
    }
}
