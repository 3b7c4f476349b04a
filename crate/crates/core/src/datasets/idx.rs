//! IDX (MNIST) binary format loader.
//!
//! Image files start with big-endian magic 0x00000803 followed by count,
//! rows, cols; label files with 0x00000801 followed by count.

use super::{Images, LabeledDataset, Provenance};
use crate::error::{Error, Result};
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an MNIST-style pair of IDX files. `images_path`/`labels_path`
/// point at the raw (uncompressed) files. Pixels are scaled to `[0,1]`
/// by division by 255.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if images.count() != labels.len() {
        return Err(Error::Ingestion(format!(
            "image count {} does not match label count {}",
            images.count(),
            labels.len()
        )));
    }
    LabeledDataset::new(images, labels, Provenance::Mnist)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset
        .checked_add(4)
        .ok_or_else(|| Error::Ingestion("header offset overflow".into()))?;
    let chunk = bytes
        .get(offset..end)
        .ok_or_else(|| Error::Ingestion("truncated IDX header".into()))?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

pub(crate) fn parse_idx_images(bytes: &[u8]) -> Result<Images> {
    if read_u32_be(bytes, 0)? != IMAGE_MAGIC {
        return Err(Error::Ingestion("bad IDX image magic".into()));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let expected = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Ingestion("IDX dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::Ingestion(format!(
            "IDX image payload {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Images::new([n, h, w, 1], data)
}

pub(crate) fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if read_u32_be(bytes, 0)? != LABEL_MAGIC {
        return Err(Error::Ingestion("bad IDX label magic".into()));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Ingestion(format!(
            "IDX label payload {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_image_fixture(images: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(h as u32).to_be_bytes());
        bytes.extend_from_slice(&(w as u32).to_be_bytes());
        for img in images {
            assert_eq!(img.len(), h * w);
            bytes.extend_from_slice(img);
        }
        bytes
    }

    pub(crate) fn idx_label_fixture(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn crafted_two_image_fixture_roundtrips_exactly() {
        // Known byte values, including order-sensitive corners.
        let img0: Vec<u8> = (0..6).map(|i| (i * 40) as u8).collect();
        let img1: Vec<u8> = vec![255, 0, 128, 7, 19, 101];
        let bytes = idx_image_fixture(&[img0.clone(), img1.clone()], 2, 3);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!(images.shape, [2, 2, 3, 1]);
        for (i, &b) in img0.iter().chain(&img1).enumerate() {
            assert_eq!(images.data[i], b as f64 / 255.0);
        }
    }

    #[test]
    fn all_zero_bytes_normalize_to_zero() {
        let bytes = idx_image_fixture(&[vec![0; 4]], 2, 2);
        let images = parse_idx_images(&bytes).unwrap();
        assert!(images.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = idx_image_fixture(&[vec![0; 4]], 2, 2);
        bytes[3] = 0x99;
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = idx_image_fixture(&[vec![0; 4]], 2, 2);
        bytes.pop();
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn count_mismatch_between_files_rejected() {
        use std::io::Write;
        let dir = std::env::temp_dir().join("advlab_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("images");
        let lp = dir.join("labels");
        let mut f = std::fs::File::create(&ip).unwrap();
        f.write_all(&idx_image_fixture(&[vec![0; 4], vec![1; 4]], 2, 2))
            .unwrap();
        let mut f = std::fs::File::create(&lp).unwrap();
        f.write_all(&idx_label_fixture(&[3])).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp),
            Err(Error::Ingestion(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
