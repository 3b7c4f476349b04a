//! CIFAR-10 binary batch loader.
//!
//! One record is 3073 bytes: a label byte followed by 3072 pixel bytes in
//! channel-planar order (1024 R, 1024 G, 1024 B). Decoded to interleaved
//! `[n,32,32,3]` with values in `[0,1]`.

use super::{Images, LabeledDataset, Provenance};
use crate::error::{Error, Result};
use std::path::Path;

const RECORD_LEN: usize = 3073;
const PLANE: usize = 1024;

pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes)
}

pub(crate) fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Ingestion(format!(
            "CIFAR-10 file length {} is not a positive multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0; n * 32 * 32 * 3];
    for (rec_idx, record) in bytes.chunks(RECORD_LEN).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Ingestion(format!(
                "record {rec_idx}: label byte {label} > 9"
            )));
        }
        labels.push(label);
        let pixels = &record[1..];
        let base = rec_idx * 32 * 32 * 3;
        for ch in 0..3 {
            let plane = &pixels[ch * PLANE..(ch + 1) * PLANE];
            for (pix_idx, &b) in plane.iter().enumerate() {
                data[base + pix_idx * 3 + ch] = b as f64 / 255.0;
            }
        }
    }
    let images = Images::new([n, 32, 32, 3], data)?;
    LabeledDataset::new(images, labels, Provenance::Cifar10)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cifar_record(label: u8, r: u8, g: u8, b: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(r).take(PLANE));
        rec.extend(std::iter::repeat(g).take(PLANE));
        rec.extend(std::iter::repeat(b).take(PLANE));
        rec
    }

    #[test]
    fn single_record_label_seven() {
        let ds = parse_cifar10(&cifar_record(7, 10, 20, 30)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        // Channel-planar decoded to interleaved.
        assert_eq!(ds.images.data[0], 10.0 / 255.0);
        assert_eq!(ds.images.data[1], 20.0 / 255.0);
        assert_eq!(ds.images.data[2], 30.0 / 255.0);
    }

    #[test]
    fn length_not_multiple_rejected() {
        let bytes = vec![0u8; 3072];
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Ingestion(_))));
    }

    #[test]
    fn label_byte_out_of_range_rejected() {
        let rec = cifar_record(10, 0, 0, 0);
        assert!(matches!(parse_cifar10(&rec), Err(Error::Ingestion(_))));
    }

    #[test]
    fn multi_record_count() {
        let mut bytes = cifar_record(0, 1, 2, 3);
        bytes.extend(cifar_record(9, 4, 5, 6));
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![0, 9]);
    }
}
