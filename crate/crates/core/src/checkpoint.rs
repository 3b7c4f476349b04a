//! Binary checkpoint container for models, DAEs, and adversarial batches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ANSM" | version u32 | meta_len u32 | metadata JSON (UTF-8)
//! array_count u32
//! per array: name_len u32 | name | dtype u8 (0 = f32) | rank u32
//!            | dims u32 x rank | data f32 x prod(dims)
//! ```
//!
//! Storage is 32-bit float; compute promotes to 64-bit on load. The
//! reader never reads past declared lengths and rejects trailing bytes.

use crate::attacks::{AdversarialBatch, AttackAlgorithm, CwProbe};
use crate::datasets::Images;
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{ArchType, LayerParams, LayerSpec, Model, ModelSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"ANSM";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const DTYPE_F32: u8 = 0;

/// Provenance of one noise source a DAE was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub algorithm: AttackAlgorithm,
    pub model: String,
    pub arch: ArchType,
}

/// Typed metadata stored in the JSON header.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CheckpointMeta {
    #[serde(rename = "model")]
    Model { spec: ModelSpec, seed: u64 },
    #[serde(rename = "dae")]
    Dae {
        spec: ModelSpec,
        seed: u64,
        sources: Vec<NoiseSource>,
    },
    #[serde(rename = "adv-batch")]
    AdvBatch {
        source_model: String,
        algorithm: AttackAlgorithm,
        reported_c: Vec<Option<f64>>,
        probe_log: Vec<Vec<CwProbe>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let a = NamedArray {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(a.dims.iter().product::<usize>(), a.data.len());
        a
    }

    fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, dims, data.iter().map(|&v| v as f32).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Container {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

pub fn encode_container(container: &Container) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&container.meta)
        .map_err(|e| Error::Checkpoint(CheckpointError::Metadata(e.to_string())))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(container.arrays.len() as u32).to_le_bytes());
    for array in &container.arrays {
        let name = array.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.extend_from_slice(&(array.dims.len() as u32).to_le_bytes());
        for &d in &array.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &array.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    let mut cur = Cursor { bytes, pos: 0 };
    let parsed = parse_inner(&mut cur).map_err(Error::Checkpoint)?;
    if cur.remaining() != 0 {
        return Err(Error::Checkpoint(CheckpointError::TrailingBytes));
    }
    Ok(parsed)
}

fn parse_inner(cur: &mut Cursor<'_>) -> std::result::Result<Container, CheckpointError> {
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version > VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let array_count = cur.u32()?;
    let mut arrays = Vec::new();
    for _ in 0..array_count {
        let name_len = cur.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::DimMismatch(format!(
                "array name of {name_len} bytes"
            )));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize)?)
            .map_err(|_| CheckpointError::Metadata("array name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::DimMismatch(format!(
                "unknown dtype tag {dtype}"
            )));
        }
        let rank = cur.u32()?;
        if rank > MAX_RANK {
            return Err(CheckpointError::DimMismatch(format!("rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32()? as u64;
            elements = elements
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::DimMismatch("dims overflow".into()))?;
            dims.push(d as usize);
        }
        let payload = elements
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::DimMismatch("payload overflow".into()))?;
        if payload > cur.remaining() as u64 {
            return Err(CheckpointError::Truncated);
        }
        let raw = cur.take(payload as usize)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    Ok(Container { meta, arrays })
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    std::fs::write(path, encode_container(container)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    parse_container(&std::fs::read(path)?)
}

fn model_arrays(model: &Model) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    let mut shape = model.spec.input_shape.clone();
    for (i, (layer, params)) in model.spec.layers.iter().zip(&model.params).enumerate() {
        match (layer, params) {
            (LayerSpec::Dense { units }, LayerParams::Dense { w, b }) => {
                arrays.push(NamedArray::from_f64(
                    format!("L{i}.w"),
                    vec![shape[0], *units],
                    w,
                ));
                arrays.push(NamedArray::from_f64(format!("L{i}.b"), vec![*units], b));
            }
            (LayerSpec::Conv { filters, kernel }, LayerParams::Conv { k, b }) => {
                arrays.push(NamedArray::from_f64(
                    format!("L{i}.k"),
                    vec![*kernel, *kernel, shape[2], *filters],
                    k,
                ));
                arrays.push(NamedArray::from_f64(format!("L{i}.b"), vec![*filters], b));
            }
            (
                LayerSpec::BatchNorm,
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let c = *shape.last().unwrap();
                arrays.push(NamedArray::from_f64(format!("L{i}.gamma"), vec![c], gamma));
                arrays.push(NamedArray::from_f64(format!("L{i}.beta"), vec![c], beta));
                arrays.push(NamedArray::from_f64(format!("L{i}.rm"), vec![c], running_mean));
                arrays.push(NamedArray::from_f64(format!("L{i}.rv"), vec![c], running_var));
            }
            _ => {}
        }
        shape = next_shape(&shape, layer);
    }
    arrays
}

fn next_shape(shape: &[usize], layer: &LayerSpec) -> Vec<usize> {
    match layer {
        LayerSpec::Dense { units } => vec![*units],
        LayerSpec::Conv { filters, .. } => vec![shape[0], shape[1], *filters],
        LayerSpec::MaxPool => vec![shape[0] / 2, shape[1] / 2, shape[2]],
        LayerSpec::Upsample => vec![shape[0] * 2, shape[1] * 2, shape[2]],
        LayerSpec::Flatten => vec![shape.iter().product()],
        _ => shape.to_vec(),
    }
}

/// Serialize a trained model (or DAE, with its noise sources).
pub fn save_model(path: &Path, model: &Model, sources: Option<Vec<NoiseSource>>) -> Result<()> {
    let meta = match sources {
        None => CheckpointMeta::Model {
            spec: model.spec.clone(),
            seed: model.seed,
        },
        Some(sources) => CheckpointMeta::Dae {
            spec: model.spec.clone(),
            seed: model.seed,
            sources,
        },
    };
    write_container(
        path,
        &Container {
            meta,
            arrays: model_arrays(model),
        },
    )
}

/// Rebuild a model from a container, validating every array shape
/// against the spec.
pub fn model_from_container(container: &Container) -> Result<(Model, CheckpointMeta)> {
    let (spec, seed) = match &container.meta {
        CheckpointMeta::Model { spec, seed } => (spec.clone(), *seed),
        CheckpointMeta::Dae { spec, seed, .. } => (spec.clone(), *seed),
        CheckpointMeta::AdvBatch { .. } => {
            return Err(Error::Checkpoint(CheckpointError::Metadata(
                "expected a model checkpoint, found adv-batch".into(),
            )))
        }
    };
    spec.validate()?;
    let fetch = |name: String, expect: usize| -> Result<Vec<f64>> {
        let a = container
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(CheckpointError::Metadata(format!("missing array {name}"))))?;
        if a.data.len() != expect {
            return Err(Error::Checkpoint(CheckpointError::DimMismatch(format!(
                "{name}: {} values, expected {expect}",
                a.data.len()
            ))));
        }
        Ok(a.data.iter().map(|&v| v as f64).collect())
    };
    let mut shape = spec.input_shape.clone();
    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = match layer {
            LayerSpec::Dense { units } => LayerParams::Dense {
                w: fetch(format!("L{i}.w"), shape[0] * units)?,
                b: fetch(format!("L{i}.b"), *units)?,
            },
            LayerSpec::Conv { filters, kernel } => LayerParams::Conv {
                k: fetch(format!("L{i}.k"), kernel * kernel * shape[2] * filters)?,
                b: fetch(format!("L{i}.b"), *filters)?,
            },
            LayerSpec::BatchNorm => {
                let c = *shape.last().unwrap();
                LayerParams::BatchNorm {
                    gamma: fetch(format!("L{i}.gamma"), c)?,
                    beta: fetch(format!("L{i}.beta"), c)?,
                    running_mean: fetch(format!("L{i}.rm"), c)?,
                    running_var: fetch(format!("L{i}.rv"), c)?,
                }
            }
            _ => LayerParams::None,
        };
        params.push(p);
        shape = next_shape(&shape, layer);
    }
    Ok((Model { spec, params, seed }, container.meta.clone()))
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    model_from_container(&read_container(path)?)
}

fn images_array(name: &str, images: &Images) -> NamedArray {
    NamedArray::from_f64(name, images.shape.to_vec(), &images.data)
}

pub fn save_adv_batch(path: &Path, batch: &AdversarialBatch) -> Result<()> {
    let n = batch.len();
    let arrays = vec![
        images_array("clean", &batch.clean),
        images_array("perturbed", &batch.perturbed),
        NamedArray::new(
            "labels",
            vec![n],
            batch.labels.iter().map(|&l| l as f32).collect(),
        ),
        NamedArray::from_f64("norms", vec![n], &batch.norms),
        NamedArray::new(
            "success",
            vec![n],
            batch.success.iter().map(|&s| s as u8 as f32).collect(),
        ),
        NamedArray::new(
            "degenerate",
            vec![n],
            batch.degenerate.iter().map(|&s| s as u8 as f32).collect(),
        ),
        NamedArray::new(
            "iterations",
            vec![n],
            batch.iterations.iter().map(|&i| i as f32).collect(),
        ),
    ];
    write_container(
        path,
        &Container {
            meta: CheckpointMeta::AdvBatch {
                source_model: batch.source_model.clone(),
                algorithm: batch.algorithm,
                reported_c: batch.reported_c.clone(),
                probe_log: batch.probe_log.clone(),
            },
            arrays,
        },
    )
}

pub fn load_adv_batch(path: &Path) -> Result<AdversarialBatch> {
    let container = read_container(path)?;
    let (source_model, algorithm, reported_c, probe_log) = match &container.meta {
        CheckpointMeta::AdvBatch {
            source_model,
            algorithm,
            reported_c,
            probe_log,
        } => (
            source_model.clone(),
            *algorithm,
            reported_c.clone(),
            probe_log.clone(),
        ),
        _ => {
            return Err(Error::Checkpoint(CheckpointError::Metadata(
                "expected an adv-batch checkpoint".into(),
            )))
        }
    };
    let image_set = |name: &str| -> Result<Images> {
        let a = container
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(CheckpointError::Metadata(format!("missing array {name}"))))?;
        if a.dims.len() != 4 {
            return Err(Error::Checkpoint(CheckpointError::DimMismatch(format!(
                "{name} has rank {}",
                a.dims.len()
            ))));
        }
        Images::new(
            [a.dims[0], a.dims[1], a.dims[2], a.dims[3]],
            a.data.iter().map(|&v| v as f64).collect(),
        )
    };
    let vector = |name: &str| -> Result<Vec<f32>> {
        container
            .arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.data.clone())
            .ok_or_else(|| Error::Checkpoint(CheckpointError::Metadata(format!("missing array {name}"))))
    };
    let clean = image_set("clean")?;
    let perturbed = image_set("perturbed")?;
    let n = clean.count();
    let labels: Vec<u8> = vector("labels")?.iter().map(|&v| v as u8).collect();
    let norms: Vec<f64> = vector("norms")?.iter().map(|&v| v as f64).collect();
    let success: Vec<bool> = vector("success")?.iter().map(|&v| v != 0.0).collect();
    let degenerate: Vec<bool> = vector("degenerate")?.iter().map(|&v| v != 0.0).collect();
    let iterations: Vec<usize> = vector("iterations")?.iter().map(|&v| v as usize).collect();
    for (name, len) in [
        ("labels", labels.len()),
        ("norms", norms.len()),
        ("success", success.len()),
        ("degenerate", degenerate.len()),
        ("iterations", iterations.len()),
    ] {
        if len != n {
            return Err(Error::Checkpoint(CheckpointError::DimMismatch(format!(
                "{name} covers {len} samples, images {n}"
            ))));
        }
    }
    if perturbed.shape != clean.shape {
        return Err(Error::Checkpoint(CheckpointError::DimMismatch(
            "clean/perturbed shape mismatch".into(),
        )));
    }
    Ok(AdversarialBatch {
        clean,
        perturbed,
        labels,
        source_model,
        algorithm,
        norms,
        success,
        degenerate,
        iterations,
        reported_c,
        probe_log,
    })
}
