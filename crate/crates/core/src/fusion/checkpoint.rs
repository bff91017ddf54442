//! Binary checkpoint container.
//!
//! ```text
//! "MTLP"                 4 bytes magic
//! version                u32 little-endian (currently 1)
//! manifest length        u64 little-endian
//! manifest               UTF-8 JSON: variant, training config, stream
//!                        descriptions, and the ordered tensor list
//!                        [{name, shape}, ...]
//! tensor blobs           f32 little-endian, row-major, in manifest order
//! ```
//!
//! The manifest carries no timestamps or paths, so saving the same model
//! twice produces identical bytes. Precomputed embedding tables are stored
//! inside the checkpoint (ids in the manifest, vectors as a tensor) so a
//! model file is self-contained.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{FusedModel, TextStream, TrainConfig, Variant};
use crate::encoders::{EncoderConfig, PrecomputedEmbeddings, TextEncoderParams};
use crate::error::{CheckpointError, Error, Result};
use crate::real::Real;
use crate::tabnet::{BatchNorm, Linear, MlpHyper, MlpParams, NormStats};

pub const MAGIC: [u8; 4] = *b"MTLP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    variant: Variant,
    config: TrainConfig,
    mlp: Option<MlpManifest>,
    title: Option<StreamManifest>,
    content: Option<StreamManifest>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpManifest {
    widths: Vec<usize>,
    hyper: MlpHyper,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StreamManifest {
    Hashed { config: EncoderConfig },
    Precomputed { dim: usize, ids: Vec<String> },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn tensor<'a, F: Real>(name: impl Into<String>, shape: &[usize], values: impl Iterator<Item = &'a F>) -> Tensor {
    Tensor {
        name: name.into(),
        shape: shape.to_vec(),
        data: values.map(|v| v.as_f64() as f32).collect(),
    }
}

fn linear_tensors<F: Real>(prefix: &str, l: &Linear<F>, out: &mut Vec<Tensor>) {
    out.push(tensor(format!("{prefix}.weight"), l.weight.shape(), l.weight.iter()));
    out.push(tensor(format!("{prefix}.bias"), l.bias.shape(), l.bias.iter()));
}

fn stream_parts<F: Real>(prefix: &str, stream: &TextStream<F>, out: &mut Vec<Tensor>) -> StreamManifest {
    match stream {
        TextStream::Hashed { config, params } => {
            out.push(tensor(format!("{prefix}.weight"), params.weight.shape(), params.weight.iter()));
            out.push(tensor(format!("{prefix}.bias"), params.bias.shape(), params.bias.iter()));
            StreamManifest::Hashed { config: config.clone() }
        }
        TextStream::Precomputed(table) => {
            let values = table.vectors.values().flat_map(|v| v.iter());
            out.push(tensor(format!("{prefix}.table"), &[table.len(), table.dim], values));
            StreamManifest::Precomputed {
                dim: table.dim,
                ids: table.vectors.keys().cloned().collect(),
            }
        }
    }
}

/// Serializes a model; parameters are stored as 32-bit floats.
pub fn model_to_bytes<F: Real>(model: &FusedModel<F>) -> Vec<u8> {
    let mut tensors = Vec::new();
    tensors.push(tensor("norm.mean", model.norm.mean.shape(), model.norm.mean.iter()));
    tensors.push(tensor("norm.std", model.norm.std.shape(), model.norm.std.iter()));
    let mlp = model.mlp.as_ref().map(|mlp| {
        for (k, layer) in mlp.layers.iter().enumerate() {
            linear_tensors(&format!("mlp.fc{}", k + 1), layer, &mut tensors);
        }
        for (k, bn) in mlp.norms.iter().enumerate() {
            for (field, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                tensors.push(tensor(format!("mlp.bn{}.{field}", k + 1), v.shape(), v.iter()));
            }
        }
        MlpManifest {
            widths: mlp.widths(),
            hyper: mlp.hyper,
        }
    });
    let title = model.title.as_ref().map(|s| stream_parts("title", s, &mut tensors));
    let content = model.content.as_ref().map(|s| stream_parts("content", s, &mut tensors));
    linear_tensors("head", &model.head, &mut tensors);

    let manifest = Manifest {
        variant: model.variant,
        config: model.config.clone(),
        mlp,
        title,
        content,
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let floats: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model<F: Real>(model: &FusedModel<F>, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<FusedModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn shape_err(name: &str, message: String) -> Error {
    CheckpointError::Shape {
        name: name.to_string(),
        message,
    }
    .into()
}

/// Tensors read from the blob section, consumed by name.
struct Blobs(BTreeMap<String, (Vec<usize>, Vec<f32>)>);

impl Blobs {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let (shape, data) = self
            .0
            .remove(name)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor {name}")))?;
        if shape != expected {
            return Err(shape_err(name, format!("manifest shape {shape:?}, model expects {expected:?}")));
        }
        Ok(data)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        Ok(Array1::from(self.take(name, &[len])?))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let data = self.take(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked against shape"))
    }

    fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize) -> Result<Linear<f32>> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"), outputs, inputs)?,
            bias: self.vector(&format!("{prefix}.bias"), outputs)?,
        })
    }

    fn stream(&mut self, prefix: &str, m: StreamManifest) -> Result<TextStream<f32>> {
        match m {
            StreamManifest::Hashed { config } => {
                config
                    .validate()
                    .map_err(|e| CheckpointError::Manifest(format!("{prefix} encoder: {e}")))?;
                let params = TextEncoderParams {
                    weight: self.matrix(&format!("{prefix}.weight"), config.dim, config.buckets)?,
                    bias: self.vector(&format!("{prefix}.bias"), config.dim)?,
                };
                Ok(TextStream::Hashed { config, params })
            }
            StreamManifest::Precomputed { dim, ids } => {
                let name = format!("{prefix}.table");
                let table = self.matrix(&name, ids.len(), dim)?;
                let mut out = PrecomputedEmbeddings::new(dim);
                for (id, row) in ids.into_iter().zip(table.rows()) {
                    if out.vectors.insert(id.clone(), row.to_owned()).is_some() {
                        return Err(CheckpointError::Manifest(format!("duplicate id {id:?} in {name}")).into());
                    }
                }
                Ok(TextStream::Precomputed(out))
            }
        }
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FusedModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated("manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut blobs = BTreeMap::new();
    for entry in &manifest.tensors {
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| shape_err(&entry.name, format!("shape {:?} overflows", entry.shape)))?;
        let available = r.remaining() / 4;
        if count > available {
            return Err(shape_err(
                &entry.name,
                format!("shape {:?} needs {count} floats, only {available} remain", entry.shape),
            ));
        }
        let raw = r.take(count * 4, &entry.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if blobs.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
            return Err(CheckpointError::Manifest(format!("duplicate tensor {}", entry.name)).into());
        }
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()).into());
    }
    let mut blobs = Blobs(blobs);

    let mlp = match manifest.mlp {
        Some(m) => {
            let w = &m.widths;
            if w.len() != 6 || w.contains(&0) {
                return Err(CheckpointError::Manifest(format!("invalid MLP widths {w:?}")).into());
            }
            let mut layers = Vec::with_capacity(5);
            for k in 0..5 {
                layers.push(blobs.linear(&format!("mlp.fc{}", k + 1), w[k], w[k + 1])?);
            }
            let mut norms = Vec::with_capacity(4);
            for k in 0..4 {
                let p = format!("mlp.bn{}", k + 1);
                let width = w[k + 1];
                let mut bn = BatchNorm::new(width);
                bn.gamma = blobs.vector(&format!("{p}.gamma"), width)?;
                bn.beta = blobs.vector(&format!("{p}.beta"), width)?;
                bn.running_mean = blobs.vector(&format!("{p}.running_mean"), width)?;
                bn.running_var = blobs.vector(&format!("{p}.running_var"), width)?;
                norms.push(bn);
            }
            Some(MlpParams {
                layers,
                norms,
                hyper: m.hyper,
            })
        }
        None => None,
    };
    let input_dim = mlp.as_ref().map_or(crate::extractor::NUMERIC_FEATURES, MlpParams::input_dim);
    let norm = NormStats {
        mean: blobs.vector("norm.mean", input_dim)?,
        std: blobs.vector("norm.std", input_dim)?,
    };
    let title = manifest.title.map(|m| blobs.stream("title", m)).transpose()?;
    let content = manifest.content.map(|m| blobs.stream("content", m)).transpose()?;
    let mut model = FusedModel {
        variant: manifest.variant,
        config: manifest.config,
        norm,
        mlp,
        title,
        content,
        head: Linear::zeros(0, 2),
    };
    let streams_ok = model.variant.uses_mlp() == model.mlp.is_some()
        && model.variant.uses_title() == model.title.is_some()
        && model.variant.uses_content() == model.content.is_some();
    if !streams_ok {
        return Err(CheckpointError::Manifest(format!("streams do not match variant {}", model.variant.as_str())).into());
    }
    model.head = blobs.linear("head", model.fused_dim(), 2)?;
    if let Some(extra) = blobs.0.keys().next() {
        return Err(CheckpointError::Manifest(format!("unexpected tensor {extra}")).into());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::NUMERIC_FEATURES;
    use crate::fusion::StreamTables;
    use ndarray::array;

    fn model() -> FusedModel<f32> {
        let mut c = TrainConfig::default();
        c.title.buckets = 8;
        c.title.dim = 3;
        c.content.buckets = 8;
        c.content.dim = 2;
        let mut m = FusedModel::init_with_widths(
            Variant::Fused,
            &c,
            StreamTables::default(),
            NormStats::identity(NUMERIC_FEATURES),
            &[11, 5, 4, 4, 3, 2],
        )
        .unwrap();
        m.head.weight.fill(0.5);
        m.head.bias = array![1.0, -2.0];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = model_to_bytes(&m);
        assert_eq!(&bytes[..4], b"MTLP");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn precomputed_table_round_trips() {
        let mut table = PrecomputedEmbeddings::<f32>::new(2);
        table.vectors.insert("b".into(), array![1.0, 2.0]);
        table.vectors.insert("a".into(), array![-1.0, 0.5]);
        let mut m = model();
        m.title = Some(TextStream::Precomputed(table));
        m.head = Linear::zeros(m.fused_dim(), 2);
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = model_to_bytes(&model());
        bytes[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
        let mut bytes = model_to_bytes(&model());
        bytes[4] = 9;
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Version { found: 9, expected: 1 }))
        ));
        assert!(matches!(
            model_from_bytes(b"MT"),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
    }

    #[test]
    fn short_blob_names_the_tensor() {
        let bytes = model_to_bytes(&model());
        let cut = &bytes[..bytes.len() - 4];
        match model_from_bytes(cut) {
            Err(Error::Checkpoint(CheckpointError::Shape { name, .. })) => assert_eq!(name, "head.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = model_to_bytes(&model());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(4)))
        ));
    }
}
