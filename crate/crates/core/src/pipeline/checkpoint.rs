//! Model checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "TTNETCK1"
//! offset 8   u64 LE    manifest length L in bytes
//! offset 16  L bytes   UTF-8 JSON manifest
//! then       every tensor listed in the manifest, in order, as
//!            little-endian f32 values in row-major order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Model, ModelConfig};
use crate::nn::{ConvLayer, DenseLayer, Encoder, Module, TtDenseLayer, TtSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTNETCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    role: Role,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<TtSpec>,
    trainable: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Encoder,
    Projection,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Conv,
    Dense,
    Tt,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn entry(role: Role, kind: Kind, spec: Option<TtSpec>, named: &[(&str, &Tensor)]) -> LayerEntry {
    LayerEntry {
        role,
        kind,
        spec,
        trainable: named.iter().all(|(_, t)| t.requires_grad()),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

fn layer_entry(role: Role, layer: &Layer) -> LayerEntry {
    match layer {
        Layer::Dense(l) => entry(role, Kind::Dense, None, &[("weight", &l.weight), ("bias", &l.bias)]),
        Layer::Tt(l) => entry(
            role,
            Kind::Tt,
            Some(l.spec),
            &[("core1", &l.core1), ("core2", &l.core2), ("bias", &l.bias)],
        ),
    }
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut layers: Vec<LayerEntry> = model
        .encoder
        .convs
        .iter()
        .map(|c| entry(Role::Encoder, Kind::Conv, None, &[("kernel", &c.kernel), ("bias", &c.bias)]))
        .collect();
    layers.extend(model.projection.iter().map(|l| layer_entry(Role::Projection, l)));
    layers.extend(model.classifier.iter().map(|l| layer_entry(Role::Classifier, l)));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        layers,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let params = model.params();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.iter().map(|p| p.numel()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Data(format!("malformed checkpoint: {}", reason.into()))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(malformed("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| malformed("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| malformed(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported version {}", manifest.format_version)));
    }
    let mut cursor = &bytes[16 + len..];
    let mut take = |e: &TensorEntry, trainable: bool| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        if cursor.len() < 4 * n {
            return Err(malformed(format!("tensor {} is truncated", e.name)));
        }
        let (head, rest) = cursor.split_at(4 * n);
        cursor = rest;
        let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut t = Tensor::new(&e.shape, data)?;
        t.set_requires_grad(trainable);
        Ok(t)
    };

    let mut convs = Vec::new();
    let mut projection = Vec::new();
    let mut classifier = Vec::new();
    for layer in &manifest.layers {
        let mut tensors = Vec::with_capacity(layer.tensors.len());
        for e in &layer.tensors {
            tensors.push(take(e, layer.trainable)?);
        }
        let arity = if layer.kind == Kind::Tt { 3 } else { 2 };
        if tensors.len() != arity {
            return Err(malformed(format!("{:?} layer lists {} tensors", layer.kind, tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("arity checked");
        let built = match (layer.role, layer.kind) {
            (Role::Encoder, Kind::Conv) => {
                convs.push(ConvLayer {
                    kernel: next(),
                    bias: next(),
                });
                continue;
            }
            (Role::Projection | Role::Classifier, Kind::Dense) => {
                let mut l = DenseLayer::new(next(), next())?;
                l.set_trainable(layer.trainable);
                Layer::Dense(l)
            }
            (Role::Projection | Role::Classifier, Kind::Tt) => {
                let spec = layer.spec.ok_or_else(|| malformed("TT layer without spec"))?;
                let mut l = TtDenseLayer::from_cores(spec, next(), next(), next())?;
                l.set_trainable(layer.trainable);
                Layer::Tt(l)
            }
            (role, kind) => return Err(malformed(format!("{kind:?} layer in {role:?} position"))),
        };
        if layer.role == Role::Projection {
            projection.push(built);
        } else {
            classifier.push(built);
        }
    }
    if !cursor.is_empty() {
        return Err(malformed(format!("{} trailing bytes", cursor.len())));
    }
    if projection.is_empty() {
        return Err(malformed("no projection layers"));
    }
    let encoder = Encoder::from_convs(manifest.model.encoder.clone(), convs)?;
    Ok(Model {
        config: manifest.model,
        encoder,
        projection,
        classifier,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
