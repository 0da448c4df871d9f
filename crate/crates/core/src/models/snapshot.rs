//! Versioned binary snapshots of built-in models.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes   "ALSIMMDL"
//! version  u32       1
//! hlen     u32       length of the JSON header
//! header   hlen      {"kind", "spec", "task", "classes", "hash_seed"}
//! weights  f64 * n   linear:      weights (feature-major), bias
//!                    feedforward: w1 (feature-major), b1, w2 (class-major), b2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeedforwardModel, LinearModel, Model, ModelSpec, SparseSoftmax};
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::features::Featurizer;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ALSIMMDL";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    spec: ModelSpec,
    task: Task,
    classes: usize,
    hash_seed: u64,
}

fn ser(e: impl std::fmt::Display) -> Error {
    Error::Serialization(e.to_string())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(ser)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn write_model(model: &Model, w: &mut impl Write) -> Result<()> {
    let (kind, spec, task, classes, featurizer) = match model {
        Model::Linear(m) => ("linear", &m.spec, m.task, m.layer.classes, m.featurizer),
        Model::Feedforward(m) => ("feedforward", &m.spec, Task::Classification, m.classes, m.featurizer),
    };
    let header = serde_json::to_vec(&Header {
        kind: kind.into(),
        spec: spec.clone(),
        task,
        classes,
        hash_seed: featurizer.hash_seed,
    })
    .map_err(ser)?;
    let io = |e: std::io::Error| ser(e);
    w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    match model {
        Model::Linear(m) => {
            write_f64s(w, &m.layer.weights).map_err(io)?;
            write_f64s(w, &m.layer.bias).map_err(io)?;
        }
        Model::Feedforward(m) => {
            for part in [&m.w1, &m.b1, &m.w2, &m.b2] {
                write_f64s(w, part).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ser)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Serialization("not a model snapshot (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(ser)?;
    let version = u32::from_le_bytes(word);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported snapshot version {version}"
        )));
    }
    r.read_exact(&mut word).map_err(ser)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header).map_err(ser)?;
    let h: Header = serde_json::from_slice(&header).map_err(ser)?;
    h.spec.validate()?;
    let featurizer = Featurizer::new(h.spec.feature_dim, h.hash_seed);
    let d = h.spec.feature_dim;
    match h.kind.as_str() {
        "linear" => {
            let weights = read_f64s(r, d * h.classes)?;
            let bias = read_f64s(r, h.classes)?;
            Ok(Model::Linear(LinearModel {
                task: h.task,
                featurizer,
                layer: SparseSoftmax {
                    classes: h.classes,
                    dim: d,
                    weights,
                    bias,
                },
                spec: h.spec,
            }))
        }
        "feedforward" => {
            let hd = h.spec.hidden_dim;
            let w1 = read_f64s(r, d * hd)?;
            let b1 = read_f64s(r, hd)?;
            let w2 = read_f64s(r, h.classes * hd)?;
            let b2 = read_f64s(r, h.classes)?;
            Ok(Model::Feedforward(FeedforwardModel {
                spec: h.spec,
                featurizer,
                w1,
                b1,
                w2,
                b2,
                classes: h.classes,
            }))
        }
        other => Err(Error::Serialization(format!("unknown model kind {other:?}"))),
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}
