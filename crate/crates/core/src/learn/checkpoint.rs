//! Model checkpoints (`AMDL`): an architecture descriptor followed by named
//! f32 tensors.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "AMDL" | u32 version=1 | u32 desc_len | desc (JSON, UTF-8)
//! | u32 n_tensors | n × (u16 name_len | name | u8 ndim | u32 dims[] | f32 data)
//! ```
//!
//! The descriptor carries the architecture, the class table (for full
//! models), the dropout probability and the config hash of the producing
//! run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivityClassId, ClassTable};

use super::net::{ArchConfig, ClassifierHead, Decoder, Encoder, StateEntry};
use super::scalar::Scalar;
use super::{LearnError, Model};

pub const MODEL_MAGIC: &[u8; 4] = b"AMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: ArchConfig,
    #[serde(default)]
    classes: Vec<ActivityClassId>,
    #[serde(default)]
    dropout_p: f64,
    #[serde(default)]
    degenerate_single_class: bool,
    config_hash: u64,
}

fn write_tensors(
    w: &mut impl Write,
    desc: &Descriptor,
    tensors: &[StateEntry],
) -> Result<(), LearnError> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let desc_bytes =
        serde_json::to_vec(desc).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
    w.write_all(&(desc_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&desc_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_tensors(
    r: &mut impl Read,
) -> Result<(Descriptor, BTreeMap<String, (Vec<usize>, Vec<f32>)>), LearnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(LearnError::Checkpoint("bad magic, expected AMDL".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(LearnError::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let desc_len = u32::from_le_bytes(b4) as usize;
    let mut desc_bytes = vec![0u8; desc_len];
    r.read_exact(&mut desc_bytes)?;
    let desc: Descriptor =
        serde_json::from_slice(&desc_bytes).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
    r.read_exact(&mut b4)?;
    let n_tensors = u32::from_le_bytes(b4) as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n_tensors {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| LearnError::Checkpoint(format!("tensor name: {e}")))?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        map.insert(name, (shape, data));
    }
    Ok((desc, map))
}

/// Save the full classifier model.
pub fn save_model<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    config_hash: u64,
) -> Result<(), LearnError> {
    let mut tensors = Vec::new();
    model.encoder.state("encoder", &mut tensors);
    model.head.state("head", &mut tensors);
    let desc = Descriptor {
        kind: "model".into(),
        arch: model.arch.clone(),
        classes: model.classes.classes().to_vec(),
        dropout_p: model.head.dropout_p,
        degenerate_single_class: model.degenerate_single_class,
        config_hash,
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &desc, &tensors)?;
    w.flush()?;
    Ok(())
}

/// Load a full classifier model; returns it with the embedded config hash.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, u64), LearnError> {
    let mut r = BufReader::new(File::open(path)?);
    let (desc, map) = read_tensors(&mut r)?;
    if desc.kind != "model" {
        return Err(LearnError::Checkpoint(format!(
            "expected a model checkpoint, found '{}'",
            desc.kind
        )));
    }
    let classes = ClassTable::from_classes(desc.classes.clone())
        .map_err(|e| LearnError::Checkpoint(e.to_string()))?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::<T>::new(&desc.arch, &mut seed_rng);
    encoder.load("encoder", &map)?;
    let mut head =
        ClassifierHead::<T>::new(&desc.arch, classes.len(), desc.dropout_p, &mut seed_rng);
    head.load("head", &map)?;
    Ok((
        Model {
            encoder,
            head,
            classes,
            arch: desc.arch,
            degenerate_single_class: desc.degenerate_single_class,
        },
        desc.config_hash,
    ))
}

/// Save a pretrained encoder (and decoder) without a classifier head.
pub fn save_pretrained<T: Scalar>(
    path: &Path,
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    config_hash: u64,
) -> Result<(), LearnError> {
    let mut tensors = Vec::new();
    encoder.state("encoder", &mut tensors);
    decoder.state("decoder", &mut tensors);
    let desc = Descriptor {
        kind: "pretrained".into(),
        arch: encoder.arch.clone(),
        classes: Vec::new(),
        dropout_p: 0.0,
        degenerate_single_class: false,
        config_hash,
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &desc, &tensors)?;
    w.flush()?;
    Ok(())
}

/// Load a pretrained encoder/decoder pair.
pub fn load_pretrained<T: Scalar>(
    path: &Path,
) -> Result<(Encoder<T>, Decoder<T>, u64), LearnError> {
    let mut r = BufReader::new(File::open(path)?);
    let (desc, map) = read_tensors(&mut r)?;
    if desc.kind != "pretrained" {
        return Err(LearnError::Checkpoint(format!(
            "expected a pretrained checkpoint, found '{}'",
            desc.kind
        )));
    }
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::<T>::new(&desc.arch, &mut seed_rng);
    encoder.load("encoder", &map)?;
    let mut decoder = Decoder::<T>::new(&desc.arch, &mut seed_rng);
    decoder.load("decoder", &map)?;
    Ok((encoder, decoder, desc.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabeledDataset, LabeledWindow};
    use crate::echo::FlowWindow;
    use crate::learn::{finetune, TrainConfig};
    use ndarray::Array3;

    fn tiny_model() -> Model<f32> {
        let classes = ClassTable::from_names(&["a", "b"]).unwrap();
        let mk = |v: f32| FlowWindow {
            data: Array3::from_elem((2, 24, 18), v),
            start_time: 0.0,
        };
        let items = vec![
            LabeledWindow { window: mk(0.1), label: classes.by_name("a").unwrap().clone(), group: "g".into() },
            LabeledWindow { window: mk(0.9), label: classes.by_name("b").unwrap().clone(), group: "g".into() },
            LabeledWindow { window: mk(0.2), label: classes.by_name("a").unwrap().clone(), group: "g".into() },
            LabeledWindow { window: mk(0.8), label: classes.by_name("b").unwrap().clone(), group: "g".into() },
        ];
        let ds = LabeledDataset::new(items, classes, 83.333).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            finetune_epochs: 2,
            arch: crate::learn::ArchConfig::tiny(2, (24, 18)),
            ..TrainConfig::default()
        };
        finetune::<f32>(None, &ds, &cfg).unwrap()
    }

    #[test]
    fn model_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amdl");
        let model = tiny_model();
        save_model(&path, &model, 0x1234).unwrap();
        let (back, hash) = load_model::<f32>(&path).unwrap();
        assert_eq!(hash, 0x1234);
        assert_eq!(back.classes, model.classes);
        let w = FlowWindow { data: Array3::from_elem((2, 24, 18), 0.42), start_time: 0.0 };
        let a = model.classify_window(&w, false, None).unwrap();
        let b = back.classify_window(&w, false, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amdl");
        let model = tiny_model();
        save_model(&path, &model, 1).unwrap();
        assert!(load_pretrained::<f32>(&path).is_err());
    }
}
