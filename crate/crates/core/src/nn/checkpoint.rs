//! Self-describing binary checkpoint container.
//!
//! Layout: magic `BLCK`, format version, a length-prefixed JSON header
//! (model kind, spec, step counter, tensor index), then raw little-endian
//! f64 tensor data in header order. Parameters come first, followed by the
//! optimizer's first and second moment tensors.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::ModelError;

const MAGIC: &[u8; 4] = b"BLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    spec: serde_json::Value,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub kind: String,
    pub spec: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    spec: &serde_json::Value,
    step: u64,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<(), ModelError> {
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        spec: spec.clone(),
        step,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ck_err(path, format!("header: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| ck_err(path, e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, t) in tensors {
        buf.clear();
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= (1 << 16) {
                w.write_all(&buf).map_err(io)?;
                buf.clear();
            }
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let file = std::fs::File::open(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e: std::io::Error| ck_err(path, e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ck_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ck_err(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    r.read_exact(&mut word).map_err(io)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| ck_err(path, format!("header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| ck_err(path, format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, arr));
    }
    Ok(LoadedCheckpoint {
        kind: header.kind,
        spec: header.spec,
        step: header.step,
        tensors,
    })
}

/// Copy a loaded checkpoint's tensors into a freshly built network and its
/// optimizer state, verifying names and shapes.
pub fn restore_network<N: super::Network>(
    path: &Path,
    loaded: &LoadedCheckpoint,
    net: &mut N,
    opt: &mut super::AdamState,
) -> Result<(), ModelError> {
    let names = net.param_names();
    let expected = names.len() * 3;
    if loaded.tensors.len() != expected {
        return Err(ck_err(
            path,
            format!(
                "expected {expected} tensors, found {}",
                loaded.tensors.len()
            ),
        ));
    }
    let mut views = net.params_mut();
    for (i, name) in names.iter().enumerate() {
        let groups: [(&str, String, &mut [f64]); 3] = [
            (
                "param",
                name.clone(),
                views[i].as_slice_mut().expect("standard layout"),
            ),
            (
                "adam.m",
                format!("adam.m.{name}"),
                opt.m[i].as_slice_mut().expect("standard layout"),
            ),
            (
                "adam.v",
                format!("adam.v.{name}"),
                opt.v[i].as_slice_mut().expect("standard layout"),
            ),
        ];
        for (gi, (_, full_name, dst)) in groups.into_iter().enumerate() {
            let idx = gi * names.len() + i;
            let (found_name, tensor) = &loaded.tensors[idx];
            if found_name != &full_name {
                return Err(ck_err(
                    path,
                    format!("tensor {idx}: expected {full_name}, found {found_name}"),
                ));
            }
            let src = tensor.as_slice().expect("standard layout");
            if src.len() != dst.len() {
                return Err(ck_err(
                    path,
                    format!(
                        "tensor {full_name}: {} values on disk, {} in model",
                        src.len(),
                        dst.len()
                    ),
                ));
            }
            dst.copy_from_slice(src);
        }
    }
    opt.step = loaded.step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Array::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 0.5).into_dyn();
        let b = Array::from_shape_fn(7, |i| (i as f64).sin()).into_dyn();
        let spec = serde_json::json!({"n_branches": 2, "input": [3, 64, 64]});
        save_checkpoint(
            &path,
            "regressor",
            &spec,
            42,
            &[("w".into(), a.view()), ("b".into(), b.view())],
        )
        .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, "regressor");
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensors[0].1, a);
        assert_eq!(loaded.tensors[1].1, b);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let t = Array::from_shape_fn(16, |i| (i as f64) * 0.25).into_dyn();
        let spec = serde_json::json!({"k": 1});
        for p in [&p1, &p2] {
            save_checkpoint(p, "seg", &spec, 3, &[("t".into(), t.view())]).unwrap();
        }
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
