//! Binary model checkpoints.
//!
//! Layout: magic `TMHF`, `u32` LE format version, `u32` LE manifest length,
//! a JSON manifest (stage, backbone config and one `{name, shape, offset}`
//! entry per tensor, offsets in bytes from the start of the data section),
//! then every tensor as raw little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::SemanticHead;
use crate::numeric::Tensor;
use crate::pipeline::{ModelState, Stage};

pub const MAGIC: &[u8; 4] = b"TMHF";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    stage: Stage,
    backbone: BackboneConfig,
    global_classes: usize,
    semantic_classes: usize,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode(model: &ModelState) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        stage: model.stage,
        backbone: *model.config(),
        global_classes: model.global_classes(),
        semantic_classes: model.delta.classes(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<ModelState> {
    let corrupt = |offset: usize, msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 12 {
        return Err(corrupt(bytes.len(), "checkpoint header is truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let start = 12 + len;
    if bytes.len() < start {
        return Err(corrupt(bytes.len(), format!("manifest of {len} bytes is truncated")));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[12..start]).map_err(|e| corrupt(12, format!("bad manifest: {e}")))?;
    let data = &bytes[start..];

    let mut model = ModelState::new(manifest.backbone, manifest.global_classes, 0)?;
    model.stage = manifest.stage;
    if manifest.semantic_classes != model.delta.classes() {
        model.delta = SemanticHead {
            weight: Tensor::zeros(&[model.feature_dim(), manifest.semantic_classes]),
            bias: Tensor::zeros(&[manifest.semantic_classes]),
        };
    }
    let mut slots = model.named_tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(corrupt(
            12,
            format!("expected {} tensors, manifest lists {}", slots.len(), manifest.tensors.len()),
        ));
    }
    let mut end = 0usize;
    for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(corrupt(
                12,
                format!("expected {name} {:?}, found {} {:?}", slot.shape(), entry.name, entry.shape),
            ));
        }
        let off = entry.offset as usize;
        let nbytes = slot.len() * 4;
        if off + nbytes > data.len() {
            return Err(corrupt(start + data.len(), format!("tensor {name} is truncated")));
        }
        for (v, chunk) in slot.data_mut().iter_mut().zip(data[off..off + nbytes].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        if !slot.all_finite() {
            return Err(corrupt(start + off, format!("tensor {name} holds non-finite values")));
        }
        end = end.max(off + nbytes);
    }
    if end != data.len() {
        return Err(corrupt(start + end, format!("{} trailing bytes", data.len() - end)));
    }
    drop(slots);
    Ok(model)
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Arch;

    fn model(arch: Arch) -> ModelState {
        let cfg = BackboneConfig {
            arch,
            channels: 20,
            input_hw: 16,
            depth: 3,
        };
        ModelState::new(cfg, 5, 42).unwrap()
    }

    #[test]
    fn round_trip() {
        for arch in [Arch::Conv4, Arch::Resnet12] {
            let m = model(arch);
            let bytes = encode(&m).unwrap();
            assert_eq!(&bytes[..4], b"TMHF");
            assert_eq!(decode(Path::new("m"), &bytes).unwrap(), m);
            assert_eq!(encode(&m).unwrap(), bytes);
        }
        let mut ft = model(Arch::Conv4);
        ft.stage = Stage::Finetuned;
        ft.delta = SemanticHead {
            weight: Tensor::full(&[20, 3], 0.5),
            bias: Tensor::zeros(&[3]),
        };
        assert_eq!(decode(Path::new("m"), &encode(&ft).unwrap()).unwrap(), ft);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let m = model(Arch::Conv4);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn corruption_is_reported() {
        let m = model(Arch::Conv4);
        let bytes = encode(&m).unwrap();
        let p = Path::new("m");
        assert!(matches!(decode(p, &bytes[..bytes.len() - 1]), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(p, &bad), Err(Error::Corrupt { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(p, &bad), Err(Error::Corrupt { offset: 4, .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(p, &long), Err(Error::Corrupt { .. })));
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(p, &nan), Err(Error::Corrupt { .. })));
    }
}
