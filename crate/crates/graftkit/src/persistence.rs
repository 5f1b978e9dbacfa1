//! Bit-exact on-disk artifacts.
//!
//! Every artifact is a binary tensor container plus a JSON manifest
//! sidecar at `<path>.json`. The container layout is fixed little-endian:
//!
//! ```text
//! magic "GRFT" | version u32 | tensor count u32
//! per tensor: name len u32 | UTF-8 name | dtype u8 (1=f32, 2=f64)
//!             | rank u8 | dims u64...  | raw little-endian payload
//! ```
//!
//! The manifest records the artifact kind, a config echo, seeds, and the
//! SHA-256 of the container bytes; loading verifies all of them. Writes go
//! through a temp file and rename.

use crate::diffusion::{BlobDataset, BLOB_CLASSES, BLOB_SIDE};
use crate::error::{Error, Result};
use crate::graft::{ActivationDataset, CaptureSlot};
use crate::model::{ModelGraph, ModelStructure};
use crate::tensor::{Buf, DType};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"GRFT";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Container encoding
// ---------------------------------------------------------------------------

pub fn encode_container(tensors: &[(String, Vec<usize>, Buf)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, buf) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(buf.dtype().code());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match buf {
            Buf::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Buf::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_container(data: &[u8], path: &str) -> Result<Vec<(String, Vec<usize>, Buf)>> {
    let mut r = Reader {
        data,
        pos: 0,
        path: path.to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            path: path.to_string(),
            reason: "bad magic, not a tensor container".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_string(),
            reason: "tensor name is not UTF-8".into(),
        })?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format {
            path: path.to_string(),
            reason: format!("unknown dtype code in tensor '{name}'"),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let buf = match dtype {
            DType::F32 => {
                let raw = r.take(numel * 4)?;
                Buf::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DType::F64 => {
                let raw = r.take(numel * 8)?;
                Buf::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
        };
        out.push((name, shape, buf));
    }
    if r.pos != data.len() {
        return Err(Error::Format {
            path: path.to_string(),
            reason: format!("{} trailing bytes", data.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub format_version: u32,
    pub tool: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub seeds: serde_json::Value,
    pub content_hash: String,
}

fn tool_id() -> String {
    format!("graftkit {}", env!("CARGO_PKG_VERSION"))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write bytes via temp file + rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_artifact(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    seeds: serde_json::Value,
    tensors: &[(String, Vec<usize>, Buf)],
) -> Result<()> {
    let container = encode_container(tensors);
    let manifest = Manifest {
        kind: kind.to_string(),
        format_version: FORMAT_VERSION,
        tool: tool_id(),
        config,
        seeds,
        content_hash: sha256_hex(&container),
    };
    write_atomic(path, &container)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&manifest_path(path), &json)
}

pub fn load_artifact(
    path: &Path,
    expected_kind: &str,
) -> Result<(Manifest, Vec<(String, Vec<usize>, Buf)>)> {
    let mpath = manifest_path(path);
    let mbytes = std::fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    if manifest.kind != expected_kind {
        return Err(Error::KindMismatch {
            path: path.display().to_string(),
            expected: expected_kind.to_string(),
            found: manifest.kind,
        });
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let hash = sha256_hex(&bytes);
    if hash != manifest.content_hash {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
            expected: manifest.content_hash,
            found: hash,
        });
    }
    let tensors = decode_container(&bytes, &path.display().to_string())?;
    Ok((manifest, tensors))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn model_tensors(model: &ModelGraph) -> Vec<(String, Vec<usize>, Buf)> {
    model
        .named_params()
        .into_iter()
        .map(|(name, p)| (name, p.shape().to_vec(), (**p.value()).clone()))
        .collect()
}

/// Content hash over a model's structure and parameter payload.
pub fn model_fingerprint(model: &ModelGraph) -> String {
    let mut bytes = encode_container(&model_tensors(model));
    if let Ok(s) = serde_json::to_vec(&model.structure()) {
        bytes.extend_from_slice(&s);
    }
    sha256_hex(&bytes)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    let structure = model.structure();
    save_artifact(
        path,
        "checkpoint",
        serde_json::to_value(&structure)?,
        serde_json::json!({ "model_seed": structure.config.seed }),
        &model_tensors(model),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let (manifest, tensors) = load_artifact(path, "checkpoint")?;
    let structure: ModelStructure = serde_json::from_value(manifest.config)?;
    let mut model = ModelGraph::from_structure(&structure)?;
    model.fill_params(&tensors)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Activation datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ActivationHeader {
    layer: usize,
    slot: CaptureSlot,
    count: usize,
    seq_len: usize,
    width: usize,
    modulation_aware: bool,
    teacher_fingerprint: String,
}

pub fn save_activations(acts: &ActivationDataset, path: &Path) -> Result<()> {
    if acts.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to save an empty activation dataset".into(),
        ));
    }
    let header = ActivationHeader {
        layer: acts.layer,
        slot: acts.slot,
        count: acts.len(),
        seq_len: acts.seq_len,
        width: acts.width,
        modulation_aware: acts.modulation_aware,
        teacher_fingerprint: acts.teacher_fingerprint.clone(),
    };
    let shape = vec![acts.len(), acts.seq_len, acts.width];
    let tensors = vec![
        ("inputs".to_string(), shape.clone(), Buf::F32(acts.inputs_raw().to_vec())),
        ("targets".to_string(), shape, Buf::F32(acts.targets_raw().to_vec())),
        (
            "timesteps".to_string(),
            vec![acts.len()],
            Buf::F64(acts.ts_raw().iter().map(|&t| t as f64).collect()),
        ),
        (
            "labels".to_string(),
            vec![acts.len()],
            Buf::F64(acts.cs_raw().iter().map(|&c| c as f64).collect()),
        ),
    ];
    save_artifact(
        path,
        "activations",
        serde_json::to_value(&header)?,
        serde_json::Value::Null,
        &tensors,
    )
}

pub fn load_activations(path: &Path) -> Result<ActivationDataset> {
    let (manifest, tensors) = load_artifact(path, "activations")?;
    let header: ActivationHeader = serde_json::from_value(manifest.config)?;
    let find = |name: &str| -> Result<&(String, Vec<usize>, Buf)> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing tensor '{name}'"),
            })
    };
    let inputs = find("inputs")?.2.as_f32().to_vec();
    let targets = find("targets")?.2.as_f32().to_vec();
    let ts: Vec<usize> = find("timesteps")?.2.as_f64().iter().map(|&t| t as usize).collect();
    let cs: Vec<usize> = find("labels")?.2.as_f64().iter().map(|&c| c as usize).collect();
    ActivationDataset::from_parts(
        header.layer,
        header.slot,
        header.modulation_aware,
        header.teacher_fingerprint,
        header.seq_len,
        header.width,
        inputs,
        targets,
        ts,
        cs,
    )
}

// ---------------------------------------------------------------------------
// Blob datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    seed: u64,
    size: usize,
    classes: Vec<usize>,
    image_side: usize,
}

pub fn save_dataset(data: &BlobDataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        seed: data.seed(),
        size: data.len(),
        classes: (0..BLOB_CLASSES).collect(),
        image_side: BLOB_SIDE,
    };
    let tensors = vec![
        (
            "images".to_string(),
            vec![data.len(), 1, BLOB_SIDE, BLOB_SIDE],
            Buf::F32(data.pixels().to_vec()),
        ),
        (
            "labels".to_string(),
            vec![data.len()],
            Buf::F64(data.labels().iter().map(|&l| l as f64).collect()),
        ),
    ];
    save_artifact(
        path,
        "dataset",
        serde_json::to_value(&header)?,
        serde_json::json!({ "seed": data.seed() }),
        &tensors,
    )
}

pub fn load_dataset(path: &Path) -> Result<BlobDataset> {
    let (manifest, tensors) = load_artifact(path, "dataset")?;
    let header: DatasetHeader = serde_json::from_value(manifest.config)?;
    let images = tensors
        .iter()
        .find(|(n, _, _)| n == "images")
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "missing tensor 'images'".into(),
        })?
        .2
        .as_f32()
        .to_vec();
    let labels: Vec<usize> = tensors
        .iter()
        .find(|(n, _, _)| n == "labels")
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "missing tensor 'labels'".into(),
        })?
        .2
        .as_f64()
        .iter()
        .map(|&l| l as usize)
        .collect();
    BlobDataset::from_parts(images, labels, header.seed)
}

/// Pretty-printed JSON written atomically; used by reports.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    write_atomic(path, &bytes)
}
