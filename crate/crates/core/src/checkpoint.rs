//! On-disk formats: checkpoints (`manifest.json` + `tensors.bin`) and
//! calibration sets (`calib.json` + `calib.bin`).
//!
//! Blobs hold little-endian `f32` values. Tensors are written in a fixed
//! order so that write, read, write yields identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionWeights, MlaLayerWeights, Modality, ModalityPair, ModelConfig, TokenSequence};
use crate::numerics::Matrix;
use crate::rope::Position;
use crate::selection::{Strategy, SubspaceSelection};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const CALIB_MANIFEST: &str = "calib.json";
pub const CALIB_BLOB: &str = "calib.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Gqa,
    Mla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeLayout {
    PairedEvenOdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
}

/// Which factor set serves each modality in one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub visual: Modality,
    pub text: Modality,
    /// Modality whose factors were fitted on the other modality's data.
    pub fallback: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub rope_layout: RopeLayout,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SubspaceSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_routing: Option<Vec<LayerRouting>>,
}

/// A model as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Gqa { cfg: ModelConfig, layers: Vec<AttentionWeights> },
    Mla {
        cfg: ModelConfig,
        strategy: Strategy,
        layers: Vec<MlaLayerWeights>,
    },
}

impl Checkpoint {
    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Checkpoint::Gqa { cfg, .. } | Checkpoint::Mla { cfg, .. } => cfg,
        }
    }

    /// Canonical `(name, tensor)` list.
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        match self {
            Checkpoint::Gqa { layers, .. } => {
                for (i, w) in layers.iter().enumerate() {
                    for (n, m) in [("w_q", &w.w_q), ("w_k", &w.w_k), ("w_v", &w.w_v), ("w_o", &w.w_o)] {
                        out.push((format!("layer.{i}.{n}"), m));
                    }
                }
            }
            Checkpoint::Mla { layers, .. } => {
                for (i, w) in layers.iter().enumerate() {
                    out.push((format!("layer.{i}.w_q"), &w.w_q));
                    out.push((format!("layer.{i}.w_o"), &w.w_o));
                    out.push((format!("layer.{i}.k_rope_rows"), &w.k_rope_rows));
                    for (kind, pair) in [("w_down", &w.w_down), ("w_up", &w.w_up)] {
                        for m in Modality::ALL {
                            for (g, t) in pair.get(m).iter().enumerate() {
                                out.push((format!("layer.{i}.{kind}.{}.{g}", m.name()), t));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Manifest and blob bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, m) in self.named_tensors() {
            let offset = blob.len() as u64;
            for &v in m.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                dtype: DType::F32,
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let (architecture, selection, modality_routing) = match self {
            Checkpoint::Gqa { .. } => (Architecture::Gqa, None, None),
            Checkpoint::Mla { strategy, layers, .. } => (
                Architecture::Mla,
                Some(SubspaceSelection {
                    strategy: *strategy,
                    layers: layers.iter().map(|w| w.selection.clone()).collect(),
                }),
                Some(
                    layers
                        .iter()
                        .map(|w| LayerRouting {
                            visual: Modality::Visual,
                            text: Modality::Text,
                            fallback: w.fallback,
                        })
                        .collect(),
                ),
            ),
        };
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            architecture,
            config: *self.cfg(),
            rope_layout: RopeLayout::PairedEvenOdd,
            tensors,
            selection,
            modality_routing,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Checkpoint> {
        let man: CheckpointManifest = serde_json::from_slice(manifest)?;
        if man.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}, expected {FORMAT_VERSION}",
                man.format_version
            )));
        }
        let cfg = man.config;
        cfg.validate()?;
        let mut spans: Vec<(u64, u64, &str)> = man
            .tensors
            .iter()
            .map(|t| (t.offset, t.length, t.name.as_str()))
            .collect();
        spans.sort_unstable();
        let mut end = 0u64;
        for (off, len, name) in &spans {
            if *off < end {
                return Err(Error::Format(format!("tensor {name} overlaps the previous tensor")));
            }
            end = off
                .checked_add(*len)
                .ok_or_else(|| Error::Format(format!("tensor {name} extent overflows")))?;
            if end > blob.len() as u64 {
                return Err(Error::Format(format!(
                    "tensor {name} ends at byte {end}, blob has {}",
                    blob.len()
                )));
            }
        }
        let mut table = std::collections::BTreeMap::new();
        for t in &man.tensors {
            if t.length != (t.shape[0] * t.shape[1] * 4) as u64 {
                return Err(Error::Format(format!(
                    "tensor {} has {} bytes for shape {:?}",
                    t.name, t.length, t.shape
                )));
            }
            if table.insert(t.name.clone(), t).is_some() {
                return Err(Error::Format(format!("tensor {} listed twice", t.name)));
            }
        }
        let mut used = 0usize;
        let mut take = |name: String, shape: (usize, usize)| -> Result<Matrix> {
            let t = table
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if (t.shape[0], t.shape[1]) != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            used += 1;
            let bytes = &blob[t.offset as usize..(t.offset + t.length) as usize];
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Matrix::from_vec(shape.0, shape.1, data)?;
            if !m.is_finite() {
                return Err(Error::Format(format!("tensor {name} has non-finite values")));
            }
            Ok(m)
        };
        let (q, kv, dm) = (cfg.n_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head, cfg.d_model);
        let ckpt = match man.architecture {
            Architecture::Gqa => {
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for i in 0..cfg.n_layers {
                    layers.push(AttentionWeights {
                        w_q: take(format!("layer.{i}.w_q"), (q, dm))?,
                        w_k: take(format!("layer.{i}.w_k"), (kv, dm))?,
                        w_v: take(format!("layer.{i}.w_v"), (kv, dm))?,
                        w_o: take(format!("layer.{i}.w_o"), (dm, q))?,
                    });
                }
                Checkpoint::Gqa { cfg, layers }
            }
            Architecture::Mla => {
                let sel = man
                    .selection
                    .as_ref()
                    .ok_or_else(|| Error::Format("MLA checkpoint without selection lists".into()))?;
                if sel.layers.len() != cfg.n_layers {
                    return Err(Error::Format("selection list count differs from n_layers".into()));
                }
                let routing = man.modality_routing.clone().unwrap_or_default();
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for i in 0..cfg.n_layers {
                    let w_q = take(format!("layer.{i}.w_q"), (q, dm))?;
                    let w_o = take(format!("layer.{i}.w_o"), (dm, q))?;
                    let k_rope_rows = take(format!("layer.{i}.k_rope_rows"), (cfg.n_kv_heads * cfg.d_rope, dm))?;
                    let mut factors = |kind: &str, shape: (usize, usize)| -> Result<ModalityPair<Vec<Matrix>>> {
                        let mut pair = ModalityPair::new(Vec::new(), Vec::new());
                        for m in Modality::ALL {
                            for g in 0..cfg.n_kv_heads {
                                pair.get_mut(m).push(take(format!("layer.{i}.{kind}.{}.{g}", m.name()), shape)?);
                            }
                        }
                        Ok(pair)
                    };
                    let w_down = factors("w_down", (cfg.d_latent, dm))?;
                    let w_up = factors("w_up", (cfg.up_rows(), cfg.d_latent))?;
                    let r = routing.get(i);
                    if let Some(r) = r {
                        if r.visual != Modality::Visual || r.text != Modality::Text {
                            return Err(Error::Format(format!("layer {i}: only identity modality routing is supported")));
                        }
                    }
                    let w = MlaLayerWeights {
                        selection: sel.layers[i].clone(),
                        w_q,
                        k_rope_rows,
                        w_down,
                        w_up,
                        w_o,
                        fallback: r.and_then(|r| r.fallback),
                    };
                    w.validate(&cfg).map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
                    layers.push(w);
                }
                Checkpoint::Mla {
                    cfg,
                    strategy: sel.strategy,
                    layers,
                }
            }
        };
        if used != man.tensors.len() {
            return Err(Error::Format(format!(
                "{} tensors listed, {used} expected by the architecture",
                man.tensors.len()
            )));
        }
        Ok(ckpt)
    }
}

/// Write `files` into `dir` through a temporary sibling directory so a
/// failed write leaves no partial output.
pub fn write_dir_atomic(dir: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", dir.display())))?;
    let tmp: PathBuf = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    let result = (|| -> Result<()> {
        for (file, bytes) in files {
            fs::write(tmp.join(file), bytes)?;
        }
        if dir.exists() {
            let allowed: Vec<&str> = files.iter().map(|f| f.0).collect();
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                let fname = entry.file_name();
                if !allowed.iter().any(|a| fname == **a) {
                    return Err(Error::InvalidArgument(format!(
                        "{} exists and holds other files; refusing to replace it",
                        dir.display()
                    )));
                }
            }
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

/// Write one file through a temporary sibling and a rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (json, blob) = ckpt.encode()?;
    write_dir_atomic(dir, &[(MANIFEST, &json), (TENSORS, &blob)])
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_file(&dir.join(MANIFEST))?;
    let blob = read_file(&dir.join(TENSORS))?;
    Checkpoint::decode(&manifest, &blob)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibSequenceEntry {
    pub offset: u64,
    pub length: u64,
    pub tokens: TokenRecord,
}

/// Per-token tags and `(t, h, w)` position ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// 0 = text, 1 = visual.
    pub modality: Vec<u8>,
    pub t: Vec<u64>,
    pub h: Vec<u64>,
    pub w: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibManifest {
    pub format_version: u32,
    pub d_model: usize,
    pub dtype: DType,
    pub sequences: Vec<CalibSequenceEntry>,
}

/// Calibration bytes; embeddings are stored token by token.
pub fn encode_calibration(seqs: &[TokenSequence]) -> Result<(Vec<u8>, Vec<u8>)> {
    let d_model = seqs.first().map_or(0, TokenSequence::d_model);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.d_model() != d_model {
            return Err(Error::Shape("calibration sequences differ in d_model".into()));
        }
        let offset = blob.len() as u64;
        for j in 0..s.len() {
            for v in s.embeddings.col(j) {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        entries.push(CalibSequenceEntry {
            offset,
            length: blob.len() as u64 - offset,
            tokens: TokenRecord {
                modality: s.modality.iter().map(|m| m.tag()).collect(),
                t: s.positions.iter().map(|p| p.t).collect(),
                h: s.positions.iter().map(|p| p.h).collect(),
                w: s.positions.iter().map(|p| p.w).collect(),
            },
        });
    }
    let manifest = CalibManifest {
        format_version: FORMAT_VERSION,
        d_model,
        dtype: DType::F32,
        sequences: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

pub fn decode_calibration(manifest: &[u8], blob: &[u8]) -> Result<Vec<TokenSequence>> {
    let man: CalibManifest = serde_json::from_slice(manifest)?;
    if man.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported calibration format_version {}", man.format_version)));
    }
    let d = man.d_model;
    let mut out = Vec::with_capacity(man.sequences.len());
    for (i, e) in man.sequences.iter().enumerate() {
        let tok = &e.tokens;
        let n = tok.modality.len();
        if tok.t.len() != n || tok.h.len() != n || tok.w.len() != n {
            return Err(Error::Format(format!("sequence {i}: token records differ in length")));
        }
        if e.length != (n * d * 4) as u64 {
            return Err(Error::Format(format!("sequence {i}: {} bytes for {n} tokens", e.length)));
        }
        let end = e.offset.checked_add(e.length).filter(|&x| x <= blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::Format(format!("sequence {i} extends past the blob")));
        };
        let bytes = &blob[e.offset as usize..end as usize];
        let mut emb = Matrix::zeros(d, n);
        for (k, c) in bytes.chunks_exact(4).enumerate() {
            emb[(k % d, k / d)] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        let modality = tok.modality.iter().map(|&t| Modality::from_tag(t)).collect::<Result<Vec<_>>>()?;
        let positions = (0..n)
            .map(|j| Position {
                t: tok.t[j],
                h: tok.h[j],
                w: tok.w[j],
            })
            .collect();
        let seq = TokenSequence::new(emb, modality, positions).map_err(|err| Error::Format(format!("sequence {i}: {err}")))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn save_calibration(dir: &Path, seqs: &[TokenSequence]) -> Result<()> {
    let (json, blob) = encode_calibration(seqs)?;
    write_dir_atomic(dir, &[(CALIB_MANIFEST, &json), (CALIB_BLOB, &blob)])
}

pub fn load_calibration(dir: &Path) -> Result<Vec<TokenSequence>> {
    let manifest = read_file(&dir.join(CALIB_MANIFEST))?;
    let blob = read_file(&dir.join(CALIB_BLOB))?;
    decode_calibration(&manifest, &blob)
}
