//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DLPOCKPT"
//! format     u32      FORMAT_VERSION
//! meta_len   u32      length of the metadata JSON
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_blocks   u32
//! per block: rows u32, cols u32, rows*cols f64
//! digest     32 bytes SHA-256 of everything above
//! ```
//!
//! Blocks appear in the order of `ModelShape::block_shapes`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ModelShape};

pub const MAGIC: &[u8; 8] = b"DLPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    pub fine_steps: usize,
    pub coarse_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    /// Episode (or pretraining step count) at which the parameters were taken.
    pub episode: usize,
    pub policy_version: u64,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub params: DenoiserParams,
    pub meta: CheckpointMeta,
    /// Metadata fields that differ from what the caller expected.
    pub warnings: Vec<String>,
}

pub fn encode(params: &DenoiserParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(64 + meta_json.len() + params.n_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("unexpected end of data")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<(DenoiserParams, CheckpointMeta)> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: origin.into(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 32 {
        return Err(corrupt("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32().map_err(corrupt)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            what: "checkpoint format",
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.u32().map_err(corrupt)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len).map_err(corrupt)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let mut params = DenoiserParams::zeros(meta.shape.clone())?;
    let n_blocks = r.u32().map_err(corrupt)? as usize;
    if n_blocks != params.tensors.len() {
        return Err(corrupt(format!("{n_blocks} blocks, shape declares {}", params.tensors.len())));
    }
    for (i, t) in params.tensors.iter_mut().enumerate() {
        let rows = r.u32().map_err(corrupt)? as usize;
        let cols = r.u32().map_err(corrupt)? as usize;
        if (rows, cols) != (t.rows, t.cols) {
            return Err(corrupt(format!("block {i} is {rows}x{cols}, expected {}x{}", t.rows, t.cols)));
        }
        let raw = r.take(rows * cols * 8).map_err(corrupt)?;
        *t = Tensor {
            rows,
            cols,
            data: raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes".into()));
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter".into()));
    }
    params.version = meta.policy_version;
    Ok((params, meta))
}

pub fn save_checkpoint(params: &DenoiserParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserParams, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

/// Loads and reports schedule fields that differ from `expected`.
pub fn load_checkpoint_checked(path: &Path, expected: &CheckpointMeta) -> Result<LoadedCheckpoint> {
    let (params, meta) = load_checkpoint(path)?;
    let warnings = meta_mismatches(&meta, expected);
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(LoadedCheckpoint { params, meta, warnings })
}

pub fn meta_mismatches(found: &CheckpointMeta, expected: &CheckpointMeta) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{name}: checkpoint has {a}, config has {b}"));
        }
    };
    check("fine_steps", found.fine_steps.to_string(), expected.fine_steps.to_string());
    check("coarse_steps", found.coarse_steps.to_string(), expected.coarse_steps.to_string());
    check("beta_start", found.beta_start.to_string(), expected.beta_start.to_string());
    check("beta_end", found.beta_end.to_string(), expected.beta_end.to_string());
    check("shape", format!("{:?}", found.shape), format!("{:?}", expected.shape));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn meta(shape: ModelShape) -> CheckpointMeta {
        CheckpointMeta {
            shape,
            fine_steps: 1000,
            coarse_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 3,
            episode: 0,
            policy_version: 0,
        }
    }

    fn small() -> ModelShape {
        ModelShape {
            data_len: 6,
            hidden: vec![5],
            time_dim: 4,
            cond_dim: 2,
            vocab_size: 3,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = init_params(9, small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&p, &meta(small()), &path).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta(small()));
        for (a, b) in p.flat().zip(q.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_and_bad_version_rejected() {
        let p = init_params(9, small()).unwrap();
        let bytes = encode(&p, &meta(small())).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 9], "x"),
            Err(Error::CorruptCheckpoint { .. })
        ));
        let mut v2 = bytes[..bytes.len() - 32].to_vec();
        v2[8] = 2;
        let d = Sha256::digest(&v2);
        v2.extend_from_slice(&d);
        assert!(matches!(decode(&v2, "x"), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn metadata_mismatch_is_a_warning() {
        let p = init_params(9, small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&p, &meta(small()), &path).unwrap();
        let want = CheckpointMeta {
            fine_steps: 500,
            ..meta(small())
        };
        let loaded = load_checkpoint_checked(&path, &want).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("fine_steps"));
    }
}
