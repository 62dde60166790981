//! Versioned single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TSEGCKPT"
//! version      u32      FORMAT_VERSION
//! kind         str      "seg" | "sr"
//! config       str      model config as JSON
//! strategy     str      training strategy tag, may be empty
//! params       tensors
//! buffers      tensors  running statistics (empty for group norm and SR)
//! step         u64      optimizer updates applied
//! velocities   tensors  momentum buffers (may be empty)
//! log digest   32 bytes SHA-256 of the training log CSV
//!
//! str      = u32 byte length, UTF-8 bytes
//! tensors  = u32 count, then per tensor: str name, u32 rank, u64 dims…, f32 values
//! ```
//!
//! Tensors are written in name order and values are stored as f32, so a
//! checkpoint that has been loaded saves back to identical bytes.

use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::optim::SgdState;
use crate::segnet::{SegModel, SegNetConfig};
use crate::srnet::{SRModel, SRNetConfig};

pub const MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Seg(SegNetConfig),
    Sr(SRNetConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Seg(_) => "seg",
            ModelConfig::Sr(_) => "sr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub strategy: String,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub optimizer: SgdState,
    pub log_digest: [u8; 32],
}

/// SHA-256 of a training log's text form.
pub fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

fn rounded(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let data = t.data().iter().map(|&v| v as f32 as f64).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    }
    out
}

impl Checkpoint {
    /// Values are rounded to the f32 precision of the archive.
    pub fn from_seg(model: &SegModel, strategy: &str, optimizer: &SgdState, log_digest: [u8; 32]) -> Self {
        Checkpoint {
            config: ModelConfig::Seg(model.config().clone()),
            strategy: strategy.to_string(),
            params: rounded(model.params()),
            buffers: rounded(model.buffers()),
            optimizer: SgdState {
                step: optimizer.step,
                velocities: rounded(&optimizer.velocities),
            },
            log_digest,
        }
    }

    pub fn from_sr(model: &SRModel, optimizer: &SgdState, log_digest: [u8; 32]) -> Self {
        Checkpoint {
            config: ModelConfig::Sr(model.config().clone()),
            strategy: String::new(),
            params: rounded(model.params()),
            buffers: ParamStore::new(),
            optimizer: SgdState {
                step: optimizer.step,
                velocities: rounded(&optimizer.velocities),
            },
            log_digest,
        }
    }

    pub fn seg_model(&self) -> Result<SegModel> {
        match &self.config {
            ModelConfig::Seg(c) => SegModel::from_parts(c.clone(), self.params.clone(), self.buffers.clone()),
            ModelConfig::Sr(_) => Err(Error::Checkpoint("expected a segmentation checkpoint, found kind sr".into())),
        }
    }

    pub fn sr_model(&self) -> Result<SRModel> {
        match &self.config {
            ModelConfig::Sr(c) => SRModel::from_parts(c.clone(), self.params.clone()),
            ModelConfig::Seg(_) => Err(Error::Checkpoint("expected a super-resolution checkpoint, found kind seg".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.config.kind());
        let json = match &self.config {
            ModelConfig::Seg(c) => serde_json::to_string(c),
            ModelConfig::Sr(c) => serde_json::to_string(c),
        }
        .expect("configs serialize");
        put_str(&mut out, &json);
        put_str(&mut out, &self.strategy);
        put_tensors(&mut out, &self.params);
        put_tensors(&mut out, &self.buffers);
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        put_tensors(&mut out, &self.optimizer.velocities);
        out.extend_from_slice(&self.log_digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = get_str(&mut r)?;
        let json = get_str(&mut r)?;
        let config = match kind.as_str() {
            "seg" => ModelConfig::Seg(serde_json::from_str(&json)?),
            "sr" => ModelConfig::Sr(serde_json::from_str(&json)?),
            other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        };
        let strategy = get_str(&mut r)?;
        let params = get_tensors(&mut r)?;
        let buffers = get_tensors(&mut r)?;
        let step = get_u64(&mut r)?;
        let velocities = get_tensors(&mut r)?;
        let mut log_digest = [0u8; 32];
        read_exact(&mut r, &mut log_digest)?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        let ckpt = Checkpoint {
            config,
            strategy,
            params,
            buffers,
            optimizer: SgdState { step, velocities },
            log_digest,
        };
        // shape validation against the stored config
        match &ckpt.config {
            ModelConfig::Seg(_) => {
                let model = ckpt.seg_model()?;
                if !ckpt.optimizer.velocities.is_empty() {
                    model.params().check_layout(&ckpt.optimizer.velocities)?;
                }
            }
            ModelConfig::Sr(_) => {
                let model = ckpt.sr_model()?;
                if !ckpt.optimizer.velocities.is_empty() {
                    model.params().check_layout(&ckpt.optimizer.velocities)?;
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn remaining(r: &Cursor<&[u8]>) -> usize {
    r.get_ref().len() - r.position() as usize
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > remaining(r) {
        return Err(truncated());
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
}

fn get_tensors(r: &mut Cursor<&[u8]>) -> Result<ParamStore> {
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = get_str(r)?;
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
        if len.checked_mul(4).is_none_or(|b| b > remaining(r)) {
            return Err(truncated());
        }
        let mut raw = vec![0u8; len * 4];
        read_exact(r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if store.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        put_str(out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::NormKind;

    fn tiny() -> SegNetConfig {
        SegNetConfig {
            levels: 2,
            base_filters: 2,
            max_filters: 8,
            deep_supervision_heads: 1,
            patch_shape: [8; 3],
            ..SegNetConfig::default()
        }
    }

    #[test]
    fn seg_round_trip_is_byte_stable() {
        let model = SegModel::build(tiny(), 3).unwrap();
        let mut state = SgdState::new();
        state.step = 17;
        state.velocities = model.params().clone();
        let ckpt = Checkpoint::from_seg(&model, "S_SSA", &state, digest("step,lr\n"));
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.strategy, "S_SSA");
        assert_eq!(back.optimizer.step, 17);
        let restored = back.seg_model().unwrap();
        assert!(restored.params().max_abs_diff(model.params()).unwrap() < 1e-6);
        assert!(back.sr_model().is_err());
    }

    #[test]
    fn sr_round_trip() {
        let model = SRModel::build(SRNetConfig { filters: 2, ..SRNetConfig::default() }, 1).unwrap();
        let ckpt = Checkpoint::from_sr(&model, &SgdState::new(), [7; 32]);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.config.kind(), "sr");
        assert_eq!(back.sr_model().unwrap().conv_layer_count(), 20);
    }

    #[test]
    fn corrupted_archives_are_rejected() {
        let model = SegModel::build(tiny(), 3).unwrap();
        let bytes = Checkpoint::from_seg(&model, "", &SgdState::new(), [0; 32]).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn shapes_are_checked_against_the_config() {
        let model = SegModel::build(tiny(), 3).unwrap();
        let mut ckpt = Checkpoint::from_seg(&model, "", &SgdState::new(), [0; 32]);
        ckpt.config = ModelConfig::Seg(SegNetConfig { norm: NormKind::Group, base_filters: 4, ..tiny() });
        assert!(Checkpoint::from_bytes(&ckpt.to_bytes()).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SegModel::build(tiny(), 3).unwrap();
        let ckpt = Checkpoint::from_seg(&model, "S_GLI_to_SSA", &SgdState::new(), [1; 32]);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        assert!(matches!(Checkpoint::load(dir.path().join("missing")), Err(Error::MissingFile(_))));
    }
}
