//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `EVMC`, `u32` version, `u64` length of a
//! UTF-8 JSON [`ModelConfig`], the JSON bytes, then one record per parameter
//! until end of file: `u32` name length, name bytes, `u32` rank, `rank` x
//! `u64` dims, and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::model::{MaeModel, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EVMC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn corrupt(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Corrupt(e.to_string())
}

pub fn write_checkpoint<W: Write>(model: &MaeModel, mut out: W) -> std::io::Result<()> {
    out.write_all(&MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.write_all(&json)?;
    for (_, name, t) in model.params().iter() {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &MaeModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    buf
}

/// Cursor over the checkpoint body; every read past the end is `Corrupt`.
struct Reader<'a> {
    rest: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.rest.len() < n {
            return Err(CheckpointError::Corrupt(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.rest.len()
            )));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(self.take(4, what)?.read_u32::<LittleEndian>()?)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(self.take(8, what)?.read_u64::<LittleEndian>()?)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<MaeModel, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Corrupt("file shorter than magic".into()));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut r = Reader { rest: &bytes[4..] };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = usize::try_from(r.u64("config length")?).map_err(corrupt)?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config")?).map_err(corrupt)?;
    let mut model = MaeModel::new(cfg)?;

    let mut named = Vec::with_capacity(model.params().len());
    while !r.rest.is_empty() {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(corrupt)?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("parameter {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dims")?).map_err(corrupt)?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt(format!("parameter {name}: size overflow")))?;
        let mut data = r.take(count, "values")?;
        let mut values = vec![0.0; count / 8];
        data.read_f64_into::<LittleEndian>(&mut values)?;
        named.push((name, Tensor::new(shape, values)));
    }
    model
        .load_params(named)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &MaeModel, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MaeModel, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}
