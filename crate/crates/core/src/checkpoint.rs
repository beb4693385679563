//! Versioned binary parameter container shared by the selector and refiner.
//!
//! Layout (little endian): magic, `u32` version, kind string, config JSON,
//! `u32` parameter count, then per parameter: name, `u32` rank, `u64` dims,
//! and `f32` values. Strings are `u32` length-prefixed UTF-8.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{bail, DprError, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"DPRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"selector"`.
    pub kind: String,
    /// Config echo as JSON text.
    pub config: String,
    pub params: Vec<NamedTensor>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if n > limit {
        bail!(Checkpoint, "string length {n} exceeds limit {limit}");
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| DprError::Checkpoint("invalid UTF-8".into()))
}

fn truncated(e: std::io::Error) -> DprError {
    DprError::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DprError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| DprError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DprError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    write_str(&mut w, &ckpt.kind).map_err(io)?;
    write_str(&mut w, &ckpt.config).map_err(io)?;
    w.write_u32::<LittleEndian>(ckpt.params.len() as u32).map_err(io)?;
    for p in &ckpt.params {
        if p.shape.iter().product::<usize>() != p.data.len() {
            bail!(Checkpoint, "parameter `{}` shape {:?} does not match data", p.name, p.shape);
        }
        write_str(&mut w, &p.name).map_err(io)?;
        w.write_u32::<LittleEndian>(p.shape.len() as u32).map_err(io)?;
        for &d in &p.shape {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in &p.data {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DprError::Missing(path.to_path_buf())
        } else {
            DprError::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        bail!(Checkpoint, "{} is not a checkpoint file", path.display());
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        bail!(Checkpoint, "unsupported checkpoint version {version}");
    }
    let kind = read_str(&mut r, 256)?;
    let config = read_str(&mut r, 1 << 20)?;
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = read_str(&mut r, 4096)?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if rank > 8 {
            bail!(Checkpoint, "parameter `{name}` has rank {rank}");
        }
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
        params.push(NamedTensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| DprError::io(path, e))? != 0 {
        bail!(Checkpoint, "trailing bytes after parameters");
    }
    Ok(Checkpoint {
        kind,
        config,
        params,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DprError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exports every parameter of `store` in name order.
pub fn export_params(store: &ParamStore) -> Result<Vec<NamedTensor>> {
    store
        .named_vars()
        .into_iter()
        .map(|(name, var)| {
            let t = var.as_tensor();
            Ok(NamedTensor {
                name,
                shape: t.dims().to_vec(),
                data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
            })
        })
        .collect()
}

/// Overwrites the parameters of `store`; names and shapes must match exactly.
pub fn import_params(store: &ParamStore, params: &[NamedTensor]) -> Result<()> {
    let vars = store.named_vars();
    if vars.len() != params.len() {
        bail!(
            Checkpoint,
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            vars.len()
        );
    }
    for p in params {
        let Some(var) = vars.get(&p.name) else {
            bail!(Checkpoint, "unexpected parameter `{}`", p.name);
        };
        if var.dims() != p.shape.as_slice() {
            bail!(
                Checkpoint,
                "parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                p.shape,
                var.dims()
            );
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "parameter `{}` contains non-finite values", p.name);
        }
        let t = Tensor::from_slice(&p.data, p.shape.as_slice(), store.device())?
            .to_dtype(store.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::Init;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            config: r#"{"a":1}"#.into(),
            params: vec![
                NamedTensor {
                    name: "w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0],
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![],
                    data: vec![0.25],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
        assert_eq!(file_hash(&path).unwrap().len(), 64);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DprError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(matches!(
            load_checkpoint(&dir.path().join("none")),
            Err(DprError::Missing(_))
        ));
    }

    #[test]
    fn import_validates_shapes() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        store.builder().get_with_hints((2, 3), "w", Init::Const(0.0)).unwrap();
        store.builder().get_with_hints((), "b", Init::Const(0.0)).unwrap();
        import_params(&store, &sample().params).unwrap();
        assert_eq!(export_params(&store).unwrap().len(), 2);
        let mut wrong = sample().params;
        wrong[0].shape = vec![3, 2];
        assert!(import_params(&store, &wrong).is_err());
    }
}
