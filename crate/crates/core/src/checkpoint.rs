//! Binary checkpoint archive: named `f64` tensors plus a config hash and a
//! step counter.
//!
//! Layout (little-endian):
//! ```text
//! magic   b"HVCK"
//! version u32
//! hash    32 bytes (sha256 of the canonical model-config text)
//! step    u64
//! count   u32
//! entry*  name_len u16, name utf-8, rank u8, dims u32 × rank, data f64 × n
//! ```
//! The same container stores model parameters, optimiser state (under an
//! `opt.` prefix) and fixed feature-extractor weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HVCK";
const VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], step: u64) -> Self {
        Checkpoint {
            config_hash,
            step,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, map: &BTreeMap<String, Tensor>) {
        for (k, v) in map {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Split out the tensors under `prefix`, stripping it.
    pub fn take_prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let e = io_err(path);
    w.write_all(MAGIC).map_err(&e)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(&e)?;
    w.write_all(&ckpt.config_hash).map_err(&e)?;
    w.write_u64::<LittleEndian>(ckpt.step).map_err(&e)?;
    w.write_u32::<LittleEndian>(ckpt.tensors.len() as u32)
        .map_err(&e)?;
    for (name, t) in &ckpt.tensors {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "parameter name too long");
        w.write_u16::<LittleEndian>(bytes.len() as u16).map_err(&e)?;
        w.write_all(bytes).map_err(&e)?;
        w.write_u8(t.shape().len() as u8).map_err(&e)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(&e)?;
        }
        for &v in t.iter() {
            w.write_f64::<LittleEndian>(v).map_err(&e)?;
        }
    }
    w.flush().map_err(&e)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let e = io_err(path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&e)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{}: not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&e)?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "{}: unsupported archive version {version}",
            path.display()
        )));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(&e)?;
    let step = r.read_u64::<LittleEndian>().map_err(&e)?;
    let count = r.read_u32::<LittleEndian>().map_err(&e)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(&e)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(&e)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Data(format!("{}: non-utf8 tensor name", path.display())))?;
        let rank = r.read_u8().map_err(&e)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(&e)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(&e)?;
        tensors.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(Checkpoint {
        config_hash: hash,
        step,
        tensors,
    })
}
