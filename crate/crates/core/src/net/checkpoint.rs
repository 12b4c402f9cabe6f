//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ABACUSCKPT" | u32 version | u64 json_len | json | u32 n_blocks
//! then per block: u32 name_len | name | u64 len | len × f32
//! ```
//!
//! The JSON header holds the architecture and free-form metadata. Network
//! parameters come first under their `named_params` names; any extra
//! blocks (optimizer moments) follow.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, NetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"ABACUSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub metadata: serde_json::Value,
    pub extra: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        arch: ckpt.params.arch.clone(),
        metadata: ckpt.metadata.clone(),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;

    let params = ckpt.params.named_params();
    let n = params.len() + ckpt.extra.len();
    w.write_all(&(n as u32).to_le_bytes())?;
    let blocks = params
        .iter()
        .map(|p| (p.name.as_str(), p.data))
        .chain(ckpt.extra.iter().map(|(n, d)| (n.as_str(), d.as_slice())));
    for (name, data) in blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_BLOCK: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = read_u64(r)?;
    if hlen > MAX_BLOCK {
        return Err(Error::Checkpoint("header too large".into()));
    }
    let mut hbuf = vec![0u8; hlen as usize];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let mut params = NetParams::init(&header.arch, 0)?;

    let n = read_u32(r)? as usize;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = read_u32(r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let len = read_u64(r)?;
        if len > MAX_BLOCK {
            return Err(Error::Checkpoint(format!("block {name} too large")));
        }
        let mut raw = vec![0u8; len as usize * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>();
        blocks.push((name, data));
    }

    let names: Vec<String> = params.named_params().into_iter().map(|p| p.name).collect();
    if blocks.len() < names.len() {
        return Err(Error::Checkpoint(format!(
            "expected at least {} blocks, found {}",
            names.len(),
            blocks.len()
        )));
    }
    let extra = blocks.split_off(names.len());
    for ((dst, name), (bname, data)) in params.params_mut().into_iter().zip(&names).zip(blocks) {
        if &bname != name {
            return Err(Error::Checkpoint(format!("expected block {name}, found {bname}")));
        }
        if data.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "block {name} has {} values, architecture needs {}",
                data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&data);
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
        extra,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    // Write beside the target and rename so an interrupted save never
    // leaves a truncated file behind.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, ckpt)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
