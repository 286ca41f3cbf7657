//! `FSTK` parameter checkpoints: magic, u16 version, u32 entry count, then
//! per entry a length-prefixed path, a partition byte (0 shared, 1 private),
//! u32 rank, u32 dims and little-endian f64 values; CRC32 trailer.

use std::fs;
use std::path::Path;

use fedst_core::model::{ParamTree, Partition};
use fedst_core::tensor::Tensor;

use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"FSTK";
const VERSION: u16 = 1;

pub fn to_bytes(tree: &ParamTree) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tree.numel() * 8 + tree.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tree.len() as u32).to_le_bytes());
    for (path, p) in tree.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(match p.partition {
            Partition::Shared => 0,
            Partition::Private => 1,
        });
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamTree> {
    let bad = |m: &str| CliError::data(format!("checkpoint: {m}"));
    if bytes.len() < 14 {
        return Err(bad("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let mut r = body;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = r.split_at(n);
        r = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut tree = ParamTree::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let path = std::str::from_utf8(take(len)?).map_err(|_| bad("path is not UTF-8"))?.to_string();
        let partition = match take(1)?[0] {
            0 => Partition::Shared,
            1 => Partition::Private,
            t => return Err(bad(&format!("unknown partition tag {t}"))),
        };
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let data = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tree.get(&path).is_some() {
            return Err(bad(&format!("duplicate path {path}")));
        }
        tree.insert(path, Tensor::new(shape, data)?, partition);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(tree)
}

pub fn save(tree: &ParamTree, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(tree)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamTree> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
