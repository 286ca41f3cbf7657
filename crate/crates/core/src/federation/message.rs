use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSTM";
pub const WIRE_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    SiteToServer,
    ServerToSite,
}

impl Direction {
    fn tag(self) -> u8 {
        match self {
            Direction::SiteToServer => 0,
            Direction::ServerToSite => 1,
        }
    }
}

/// One synchronous exchange: shared parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub direction: Direction,
    pub round: u32,
    pub site_id: u32,
    pub sample_count: u32,
    pub payload: BTreeMap<String, Tensor>,
}

impl RoundMessage {
    /// Serializes the message. Any payload path listed in `private` is a
    /// protocol violation and nothing is produced.
    pub fn encode(&self, private: &BTreeSet<String>) -> Result<Vec<u8>> {
        if let Some(p) = self.payload.keys().find(|p| private.contains(*p)) {
            return Err(Error::protocol(format!("private parameter {p} in outgoing message")));
        }
        let mut out = Vec::with_capacity(64 + self.payload.values().map(|t| t.numel() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.push(self.direction.tag());
        for v in [self.round, self.site_id, self.sample_count, self.payload.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (path, t) in &self.payload {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<RoundMessage> {
        if bytes.len() < 4 {
            return Err(Error::protocol("message truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::protocol("message checksum mismatch"));
        }
        let mut r = Reader(body);
        if r.bytes(4)? != MAGIC {
            return Err(Error::protocol("bad message magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != WIRE_VERSION {
            return Err(Error::protocol(format!("unsupported wire version {version}")));
        }
        let direction = match r.array::<1>()?[0] {
            0 => Direction::SiteToServer,
            1 => Direction::ServerToSite,
            t => return Err(Error::protocol(format!("bad direction tag {t}"))),
        };
        let round = r.u32()?;
        let site_id = r.u32()?;
        let sample_count = r.u32()?;
        let entries = r.u32()?;
        let mut payload = BTreeMap::new();
        for _ in 0..entries {
            let len = r.u32()? as usize;
            let path = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| Error::protocol("path is not UTF-8"))?;
            let dtype = r.array::<1>()?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::protocol(format!("{path}: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.bytes(n.checked_mul(8).ok_or_else(|| Error::protocol("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::protocol(format!("{path}: {e}")))?;
            if payload.insert(path.clone(), t).is_some() {
                return Err(Error::protocol(format!("duplicate path {path}")));
            }
        }
        if !r.0.is_empty() {
            return Err(Error::protocol("trailing bytes in message"));
        }
        Ok(RoundMessage {
            direction,
            round,
            site_id,
            sample_count,
            payload,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::protocol("message truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
