//! Binary formats: raw tensors (`RFTN`) and named-tensor checkpoints (`RFCK`).
//!
//! RFTN: magic `RFTN`, version u32 LE, rank u32 LE, each dim u64 LE, then
//! row-major f32 LE values.
//!
//! RFCK: magic `RFCK`, version u32 LE, timestamp u64 LE, config echo
//! (u32 LE length + UTF-8), tensor count u32 LE, then per tensor a name
//! (u16 LE length + UTF-8) followed by an RFTN payload, and a trailing CRC32
//! (LE) over every preceding byte except the timestamp field.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RFTN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const FORMAT_VERSION: u32 = 1;
/// Byte range of the timestamp inside an RFCK file.
pub const TIMESTAMP_RANGE: std::ops::Range<usize> = 8..16;

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        self.magic(TENSOR_MAGIC)?;
        self.version()?;
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t);
    std::fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_tensor(&bytes)
}

/// Named tensors plus provenance, as stored in an RFCK file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub timestamp: u64,
    pub config_echo: String,
    /// Sorted by name.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i].1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.extend_from_slice(&(self.config_echo.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_echo.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }
        let crc = checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 16 {
            return Err(Error::Format("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if checksum(body) != stored {
            return Err(Error::Format("checkpoint CRC32 mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let timestamp = r.u64()?;
        let echo_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
            .map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            tensors.push((name, r.tensor()?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            timestamp,
            config_echo,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn checksum(body: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&body[..TIMESTAMP_RANGE.start.min(body.len())]);
    if body.len() > TIMESTAMP_RANGE.end {
        h.update(&body[TIMESTAMP_RANGE.end..]);
    }
    h.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            timestamp: 42,
            config_echo: "fusion.alpha = 0.8\n".into(),
            tensors: vec![
                ("a.w".into(), Tensor::from_f64([2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap()),
                ("b".into(), Tensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn tensor_layout_is_bit_exact() {
        let t = Tensor::from_f64([1, 2], &[1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t);
        let mut want = b"RFTN".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(read_tensor(&buf).unwrap(), t);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RFCK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(ck.get("b").unwrap().numel(), 3);
    }

    #[test]
    fn crc_ignores_timestamp_but_catches_corruption() {
        let mut a = sample();
        let ba = a.to_bytes().unwrap();
        a.timestamp = 7;
        let bb = a.to_bytes().unwrap();
        assert_eq!(ba[ba.len() - 4..], bb[bb.len() - 4..]);
        let mut bad = ba.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }
}
