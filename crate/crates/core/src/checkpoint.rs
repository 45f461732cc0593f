//! Binary checkpoints: magic, version, config digest, named blobs, and a
//! trailing SHA-256 of everything before it. All integers little-endian.
//!
//! ```text
//! "STTNCKPT" | u32 version | [u8; 32] config digest | u32 count
//! count x ( u32 name_len | name | u64 len | payload )
//! [u8; 32] sha256
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"STTNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub blobs: Vec<(String, Vec<u8>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn digest_from_hex(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 || !hex.is_ascii() {
        return Err(bad(format!("digest `{hex}` is not 64 hex digits")));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| bad(format!("digest `{hex}` is not hex")))?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new(digest_hex: &str) -> Result<Self> {
        Ok(Self {
            digest: digest_from_hex(digest_hex)?,
            blobs: Vec::new(),
        })
    }

    pub fn digest_hex(&self) -> String {
        self.digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn put(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        let name = name.into();
        self.blobs.retain(|(n, _)| *n != name);
        self.blobs.push((name, bytes));
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| bad(format!("missing blob `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.blobs.iter().any(|(n, _)| n == name)
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put(name, v.to_le_bytes().to_vec());
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b: [u8; 8] = self
            .get(name)?
            .try_into()
            .map_err(|_| bad(format!("`{name}` is not a u64")))?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn put_f64s(&mut self, name: &str, v: &[f64]) {
        self.put(name, v.iter().flat_map(|x| x.to_le_bytes()).collect());
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        let b = self.get(name)?;
        if b.len() % 8 != 0 {
            return Err(bad(format!("`{name}` is not an f64 array")));
        }
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// `u8 dtype | u32 rank | rank x u64 | values`.
    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut out = vec![T::DTYPE];
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match T::DTYPE {
                4 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        self.put(name, out);
    }

    pub fn get_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let mut r = Reader {
            bytes: self.get(name)?,
            pos: 0,
        };
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(bad(format!(
                "`{name}`: dtype {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype as usize)?;
        if r.pos != r.bytes.len() {
            return Err(bad(format!("`{name}`: trailing bytes")));
        }
        let data = raw
            .chunks_exact(dtype as usize)
            .map(|c| match dtype {
                4 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        Tensor::new(shape, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, bytes) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 4 + 32 {
            return Err(bad("truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| bad("blob name is not utf-8"))?
                .to_string();
            let len = r.u64()? as usize;
            blobs.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { digest, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.encode())
    }

    /// Loads and, when `expected` is given, rejects a different config digest.
    pub fn load(path: &Path, expected: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if let Some(hex) = expected {
            if ck.digest != digest_from_hex(hex)? {
                return Err(bad(format!(
                    "{}: config digest {} does not match {hex}",
                    path.display(),
                    ck.digest_hex()
                )));
            }
        }
        Ok(ck)
    }
}
