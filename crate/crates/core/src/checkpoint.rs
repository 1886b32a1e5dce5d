//! Binary array container shared by model and predictor checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic [u8; 4] | version u32
//! config_len u32 | config text ("key=value\n" lines, UTF-8)
//! array_count u32
//! per array: name_len u16 | name | rank u8 | dims u32 x rank | values f32 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"PWCM";
pub const PREDICTOR_MAGIC: [u8; 4] = *b"PWCP";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub config: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            config: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("config entry {k:?} cannot be encoded")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&len_u32(text.len())?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&len_u32(self.arrays.len())?.to_le_bytes());
        for (name, t) in &self.arrays {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("array name too long: {} bytes", name.len())))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Contract(format!("array {name:?} has rank above 255")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses `bytes`, requiring `magic` and the current format version.
    /// `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 4], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let found = r.take(4)?;
        if found != magic {
            return Err(Error::checkpoint(
                origin,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                origin,
                format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
            ));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::checkpoint(origin, "config block is not UTF-8"))?;
        let mut config = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::checkpoint(origin, format!("malformed config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::checkpoint(origin, "array name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::checkpoint(origin, "array too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(origin, "trailing bytes after last array"));
        }
        Ok(Self { magic, config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, path)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::checkpoint(
                self.origin,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(MODEL_MAGIC);
        c.config.push(("d".into(), "4".into()));
        c.config.push(("tau".into(), "0.5".into()));
        c.arrays.push(("w".into(), Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.25, 3.0, -0.125]).unwrap()));
        c.arrays.push(("s".into(), Tensor::scalar(7.0)));
        c
    }

    #[test]
    fn round_trip_exact_for_f32_values() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, MODEL_MAGIC, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PWCM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + text_len], b"d=4\ntau=0.5\n");
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let err = Container::from_bytes(&bytes, MODEL_MAGIC, Path::new("m.bin")).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes, PREDICTOR_MAGIC, Path::new("m")).is_err());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut], MODEL_MAGIC, Path::new("m")).is_err());
        }
    }
}
