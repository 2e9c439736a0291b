//! The `SPSE` checkpoint container: a flat list of named f64 tensors.
//!
//! Layout, all integers little-endian `u32`: magic `SPSE`, version, entry
//! count, then per entry the name length, UTF-8 name, rank, dims, and the
//! row-major payload as little-endian `f64`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use spsedit_core::numerics::TensorValue;

use crate::error::{Error, FormatError};

pub const MAGIC: [u8; 4] = *b"SPSE";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, TensorValue)>,
}

impl Container {
    pub fn new(entries: Vec<(String, TensorValue)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, TensorValue)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, TensorValue)> {
        self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: TensorValue) {
        self.entries.push((name.into(), tensor));
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, TensorValue)>) {
        self.entries.extend(entries);
    }

    pub fn get(&self, name: &str) -> Option<&TensorValue> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&TensorValue, FormatError> {
        self.get(name).ok_or_else(|| FormatError::MissingEntry(name.to_string()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&len_u32(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&len_u32(d)?.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, FormatError> {
        let c = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(FormatError::TrailingBytes(bytes.len()));
        }
        Ok(c)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(r)? as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| FormatError::BadName)?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::BadShape(name.clone()))?;
            let mut raw = vec![0u8; len.checked_mul(8).ok_or_else(|| FormatError::BadShape(name.clone()))?];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let tensor = TensorValue::new(&shape, data).map_err(|_| FormatError::BadShape(name.clone()))?;
            entries.push((name, tensor));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), source: e })
    }
}

fn len_u32(n: usize) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "length exceeds u32"))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated,
        _ => FormatError::Io(e.to_string()),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.push("scene.density", TensorValue::new(&[2, 1, 2], vec![0.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap());
        c.push("φ", TensorValue::scalar(f64::NAN));
        c.push("row", TensorValue::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.entries()[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert!(back.get("φ").unwrap().data()[0].is_nan());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SPSE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert_eq!(Container::from_bytes(&bytes), Err(FormatError::UnsupportedVersion(2)));
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert_eq!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Container::from_bytes(&extra), Err(FormatError::TrailingBytes(1)));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Container::from_bytes(&magic), Err(FormatError::BadMagic(_))));
        let mut zero = Container::new(vec![("z".into(), TensorValue::scalar(0.0))]).to_bytes();
        let dim_at = 12 + 4 + 1 + 4;
        zero[dim_at..dim_at + 4].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(Container::from_bytes(&zero), Err(FormatError::BadShape("z".into())));
    }
}
