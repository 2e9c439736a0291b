//! Binary PGM (P5) and PPM (P6) images with 8-bit samples `round(255 v)`.

use std::fs;
use std::path::Path;

use spsedit_core::numerics::TensorValue;

use crate::error::{Error, FormatError};

/// Decoded image with samples scaled back to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl Image {
    pub fn value(&self, i: usize) -> f64 {
        f64::from(self.samples[i]) / 255.0
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[h, w]` tensor as P5 or a `[h, w, 3]` tensor as P6.
pub fn encode(t: &TensorValue) -> Result<Vec<u8>, FormatError> {
    let (magic, h, w) = match t.shape() {
        [h, w] => ("P5", *h, *w),
        [h, w, 3] => ("P6", *h, *w),
        s => return Err(FormatError::Image(format!("cannot encode a tensor of shape {s:?}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image, FormatError> {
    let bad = |m: &str| FormatError::Image(m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    i += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let len = width * height * channels;
    let samples = bytes.get(i..).filter(|r| r.len() == len).ok_or_else(|| bad("raster size does not match header"))?;
    Ok(Image { width, height, channels, samples: samples.to_vec() })
}

pub fn save(path: &Path, t: &TensorValue) -> Result<(), Error> {
    let bytes = encode(t).map_err(|e| Error::Format { path: path.to_path_buf(), source: e })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Image, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), source: e })
}
