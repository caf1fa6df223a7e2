//! Binary PGM (P5) and PPM (P6) images, 8-bit.

use mscnn_core::Tensor;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("unsupported image format {0:?} (expected P5 or P6)")]
    Magic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 8-bit image with interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize) -> Image8 {
        Image8 { width, height, channels, data: vec![0; width * height * channels] }
    }

    /// Channels-first tensor `1 × C × H × W` with values in [0, 1], minus
    /// the per-channel `mean` when given.
    pub fn to_tensor(&self, mean: Option<&[f64]>) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                let m = mean.and_then(|m| m.get(ch)).copied().unwrap_or(0.0);
                out[ch * h * w + i] = v as f64 / 255.0 - m;
            }
        }
        Tensor::from_vec(&[1, c, h, w], out).expect("sizes agree")
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PnmError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, PnmError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PnmError::Header("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode(bytes: &[u8]) -> Result<Image8, PnmError> {
    if bytes.len() < 2 {
        return Err(PnmError::Magic(String::from_utf8_lossy(bytes).into_owned()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(PnmError::Magic(String::from_utf8_lossy(other).into_owned())),
    };
    let mut pos = 2;
    let mut num = |what: &str| -> Result<usize, PnmError> {
        let t = next_token(bytes, &mut pos)?;
        t.parse().map_err(|_| PnmError::Header(format!("bad {what} {t:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(PnmError::Header(format!("only 8-bit images supported (maxval {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(PnmError::Header("empty image".into()));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let expected = width * height * channels;
    let found = bytes.len().saturating_sub(pos);
    if found < expected {
        return Err(PnmError::Truncated { expected, found });
    }
    Ok(Image8 { width, height, channels, data: bytes[pos..pos + expected].to_vec() })
}

pub fn load_image(path: &Path) -> Result<Image8, PnmError> {
    decode(&std::fs::read(path)?)
}
