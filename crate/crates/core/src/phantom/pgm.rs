//! 8-bit binary PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `round(v·255)` after clamping to `[0,1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round-trips an image through 8-bit quantisation.
pub fn quantized(image: &Tensor) -> Tensor {
    image.map(|v| quantize(v) as f64 / 255.0)
}

pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = image.shape() else {
        return Err(Error::Format(format!("PGM needs an [H,W] image, got {:?}", image.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field `{s}`")));
    let w = num(token(bytes)?)?;
    let h = num(token(bytes)?)?;
    let maxval = num(token(bytes)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let payload = bytes.get(start..start + w * h).ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    Tensor::new([h, w], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}
