//! Binary PPM (P6, maxval 255).

use std::path::Path;

use gazeprophet_core::data::SceneImage;

use crate::error::{Error, Result};

pub fn encode(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Header fields and the offset of the first pixel byte.
fn header(bytes: &[u8]) -> std::result::Result<([usize; 3], usize), String> {
    if !bytes.starts_with(b"P6") {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields[k] = text.parse().map_err(|_| format!("header field {name} is missing or not a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("header must end with a single whitespace byte".into());
    }
    Ok((fields, pos + 1))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let ([w, h, maxval], start) = header(bytes)?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    let need = w * h * 3;
    let data = &bytes[start..];
    if data.len() != need {
        return Err(format!("{w}x{h} image needs {need} pixel bytes, found {}", data.len()));
    }
    Ok((w, h, data.to_vec()))
}

pub fn read_scene(path: &Path) -> Result<SceneImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode(&bytes).map_err(|r| Error::format(path, r))?;
    SceneImage::new(w, h, px).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_scene(path: &Path, image: &SceneImage) -> Result<()> {
    crate::atomic::write(path, &encode(image.width(), image.height(), image.pixels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_comments() {
        let px: Vec<u8> = (0..24).collect();
        let enc = encode(4, 2, &px);
        assert_eq!(decode(&enc).unwrap(), (4, 2, px.clone()));
        let mut commented = b"P6 # made by hand\n4 2\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(decode(&commented).unwrap(), (4, 2, px));
    }

    #[test]
    fn rejections() {
        assert!(decode(b"P3\n1 1\n255\n").unwrap_err().contains("P6"));
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err().contains("maxval"));
        assert!(decode(b"P6\n2 1\n255\n\0\0\0").unwrap_err().contains("needs 6"));
        assert!(decode(b"P6\nx 1\n255\n").unwrap_err().contains("width"));
    }
}
