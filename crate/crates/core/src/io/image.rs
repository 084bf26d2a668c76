//! Single-channel image files: binary PGM (P5) and 8-bit grayscale PNG.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat as PngCodec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            _ => Err(Error::UnsupportedFormat(format!("{} (expected .pgm or .png)", path.display()))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a `1 x H x W` map in `[0, 1]`; the format is sniffed from the content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else {
        Err(Error::UnsupportedFormat("not a binary PGM or PNG file".into()))
    }
}

/// Writes `map` (`1 x H x W` or `H x W`), format chosen by extension.
/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn save_image(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(map, ImageFormat::from_path(path)?)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_image(map: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(map)?;
    let pixels = quantize(map);
    match format {
        ImageFormat::Pgm => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&pixels);
            Ok(out)
        }
        ImageFormat::Png => {
            let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized from the map");
            let mut out = Cursor::new(Vec::new());
            img.write_to(&mut out, PngCodec::Png)
                .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
            Ok(out.into_inner())
        }
    }
}

fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [1, h, w] | [h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::shape("save_image", format!("expected 1xHxW, got {s:?}"))),
    }
}

fn quantize(map: &Tensor) -> Vec<u8> {
    map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, PngCodec::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Header tokens of a PGM file: whitespace-separated, `#` comments to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("pgm header: bad {what}")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::Format(format!("pgm header: {w}x{h}, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("pgm header: missing raster separator".into()));
    }
    let raster = &bytes[hdr.pos + 1..];
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = w * h * depth;
    if raster.len() < need {
        return Err(Error::Format(format!("pgm raster truncated: {} of {need} bytes", raster.len())));
    }
    let scale = maxval as f64;
    let data = if depth == 1 {
        raster[..need].iter().map(|&p| (p as f64 / scale).min(1.0)).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handcrafted_pgm() {
        let mut bytes = b"P5\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 204, 255]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 0.2, 0.8, 1.0]);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let mut bytes = b"P5 1 2 1000 ".to_vec();
        bytes.extend_from_slice(&500u16.to_be_bytes());
        bytes.extend_from_slice(&1000u16.to_be_bytes());
        assert_eq!(decode_image(&bytes).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn truncated_and_unknown() {
        let bytes = b"P5\n4 4\n255\n\x00\x01".to_vec();
        assert!(matches!(decode_image(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"P2\n1 1\n255\n0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"P5\n"), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trip() {
        let t = Tensor::new(vec![1, 2, 3], vec![0.0, 0.1, 0.5, 0.7, 0.99, 1.0]).unwrap();
        let back = decode_image(&encode_image(&t, ImageFormat::Png).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
