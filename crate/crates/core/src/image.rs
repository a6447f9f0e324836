//! Grayscale images and binary PGM/PPM I/O.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tinynet::Tensor;

/// Single-channel image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::invalid(format!("image {width}x{height} with {} samples", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Top-left crop to the largest size whose sides are multiples of `multiple`.
    pub fn crop_to_multiple(&self, multiple: usize) -> Result<Self> {
        let (w, h) = (self.width / multiple * multiple, self.height / multiple * multiple);
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("image {}x{} is smaller than {multiple} px", self.width, self.height)));
        }
        if (w, h) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let data = (0..h).flat_map(|y| self.data[y * self.width..y * self.width + w].iter().copied()).collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(1, self.height, self.width, self.data.clone())
    }

    /// Binary 8-bit PGM; values are clamped to [0, 1] and rounded.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        self.write_pgm(BufWriter::new(std::fs::File::create(path)?))
    }

    /// Reads binary PGM (P5) or PPM (P6, converted to luma), 8 or 16 bit.
    pub fn read_pnm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let magic = next_token(&mut r)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(Error::format("pnm", format!("unsupported magic {magic:?}"))),
        };
        let width = parse_field(&mut r, "width")?;
        let height = parse_field(&mut r, "height")?;
        let maxval = parse_field(&mut r, "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::format("pnm", "bad header values"));
        }
        let bps = if maxval < 256 { 1 } else { 2 };
        let mut raw = vec![0u8; width * height * channels * bps];
        r.read_exact(&mut raw).map_err(|_| Error::format("pnm", "truncated pixel data"))?;
        let sample = |i: usize| -> f32 {
            let v = if bps == 1 { raw[i] as u32 } else { u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as u32 };
            v as f32 / maxval as f32
        };
        let data = (0..width * height)
            .map(|p| {
                if channels == 1 {
                    sample(p)
                } else {
                    0.299 * sample(3 * p) + 0.587 * sample(3 * p + 1) + 0.114 * sample(3 * p + 2)
                }
            })
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_pnm(std::fs::File::open(path)?)
    }
}

/// Whitespace-separated header token; `#` comments run to end of line.
/// Consumes exactly one whitespace byte after the token.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("pnm", "truncated header"));
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
            if tok.len() > 16 {
                return Err(Error::format("pnm", "header token too long"));
            }
        }
    }
}

fn parse_field<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let t = next_token(r)?;
    t.parse().map_err(|_| Error::format("pnm", format!("bad {what} {t:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_from_top_left() {
        let data = (0..641 * 481).map(|i| (i % 251) as f32 / 250.0).collect();
        let img = GrayImage::new(641, 481, data).unwrap();
        let c = img.crop_to_multiple(16).unwrap();
        assert_eq!((c.width, c.height), (640, 480));
        assert_eq!(c.get(639, 479), img.get(639, 479));
        assert_eq!(c.get(0, 1), img.get(0, 1));
    }

    #[test]
    fn pgm_round_trip_is_exact_on_8bit_levels() {
        let data = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = GrayImage::new(4, 3, data).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        let back = GrayImage::read_pnm(&buf[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn reads_ppm_with_comments() {
        let mut buf = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[255, 255, 255, 0, 0, 0]);
        let img = GrayImage::read_pnm(&buf[..]).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert!((img.data[0] - 1.0).abs() < 1e-6 && img.data[1] == 0.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(GrayImage::read_pnm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(GrayImage::read_pnm(&b"P5\n4 4\n255\n\x00"[..]).is_err());
    }
}
