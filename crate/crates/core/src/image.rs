//! 8-bit RGB frames and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, h, w]` with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0f32; 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                out[c * w * h + p] = self.data[p * 3 + c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], out).expect("image extents are positive")
    }

    /// 3×3 box blur with edge replication.
    pub fn box_blur(&self) -> Image {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        let sy = (y + dy).clamp(0, h - 1) as usize;
                        let px = self.get(sx, sy);
                        for c in 0..3 {
                            acc[c] += px[c] as u32;
                        }
                    }
                }
                out.set(x as usize, y as usize, acc.map(|v| ((v + 4) / 9) as u8));
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        bytes
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("PPM: {msg}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?,
            );
        }
        if fields[0] != "P6" {
            return Err(bad(&format!("expected magic P6, found {:?}", fields[0])));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(&format!("bad {what} {s:?}")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        if num(fields[3], "maxval")? != 255 {
            return Err(bad("only 8-bit images (maxval 255) are supported"));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero image extent"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad(&format!(
                "raster holds {} bytes, expected {need}",
                bytes.len().saturating_sub(pos)
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_and_header_comments() {
        let mut img = Image::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 13) as u8;
        }
        assert_eq!(Image::from_ppm(&img.to_ppm()).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(Image::from_ppm(&commented).unwrap(), img);
        assert!(Image::from_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let mut img = Image::new(2, 1);
        img.set(1, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::new(4, 4);
        img.data.fill(77);
        assert_eq!(img.box_blur(), img);
    }
}
