//! Small RGB images and binary PPM (P6, 8-bit) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Height-major RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(dim_err(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_u8(v)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        pos += 1; // single whitespace after maxval
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, got {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        let body = bytes
            .get(pos..pos + w * h * 3)
            .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
        Image::new(w, h, body.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `[H, W, 3]` tensor scaled from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&v| T::c(v as f64 * 2.0 - 1.0)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Inverse of [`Image::to_signed_tensor`], clamping into `[0, 1]`.
    pub fn from_signed<T: Real>(width: usize, height: usize, values: &[T]) -> Result<Self> {
        Image::new(
            width,
            height,
            values
                .iter()
                .map(|v| ((v.f64() + 1.0) * 0.5).clamp(0.0, 1.0) as f32)
                .collect(),
        )
    }

    /// Sum of squared channel differences.
    pub fn sq_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum()
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_quantized_identity() {
        let img = Image::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let back = Image::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(&img.to_bytes()[..11], b"P6\n2 1\n255\n");
    }

    #[test]
    fn rejects_other_formats() {
        assert!(Image::from_bytes(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::from_bytes(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = Image::from_bytes(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80").unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 128.0 / 255.0]);
    }
}
