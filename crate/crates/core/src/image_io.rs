use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// An 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Engine value in [-1, 1] to an 8-bit level.
pub fn to_level(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

pub fn from_level(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    /// Converts a 1×3×H×W tensor in [-1, 1]; values outside are clamped.
    pub fn from_tensor(t: &Tensor4<f32>) -> Result<Self> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::Dimension(format!("expected a 1x3xHxW image tensor, got {s}")));
        }
        let mut pixels = Vec::with_capacity(3 * s.plane());
        for i in 0..s.plane() {
            for c in 0..3 {
                pixels.push(to_level(t.plane(0, c)[i]));
            }
        }
        Ok(ImageBuffer {
            width: s.width,
            height: s.height,
            pixels,
        })
    }

    pub fn to_tensor(&self) -> Tensor4<f32> {
        Tensor4::from_fn(Shape4::new(1, 3, self.height, self.width), |_, c, y, x| {
            from_level(self.pixels[(y * self.width + x) * 3 + c])
        })
    }

    /// Largest centered crop whose sides are multiples of `k`.
    pub fn center_crop_to_multiple(&self, k: usize) -> Result<ImageBuffer> {
        let (h, w) = (self.height / k * k, self.width / k * k);
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} is smaller than the generator's upsampling factor {k}",
                self.width, self.height
            )));
        }
        let (y0, x0) = ((self.height - h) / 2, (self.width - w) / 2);
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Reads an 8-bit PNG. Grayscale is expanded to RGB; alpha is dropped
    /// with a warning.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        if reader.format() != Some(ImageFormat::Png) {
            return Err(Error::Format(format!("{}: not a PNG file", path.display())));
        }
        let img = reader
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let rgb = match img.color() {
            ColorType::Rgb8 | ColorType::L8 => img.to_rgb8(),
            ColorType::Rgba8 | ColorType::La8 => {
                warn!("{}: dropping alpha channel", path.display());
                img.to_rgb8()
            }
            other => {
                return Err(Error::Format(format!(
                    "{}: unsupported pixel layout {other:?}; expected 8-bit RGB or grayscale",
                    path.display()
                )))
            }
        };
        Ok(ImageBuffer {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            pixels: rgb.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Dimension("pixel buffer does not match image size".into()))?;
        DynamicImage::ImageRgb8(img)
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format(other.to_string()),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_round_trip_error_bound() {
        for i in 0..=2000 {
            let v = -1.0 + i as f32 / 1000.0;
            assert!((from_level(to_level(v)) - v).abs() <= 1.0 / 255.0 + 1e-6);
        }
        assert_eq!(to_level(-1.0), 0);
        assert_eq!(to_level(1.0), 255);
    }

    #[test]
    fn center_crop() {
        let mut img = ImageBuffer::new(7, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i / 3) as u8;
        }
        let c = img.center_crop_to_multiple(4).unwrap();
        assert_eq!((c.width, c.height), (4, 4));
        // rows 0..4, columns 1..5
        assert_eq!(c.pixels[0], 1);
        assert_eq!(c.pixels[3 * 4], 8);
    }
}
