use std::path::Path;

use super::SceneError;

/// RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[[f32; 3]]) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count must match dimensions");
        Self {
            width,
            height,
            data: pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luma (Rec. 601 weights) per pixel.
    pub fn grayscale(&self) -> Vec<f32> {
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn read_png(path: &Path) -> Result<Self, SceneError> {
        if !path.exists() {
            return Err(SceneError::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|e| SceneError::ImageDecode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), SceneError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| SceneError::Malformed("image buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| SceneError::Io {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
