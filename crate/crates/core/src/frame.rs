//! Camera frames.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("image decode failed for {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image encode failed for {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Height × width × RGB intensities in `[0, 1]`, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FrameImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, FrameError> {
        if height == 0 || width == 0 {
            return Err(FrameError::Invalid(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(FrameError::Invalid(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FrameError::Invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major copy (`3 × H × W`), the layout convolution backbones expect.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FrameError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| FrameError::Invalid("buffer size mismatch".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| FrameError::Encode {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self, FrameError> {
        let img = image::open(path)
            .map_err(|source| FrameError::Decode {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrame {
    /// Capture time in seconds on the shared stream clock.
    pub t: f64,
    pub frame_id: u64,
    pub image: FrameImage,
}
