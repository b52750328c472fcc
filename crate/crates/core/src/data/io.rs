use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use super::DataError;
use crate::tensor::ImageTensor;

/// `round(255·v)` with halves rounded up, after clamping to `[0, 1]`.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Snaps every value to the nearest 8-bit level.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = to_u8(*v) as f64 / 255.0);
    out
}

fn image_err(path: &Path, reason: impl ToString) -> DataError {
    DataError::Image {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Reads an image file as `channels` (1 = grayscale, 3 = RGB) values in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<ImageTensor, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let img = ImageReader::open(path)
        .map_err(|e| image_err(path, e))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Ok(ImageTensor::new(1, h, w, data)?)
        }
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            Ok(ImageTensor::new(3, h, w, data)?)
        }
        other => Err(image_err(path, format!("unsupported channel count {other}"))),
    }
}

/// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let (c, h, w) = img.shape();
    let result = match c {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
            GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer matches dimensions")
                .save_with_format(path, image::ImageFormat::Png)
        }
        3 => {
            let mut buf = vec![0u8; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    buf[3 * i + ch] = to_u8(img.plane(ch)[i]);
                }
            }
            RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer matches dimensions")
                .save_with_format(path, image::ImageFormat::Png)
        }
        other => return Err(image_err(path, format!("cannot encode {other} channels as PNG"))),
    };
    result.map_err(|e| image_err(path, e))
}
