use std::path::Path;

use image::imageops::FilterType;
use image::{ColorType, GrayImage, RgbImage};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Network input: `[3, side, side]` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

fn ingest_err(path: &Path, detail: impl ToString) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Decodes an 8-bit grayscale or RGB image, resizes it bilinearly to
/// `side × side`, replicates grayscale to three channels and scales to `[0, 1]`.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| ingest_err(path, e))?
        .with_guessed_format()
        .map_err(|e| ingest_err(path, e))?
        .decode()
        .map_err(|e| ingest_err(path, e))?;
    let s = side as u32;
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    let plane = (side * side) as usize;
    let mut data = vec![0f32; 3 * plane];
    if gray {
        let mut g = img.to_luma8();
        if g.dimensions() != (s, s) {
            g = image::imageops::resize(&g, s, s, FilterType::Triangle);
        }
        for (i, p) in g.pixels().enumerate() {
            let v = p.0[0] as f32 / 255.0;
            data[i] = v;
            data[plane + i] = v;
            data[2 * plane + i] = v;
        }
    } else {
        let mut rgb = img.to_rgb8();
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
        }
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, side, side], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[side, side]` plane of `[0, 1]` values as 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, values: &[f32], width: usize, height: usize) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([to_u8(values[y as usize * width + x as usize])])
    });
    img.save(path).map_err(|e| ingest_err(path, e))
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| ingest_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_gray_rgb_is_scaled_without_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        RgbImage::from_pixel(256, 256, image::Rgb([128, 128, 128]))
            .save(&p)
            .unwrap();
        let t = load_image(&p, 256).unwrap();
        assert_eq!(t.shape(), &[3, 256, 256]);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn large_input_is_resized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        GrayImage::from_fn(512, 512, |x, _| image::Luma([(x / 2) as u8]))
            .save(&p)
            .unwrap();
        assert_eq!(load_image(&p, 256).unwrap().shape(), &[3, 256, 256]);
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 30 + y) as u8]))
            .save(&p)
            .unwrap();
        let t = load_image(&p, 8).unwrap();
        let d = t.data();
        assert_eq!(&d[0..64], &d[64..128]);
        assert_eq!(&d[0..64], &d[128..192]);
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNG garbage").unwrap();
        let err = load_image(&p, 8).unwrap_err();
        assert!(err.to_string().contains("bad.png"));
    }
}
