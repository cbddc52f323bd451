//! Seeded synthetic stand-in for the chest X-ray corpus.
//!
//! Every image is a dim background with a slowly varying illumination field,
//! a random global brightness offset and Gaussian noise. A soft disc at a
//! random position carries a zero-mean texture whose orientation encodes the
//! class: horizontal stripes (COVID-19), vertical stripes (Pneumonia) or a
//! checkerboard (No-Findings). Mean intensity carries no class signal.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::image_io::save_gray_png;
use super::manifest::{DatasetManifest, CLASS_CATALOG, TWO_CLASS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    /// 2 (COVID-19 vs No-Findings) or 3.
    pub classes: usize,
    pub image_side: usize,
    pub seed: u64,
}

pub fn class_names(classes: usize) -> Result<Vec<&'static str>> {
    match classes {
        2 => Ok(TWO_CLASS.to_vec()),
        3 => Ok(CLASS_CATALOG.to_vec()),
        n => Err(Error::Config(format!("synthetic classes must be 2 or 3, got {n}"))),
    }
}

#[derive(Clone, Copy)]
enum Texture {
    Horizontal,
    Vertical,
    Checker,
}

fn texture_for(name: &str) -> Texture {
    match name {
        "COVID-19" => Texture::Horizontal,
        "Pneumonia" => Texture::Vertical,
        _ => Texture::Checker,
    }
}

/// Renders one image as a row-major `side × side` plane in `[0, 1]`.
fn render(texture: Texture, side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = side as f64;
    let offset = rng.gen_range(-0.08..0.08);
    // illumination: two long-wavelength ramps
    let (fx, fy) = (rng.gen_range(0.3..0.9) / s, rng.gen_range(0.3..0.9) / s);
    let (px, py) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let cx = s * rng.gen_range(0.32..0.68);
    let cy = s * rng.gen_range(0.32..0.68);
    let radius = s * rng.gen_range(0.18..0.26);
    let soft = 0.03 * s;
    let amp = rng.gen_range(0.12..0.2);
    let period = s * rng.gen_range(0.1..0.15);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let w = 2.0 * PI / period;

    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let field = 0.05 * ((2.0 * PI * fx * xf + px).sin() + (2.0 * PI * fy * yf + py).sin());
            let dist = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
            let mask = 1.0 / (1.0 + ((dist - radius) / soft).exp());
            let tex = match texture {
                Texture::Horizontal => (w * yf + phase).sin(),
                Texture::Vertical => (w * xf + phase).sin(),
                Texture::Checker => 2.0 * (w * xf + phase).sin() * (w * yf + phase).sin(),
            };
            let v = 0.35 + offset + field + amp * mask * tex + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Writes `images/<label>_<index>.png` files and `manifest.csv` under `out`.
/// Each image has its own random stream, so output does not depend on the
/// order of generation.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.n_per_class == 0 {
        return Err(Error::Config("empty class: n_per_class must be at least 1".into()));
    }
    if cfg.image_side < 8 {
        return Err(Error::Config(format!("image side {} is too small", cfg.image_side)));
    }
    let names = class_names(cfg.classes)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..names.len())
        .flat_map(|c| (0..cfg.n_per_class).map(move |i| (c, i)))
        .collect();
    let pairs = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((c * cfg.n_per_class + i) as u64);
            let plane = render(texture_for(names[c]), cfg.image_side, &mut rng);
            let path = img_dir.join(format!("{c}_{i:05}.png"));
            save_gray_png(&path, &plane, cfg.image_side, cfg.image_side)?;
            Ok((path, names[c].to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::from_pairs(pairs)?;
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}
