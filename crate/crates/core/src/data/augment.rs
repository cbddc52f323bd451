use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Maximum shift as a fraction of the image side.
    pub max_translate_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            max_translate_frac: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        if !(0.0..=0.25).contains(&self.max_translate_frac) {
            return Err(Error::Config(format!(
                "max_translate_frac {} outside [0, 0.25]",
                self.max_translate_frac
            )));
        }
        Ok(())
    }
}

/// Mirrors every `[.., H, W]` plane across its vertical axis.
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w = *t.shape().last().expect("tensor has a width axis");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Shifts every `[.., H, W]` plane by `(dy, dx)` pixels, filling with zeros.
pub fn translate<T: Scalar>(t: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    if dy == 0 && dx == 0 {
        return t.clone();
    }
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Tensor::zeros(s);
    let src = t.data();
    let dst = out.data_mut();
    for (p, plane) in src.chunks(h * w).enumerate() {
        let base = p * h * w;
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                dst[base + y * w + x] = plane[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Random horizontal flip followed by a random integer translation drawn
/// uniformly from `±floor(max_translate_frac · side)` on each axis.
pub fn augment<T: Scalar, R: Rng + ?Sized>(pixels: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<T> {
    let flip = rng.gen_bool(cfg.hflip_prob);
    let side = *pixels.shape().last().unwrap();
    let max = (cfg.max_translate_frac * side as f64).floor() as isize;
    let dy = rng.gen_range(-max..=max);
    let dx = rng.gen_range(-max..=max);
    let base = if flip { hflip(pixels) } else { pixels.clone() };
    translate(&base, dy, dx)
}
