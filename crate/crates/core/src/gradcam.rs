//! Gradient-weighted class activation maps and the mirror-consistency experiment.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::hflip;
use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams, ModelSpec, Mode};

/// Which layer output the map is computed from; `None` is the final conv.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamConfig {
    pub target_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Row-major, `height × width`, in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    pub layer: usize,
}

/// Unnormalized map from activations and gradients, both `[C, h, w]`:
/// `ReLU(Σ_c mean(grad_c) · map_c)`.
pub fn gradcam_from_maps(maps: &[f64], grads: &[f64], channels: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let plane = h * w;
    if maps.len() != channels * plane || grads.len() != maps.len() {
        return Err(Error::dim(
            "gradcam",
            format!(
                "maps {} and grads {} values for [{channels}, {h}, {w}]",
                maps.len(),
                grads.len()
            ),
        ));
    }
    let mut cam = vec![0f64; plane];
    for c in 0..channels {
        let g = &grads[c * plane..(c + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        for (o, &a) in cam.iter_mut().zip(&maps[c * plane..(c + 1) * plane]) {
            *o += weight * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(cam)
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_max(values: &mut [f64]) {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Grad-CAM of `class_id`'s logit for one `[3, side, side]` image, upsampled to the input size.
pub fn gradcam(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    class_id: usize,
    cfg: &CamConfig,
) -> Result<Heatmap> {
    let side = spec.image_side;
    if image.shape() != [spec.input_channels, side, side] {
        return Err(Error::dim(
            "gradcam",
            format!("image shape {:?}, expected [{}, {side}, {side}]", image.shape(), spec.input_channels),
        ));
    }
    if class_id >= spec.num_classes {
        return Err(Error::Config(format!(
            "class {class_id} out of range for {} classes",
            spec.num_classes
        )));
    }
    let layer = match cfg.target_layer {
        Some(l) => l,
        None => spec
            .last_conv_output_index()
            .ok_or_else(|| Error::Config("model has no convolutional layer".into()))?,
    };
    if layer >= spec.layers.len() {
        return Err(Error::Config(format!("target layer {layer} does not exist")));
    }

    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let input = tape.constant(image.reshape(&[1, spec.input_channels, side, side])?);
    let out = forward(spec, params, &bound, &mut tape, input, Mode::Eval)?;
    let target = out.layer_outputs[layer];
    let shape = tape.shape(target).to_vec();
    let &[_, c, h, w] = shape.as_slice() else {
        return Err(Error::Config(format!(
            "target layer {layer} ({}) has no spatial extent: output {shape:?}",
            spec.layers[layer].name()
        )));
    };
    let picked = tape.gather_rows(out.logits, &[class_id])?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let maps: Vec<f64> = tape.value(target).data().iter().map(|&v| v as f64).collect();
    let grads: Vec<f64> = match tape.grad(target) {
        Some(g) => g.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; maps.len()],
    };
    let raw = gradcam_from_maps(&maps, &grads, c, h, w)?;
    let mut values = upsample_bilinear(&raw, h, w, side, side);
    normalize_max(&mut values);
    Ok(Heatmap {
        values,
        height: side,
        width: side,
        class_id,
        layer,
    })
}

const fn build_colormap() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        // blue -> green over 0..=85, green -> yellow over 85..=170, yellow -> red over 170..=255
        t[i] = if i <= 85 {
            let g = (i * 255 + 42) / 85;
            [0, g as u8, (255 - g) as u8]
        } else if i <= 170 {
            let r = ((i - 85) * 255 + 42) / 85;
            [r as u8, 255, 0]
        } else {
            let g = 255 - ((i - 170) * 255 + 42) / 85;
            [255, g as u8, 0]
        };
        i += 1;
    }
    t
}

/// Blue, green, yellow, red; index 0 is pure blue.
pub const COLORMAP: [[u8; 3]; 256] = build_colormap();

pub fn colorize(v: f64) -> [u8; 3] {
    COLORMAP[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// `(1 − α)·gray + α·colormap(heat)` per pixel. The image's first channel
/// is used as the grayscale base.
pub fn overlay(image: &Tensor<f32>, heatmap: &Heatmap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let s = image.shape();
    if s.len() != 3 || s[1] != heatmap.height || s[2] != heatmap.width {
        return Err(Error::dim(
            "overlay",
            format!(
                "image {s:?} vs heatmap {}x{}",
                heatmap.height, heatmap.width
            ),
        ));
    }
    let w = heatmap.width;
    let gray = &image.data()[..heatmap.height * w];
    Ok(RgbImage::from_fn(w as u32, heatmap.height as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let base = gray[i].clamp(0.0, 1.0) as f64 * 255.0;
        let col = colorize(heatmap.values[i]);
        image::Rgb(col.map(|c| ((1.0 - alpha) * base + alpha * c as f64).round() as u8))
    }))
}

/// Heatmap as an 8-bit grayscale plane.
pub fn heatmap_gray(h: &Heatmap) -> Vec<f32> {
    h.values.iter().map(|&v| v as f32).collect()
}

fn mirror(values: &[f64], w: usize) -> Vec<f64> {
    values.chunks(w).flat_map(|r| r.iter().rev().cloned()).collect()
}

/// Mass-weighted centre `(row, col)` in pixel coordinates; a zero map sits at the image centre.
pub fn centroid(values: &[f64], h: usize, w: usize) -> (f64, f64) {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        cy += v * (i / w) as f64;
        cx += v * (i % w) as f64;
    }
    (cy / total, cx / total)
}

/// Fraction of the map's mass inside the central box spanning the middle half of each axis.
pub fn central_mass(values: &[f64], h: usize, w: usize) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = values
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let (y, x) = (i / w, i % w);
            (h / 4..h - h / 4).contains(&y) && (w / 4..w - w / 4).contains(&x)
        })
        .map(|(_, v)| v)
        .sum();
    inside / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipPair {
    pub class_id: usize,
    pub original: Heatmap,
    /// Map of the mirrored input, in mirrored coordinates.
    pub flipped: Heatmap,
    /// Distance in pixels between the original centroid and that of the
    /// flipped map mirrored back.
    pub centroid_displacement: f64,
    /// Mean absolute difference between the original and mirrored-back maps.
    pub l1_gap: f64,
    pub central_mass_original: f64,
    pub central_mass_flipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub pairs: Vec<FlipPair>,
    pub mean_displacement: f64,
    pub mean_l1_gap: f64,
}

/// Compares each image's map with the map of its mirror image. The target
/// class is `class_id` when given, otherwise the model's prediction on the
/// original image.
pub fn flip_experiment(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    images: &[Tensor<f32>],
    class_id: Option<usize>,
    cfg: &CamConfig,
) -> Result<FlipSummary> {
    let mut pairs = Vec::with_capacity(images.len());
    for img in images {
        let class = match class_id {
            Some(c) => c,
            None => {
                let side = spec.image_side;
                let probs = crate::nn::predict_proba(spec, params, img.reshape(&[1, 3, side, side])?)?;
                crate::metrics::confidence_and_correctness(&probs, &[0]).0[0]
            }
        };
        let original = gradcam(spec, params, img, class, cfg)?;
        let flipped = gradcam(spec, params, &hflip(img), class, cfg)?;
        let (h, w) = (original.height, original.width);
        let back = mirror(&flipped.values, w);
        let (ay, ax) = centroid(&original.values, h, w);
        let (by, bx) = centroid(&back, h, w);
        let l1_gap = original
            .values
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (h * w) as f64;
        pairs.push(FlipPair {
            class_id: class,
            centroid_displacement: ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt(),
            l1_gap,
            central_mass_original: central_mass(&original.values, h, w),
            central_mass_flipped: central_mass(&flipped.values, h, w),
            original,
            flipped,
        });
    }
    let n = pairs.len().max(1) as f64;
    Ok(FlipSummary {
        mean_displacement: pairs.iter().map(|p| p.centroid_displacement).sum::<f64>() / n,
        mean_l1_gap: pairs.iter().map(|p| p.l1_gap).sum::<f64>() / n,
        pairs,
    })
}
