//! Image ingestion, augmentation, fold splitting and the synthetic generator.

pub mod augment;
pub mod folds;
pub mod image_io;
pub mod manifest;
pub mod synth;

pub use augment::{augment, hflip, translate, AugmentConfig};
pub use folds::{stratified_kfold, FoldSplit};
pub use image_io::{load_image, save_gray_png, save_rgb_png, ImageSample};
pub use manifest::{DatasetManifest, ManifestRecord, CLASS_CATALOG, TWO_CLASS};
pub use synth::{synth_generate, SynthConfig};

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Decoded manifest held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub side: usize,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    /// Decodes every record at `side × side`. Decoding runs in parallel; the
    /// sample order always matches the manifest.
    pub fn load(manifest: &DatasetManifest, side: usize) -> Result<Self> {
        let samples = manifest
            .records
            .par_iter()
            .map(|r| {
                Ok(ImageSample {
                    pixels: load_image(&r.path, side)?,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: manifest.classes.clone(),
            side,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the given samples into `[N, 3, side, side]`, augmenting each
    /// one in index order when `aug` is given.
    pub fn batch<R: Rng>(
        &self,
        indices: &[usize],
        aug: Option<(&AugmentConfig, &mut R)>,
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::contract("batch", "no indices"));
        }
        let per = 3 * self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut aug = aug;
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::contract("batch", format!("index {i} out of range for {} samples", self.len()))
            })?;
            match aug.as_mut() {
                Some((cfg, rng)) => data.extend_from_slice(augment(&s.pixels, cfg, *rng).data()),
                None => data.extend_from_slice(s.pixels.data()),
            }
            labels.push(s.label);
        }
        Ok((
            Tensor::new(vec![indices.len(), 3, self.side, self.side], data)?,
            labels,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(
            &SynthConfig {
                n_per_class: 3,
                classes: 3,
                image_side: 16,
                seed: 5,
            },
            dir.path(),
        )
        .unwrap();
        let ds = Dataset::load(&m, 16).unwrap();
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            ds.batch(&[4, 0, 7], Some((&cfg, &mut rng))).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.shape(), &[3, 3, 16, 16]);
        assert_eq!(la, vec![1, 0, 2]);
    }
}
