use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative slope of every leaky-ReLU in the network.
pub const LEAKY_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Batchnorm,
    LeakyRelu {
        alpha: f64,
    },
    Maxpool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        units: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

/// Input resolution and channel-width scaling of a build.
///
/// `FULL` is the 256-pixel network; `DESK` keeps the layer pattern but uses
/// 64-pixel inputs and a quarter of the channel widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub image_side: usize,
    pub width_divisor: usize,
}

impl Profile {
    pub const FULL: Profile = Profile {
        image_side: 256,
        width_divisor: 1,
    };
    pub const DESK: Profile = Profile {
        image_side: 64,
        width_divisor: 4,
    };
}

impl Default for Profile {
    fn default() -> Self {
        Profile::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub image_side: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub os_k: Option<usize>,
}

/// Per-sample output extent of a layer.
pub type LayerShape = Vec<usize>;

fn conv(out_channels: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        out_channels,
        kernel,
        stride: 1,
        pad: 1,
        bias: false,
    }
}

fn push_block(layers: &mut Vec<LayerSpec>, out_channels: usize, kernel: usize) {
    layers.push(conv(out_channels, kernel));
    layers.push(LayerSpec::Batchnorm);
    layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_ALPHA });
}

fn push_triple(layers: &mut Vec<LayerSpec>, wide: usize, narrow: usize) {
    push_block(layers, wide, 3);
    push_block(layers, narrow, 1);
    push_block(layers, wide, 3);
}

fn pool() -> LayerSpec {
    LayerSpec::Maxpool {
        window: 2,
        stride: 2,
    }
}

/// Full-size DarkCovidNet: 256×256×3 inputs, 13×13 final feature maps.
pub fn build_darkcovidnet(num_classes: usize, os_k: Option<usize>) -> Result<ModelSpec> {
    ModelSpec::darkcovidnet(num_classes, os_k, Profile::FULL)
}

impl ModelSpec {
    /// DarkCovidNet layer pattern. Every conv is zero-padded by one pixel
    /// (so 1×1 bottlenecks grow the maps by two), pooling follows convs 1, 2,
    /// 5, 8 and 11, and the last conv carries a bias and has `os_k` output
    /// channels when the OS variant is requested, `num_classes` otherwise.
    pub fn darkcovidnet(num_classes: usize, os_k: Option<usize>, profile: Profile) -> Result<Self> {
        if !(2..=3).contains(&num_classes) {
            return Err(Error::contract(
                "build_darkcovidnet",
                format!("num_classes must be 2 or 3, got {num_classes}"),
            ));
        }
        if os_k == Some(0) {
            return Err(Error::Config("OS partition count k must be positive".into()));
        }
        let div = profile.width_divisor;
        if div == 0 || 8 % div != 0 {
            return Err(Error::Config(format!(
                "width divisor {div} must divide the narrowest width 8"
            )));
        }
        let w = |c: usize| c / div;
        let mut layers = Vec::new();
        push_block(&mut layers, w(8), 3);
        layers.push(pool());
        push_block(&mut layers, w(16), 3);
        layers.push(pool());
        push_triple(&mut layers, w(32), w(16));
        layers.push(pool());
        push_triple(&mut layers, w(64), w(32));
        layers.push(pool());
        push_triple(&mut layers, w(128), w(64));
        layers.push(pool());
        push_triple(&mut layers, w(256), w(128));
        push_block(&mut layers, w(128), 1);
        push_block(&mut layers, w(256), 3);
        layers.push(LayerSpec::Conv2d {
            out_channels: os_k.unwrap_or(num_classes),
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        });
        layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_ALPHA });
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear { units: num_classes });

        let spec = ModelSpec {
            input_channels: 3,
            image_side: profile.image_side,
            layers,
            num_classes,
            os_k,
        };
        spec.layer_shapes()?;
        Ok(spec)
    }

    /// Output shape of every layer for a single sample, validating the stack.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut cur = vec![self.input_channels, self.image_side, self.image_side];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::dim(&format!("layer {i} ({})", layer.name()), detail);
            cur = match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let [_, h, w] = cur[..] else {
                        return Err(bad(format!("expected [C,H,W] input, got {cur:?}")));
                    };
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    if stride == 0 || hp < kernel || wp < kernel || (hp - kernel) % stride != 0 {
                        return Err(bad(format!("non-integral output for {h}x{w}")));
                    }
                    vec![
                        out_channels,
                        (hp - kernel) / stride + 1,
                        (wp - kernel) / stride + 1,
                    ]
                }
                LayerSpec::Batchnorm | LayerSpec::LeakyRelu { .. } => cur,
                LayerSpec::Maxpool { window, stride } => {
                    let [c, h, w] = cur[..] else {
                        return Err(bad(format!("expected [C,H,W] input, got {cur:?}")));
                    };
                    if h < window || w < window {
                        return Err(bad(format!("window {window} larger than {h}x{w}")));
                    }
                    vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Linear { units } => {
                    if cur.len() != 1 {
                        return Err(bad(format!("linear expects flat input, got {cur:?}")));
                    }
                    vec![units]
                }
            };
            out.push(cur.clone());
        }
        match out.last() {
            Some(s) if s == &[self.num_classes] => Ok(out),
            other => Err(Error::dim(
                "model spec",
                format!("final output {other:?} does not match {} classes", self.num_classes),
            )),
        }
    }

    pub fn flatten_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Flatten))
    }

    /// Length of the flatten activation the OS penalty partitions.
    pub fn flatten_len(&self) -> Result<usize> {
        let idx = self
            .flatten_index()
            .ok_or_else(|| Error::Config("model has no flatten layer".into()))?;
        Ok(self.layer_shapes()?[idx][0])
    }

    /// Index of the layer whose output feeds the flatten: the activated maps
    /// of the final convolution.
    pub fn last_conv_output_index(&self) -> Option<usize> {
        self.flatten_index().and_then(|i| i.checked_sub(1))
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Maxpool { .. }))
            .count()
    }

    /// Weight (plus bias) element count of each convolution, in order.
    pub fn conv_param_counts(&self) -> Result<Vec<usize>> {
        let mut channels = self.input_channels;
        let mut counts = Vec::new();
        for layer in &self.layers {
            if let LayerSpec::Conv2d {
                out_channels,
                kernel,
                bias,
                ..
            } = *layer
            {
                counts.push(out_channels * channels * kernel * kernel + if bias { out_channels } else { 0 });
                channels = out_channels;
            }
        }
        Ok(counts)
    }

    /// Shapes of the trainable tensors of each layer, in parameter order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let shapes = self.layer_shapes()?;
        let mut prev = vec![self.input_channels, self.image_side, self.image_side];
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            out.push(match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let mut v = vec![vec![out_channels, prev[0], kernel, kernel]];
                    if bias {
                        v.push(vec![out_channels]);
                    }
                    v
                }
                LayerSpec::Batchnorm => vec![vec![prev[0]], vec![prev[0]]],
                LayerSpec::Linear { units } => vec![vec![prev[0], units], vec![units]],
                _ => vec![],
            });
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn trainable_param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .flatten()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}
