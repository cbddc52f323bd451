use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, ModelSpec, LEAKY_ALPHA};
use crate::autodiff::{BatchMoments, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Running-statistics momentum: `running = (1 - m)·running + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;
/// Added to the variance before the square root in batch-norm.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Stateless,
    Conv {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    /// `weight` is `[in, units]`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    /// Whether batch-norm running statistics have seen a training batch.
    pub running_stats_updated: bool,
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let gain = (2.0 / (1.0 + LEAKY_ALPHA * LEAKY_ALPHA)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded Kaiming-uniform (fan-in) weights, zero biases, unit batch-norm
    /// scale and zero shift, running statistics at mean 0 / variance 1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .zip(shapes)
            .map(|(layer, ps)| match layer {
                LayerSpec::Conv2d { .. } => {
                    let w = &ps[0];
                    let fan_in = w[1] * w[2] * w[3];
                    LayerParams::Conv {
                        weight: kaiming_uniform(w, fan_in, &mut rng),
                        bias: ps.get(1).map(|b| Tensor::zeros(b)),
                    }
                }
                LayerSpec::Batchnorm => LayerParams::BatchNorm {
                    gamma: Tensor::ones(&ps[0]),
                    beta: Tensor::zeros(&ps[1]),
                    running_mean: Tensor::zeros(&ps[0]),
                    running_var: Tensor::ones(&ps[0]),
                },
                LayerSpec::Linear { .. } => LayerParams::Linear {
                    weight: kaiming_uniform(&ps[0], ps[0][0], &mut rng),
                    bias: Tensor::zeros(&ps[1]),
                },
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(Self {
            layers,
            running_stats_updated: false,
        })
    }

    /// Every stored tensor under a stable name, including running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, lp) in self.layers.iter().enumerate() {
            match lp {
                LayerParams::Stateless => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), b));
                    }
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                    out.push((format!("layer{i}.running_mean"), running_mean));
                    out.push((format!("layer{i}.running_var"), running_var));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
            }
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, lp) in self.layers.iter_mut().enumerate() {
            match lp {
                LayerParams::Stateless => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), b));
                    }
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                    out.push((format!("layer{i}.running_mean"), running_mean));
                    out.push((format!("layer{i}.running_var"), running_var));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
            }
        }
        out
    }

    /// Trainable tensors in optimizer order (running statistics excluded).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for lp in self.layers.iter_mut() {
            match lp {
                LayerParams::Stateless => {}
                LayerParams::Conv { weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
            }
        }
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(n, _)| n)
            .collect()
    }

    /// Records every trainable tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::Stateless => BoundLayer::Stateless,
                LayerParams::Conv { weight, bias } => BoundLayer::Conv {
                    weight: tape.leaf(weight.clone(), requires_grad),
                    bias: bias.as_ref().map(|b| tape.leaf(b.clone(), requires_grad)),
                },
                LayerParams::BatchNorm { gamma, beta, .. } => BoundLayer::BatchNorm {
                    gamma: tape.leaf(gamma.clone(), requires_grad),
                    beta: tape.leaf(beta.clone(), requires_grad),
                },
                LayerParams::Linear { weight, bias } => BoundLayer::Linear {
                    weight: tape.leaf(weight.clone(), requires_grad),
                    bias: tape.leaf(bias.clone(), requires_grad),
                },
            })
            .collect();
        BoundParams { layers }
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn apply_moments(&mut self, moments: &[(usize, BatchMoments<T>)], momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (idx, mo) in moments {
            let Some(LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            }) = self.layers.get_mut(*idx)
            else {
                return Err(Error::contract(
                    "apply_moments",
                    format!("layer {idx} is not a batch-norm layer"),
                ));
            };
            for (r, &b) in running_mean.data_mut().iter_mut().zip(&mo.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in running_var.data_mut().iter_mut().zip(&mo.var) {
                *r = keep * *r + m * b;
            }
        }
        if !moments.is_empty() {
            self.running_stats_updated = true;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

#[derive(Debug, Clone)]
pub enum BoundLayer {
    Stateless,
    Conv { weight: Var, bias: Option<Var> },
    BatchNorm { gamma: Var, beta: Var },
    Linear { weight: Var, bias: Var },
}

/// Tape handles for a [`ModelParams`], one entry per layer.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<BoundLayer>,
}

impl BoundParams {
    /// Handles in the same order as [`ModelParams::trainable_mut`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for bl in &self.layers {
            match *bl {
                BoundLayer::Stateless => {}
                BoundLayer::Conv { weight, bias } => {
                    out.push(weight);
                    out.extend(bias);
                }
                BoundLayer::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                BoundLayer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
            }
        }
        out
    }
}
