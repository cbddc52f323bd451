use log::warn;

use super::params::{BoundLayer, BoundParams, LayerParams, ModelParams, BN_EPS};
use super::spec::{LayerSpec, ModelSpec};
use crate::autodiff::{BatchMoments, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardOutput<T> {
    /// `[N, num_classes]`
    pub logits: Var,
    /// `[N, m]`, the representation the OS penalty partitions.
    pub features: Var,
    /// `[N, C, h, w]`, activated maps of the final convolution.
    pub last_conv: Var,
    /// Output of every layer, aligned with `spec.layers`.
    pub layer_outputs: Vec<Var>,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub bn_moments: Vec<(usize, BatchMoments<T>)>,
}

fn at_layer(i: usize, layer: &LayerSpec, e: Error) -> Error {
    match e {
        Error::Dimension { op, detail } => Error::Dimension {
            op: format!("layer {i} ({}): {op}", layer.name()),
            detail,
        },
        other => other,
    }
}

/// Runs the network on `input` (`[N, C, side, side]`).
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    bound: &BoundParams,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let expect = [spec.input_channels, spec.image_side, spec.image_side];
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != expect {
        return Err(Error::dim(
            "forward",
            format!("input shape {shape:?}, expected [N, {}, {}, {}]", expect[0], expect[1], expect[2]),
        ));
    }
    if params.layers.len() != spec.layers.len() || bound.layers.len() != spec.layers.len() {
        return Err(Error::contract("forward", "parameters do not match model spec"));
    }
    if mode == Mode::Eval && !params.running_stats_updated {
        warn!("eval-mode forward before any training batch: batch-norm uses initial statistics");
    }
    let n = shape[0];
    let mut x = input;
    let mut outputs = Vec::with_capacity(spec.layers.len());
    let mut moments = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let wrap = |e| at_layer(i, layer, e);
        x = match (layer, &bound.layers[i]) {
            (LayerSpec::Conv2d { stride, pad, .. }, BoundLayer::Conv { weight, bias }) => {
                tape.conv2d(x, *weight, *bias, *stride, *pad).map_err(wrap)?
            }
            (LayerSpec::Batchnorm, BoundLayer::BatchNorm { gamma, beta }) => match mode {
                Mode::Train => {
                    let (y, m) = tape.batch_norm_train(x, *gamma, *beta, BN_EPS).map_err(wrap)?;
                    moments.push((i, m));
                    y
                }
                Mode::Eval => {
                    let LayerParams::BatchNorm {
                        running_mean,
                        running_var,
                        ..
                    } = &params.layers[i]
                    else {
                        return Err(Error::contract("forward", format!("layer {i} lacks batch-norm state")));
                    };
                    tape.batch_norm_eval(
                        x,
                        *gamma,
                        *beta,
                        running_mean.data(),
                        running_var.data(),
                        BN_EPS,
                    )
                    .map_err(wrap)?
                }
            },
            (LayerSpec::LeakyRelu { alpha }, _) => tape.leaky_relu(x, *alpha),
            (LayerSpec::Maxpool { window, stride }, _) => {
                tape.maxpool2d(x, *window, *stride).map_err(wrap)?
            }
            (LayerSpec::Flatten, _) => {
                let per: usize = tape.shape(x)[1..].iter().product();
                tape.reshape(x, &[n, per]).map_err(wrap)?
            }
            (LayerSpec::Linear { .. }, BoundLayer::Linear { weight, bias }) => {
                let y = tape.matmul(x, *weight).map_err(wrap)?;
                tape.add(y, *bias).map_err(wrap)?
            }
            _ => {
                return Err(Error::contract(
                    "forward",
                    format!("layer {i} ({}) has mismatched parameters", layer.name()),
                ))
            }
        };
        outputs.push(x);
    }
    let flat = spec
        .flatten_index()
        .ok_or_else(|| Error::Config("model has no flatten layer".into()))?;
    let last_conv = outputs[spec.last_conv_output_index().unwrap_or(flat)];
    Ok(ForwardOutput {
        logits: x,
        features: outputs[flat],
        last_conv,
        layer_outputs: outputs,
        bn_moments: moments,
    })
}

/// Eval-mode log class probabilities for a batch, no gradient tracking.
pub fn predict_log_proba(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    batch: crate::autodiff::Tensor<f32>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let input = tape.constant(batch);
    let out = forward(spec, params, &bound, &mut tape, input, Mode::Eval)?;
    let logp = tape.log_softmax(out.logits)?;
    Ok(tape
        .value(logp)
        .data()
        .chunks(spec.num_classes)
        .map(|row| row.iter().map(|&v| v as f64).collect())
        .collect())
}

/// Eval-mode class probabilities for a batch, no gradient tracking.
pub fn predict_proba(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    batch: crate::autodiff::Tensor<f32>,
) -> Result<Vec<Vec<f64>>> {
    Ok(predict_log_proba(spec, params, batch)?
        .into_iter()
        .map(|row| row.into_iter().map(f64::exp).collect())
        .collect())
}
