//! Orthogonal-spheres regularizer and the combined training objective.
//!
//! A flatten activation of length `m` is cut into `k` contiguous blocks of
//! length `d = m / k`, stacked as the columns of `Z ∈ R^{d×k}`, and penalized
//! by `‖ZᵀZ − I_k‖²_F`. The training loss is `λ·CE + (1 − λ)·penalty`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight of the COVID-19 class relative to the others.
pub const COVID_CLASS_WEIGHT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsConfig {
    pub k: usize,
    pub lambda: f64,
    /// Empty means [`OsConfig::default_class_weights`].
    #[serde(default)]
    pub class_weights: Vec<f64>,
}

impl OsConfig {
    /// COVID-19 (class 0) weighted 4×, every other class 1×.
    pub fn default_class_weights(num_classes: usize) -> Vec<f64> {
        (0..num_classes)
            .map(|c| if c == 0 { COVID_CLASS_WEIGHT } else { 1.0 })
            .collect()
    }

    pub fn validate(&self, flatten_len: usize) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.k == 0 || flatten_len % self.k != 0 {
            return Err(Error::Config(format!(
                "k = {} does not divide flatten length m = {flatten_len}",
                self.k
            )));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda = {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `Z` as recorded on a tape: `[d, k]` for one sample, `[N, d, k]` for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMatrix {
    pub z: Var,
    pub d: usize,
    pub k: usize,
    pub batch: Option<usize>,
}

/// Column `j` of `Z` is `features[j·d .. (j+1)·d]`.
pub fn partition<T: Scalar>(tape: &mut Tape<T>, features: Var, k: usize) -> Result<FeatureMatrix> {
    let shape = tape.shape(features).to_vec();
    let (batch, m) = match shape.as_slice() {
        [m] => (None, *m),
        [n, m] => (Some(*n), *m),
        _ => {
            return Err(Error::dim(
                "partition",
                format!("expected [m] or [N, m] features, got {shape:?}"),
            ))
        }
    };
    if k == 0 || m % k != 0 {
        return Err(Error::Config(format!(
            "k = {k} does not divide flatten length m = {m}"
        )));
    }
    let d = m / k;
    let blocks = match batch {
        None => tape.reshape(features, &[k, d])?,
        Some(n) => tape.reshape(features, &[n, k, d])?,
    };
    let z = tape.transpose(blocks)?;
    Ok(FeatureMatrix { z, d, k, batch })
}

fn ensure_finite<T: Scalar>(tape: &Tape<T>, v: Var, op: &str) -> Result<Var> {
    if tape.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

/// `‖ZᵀZ − I‖²_F`, averaged over samples for a batched `Z`.
pub fn os_penalty<T: Scalar>(tape: &mut Tape<T>, fm: &FeatureMatrix) -> Result<Var> {
    let zt = tape.transpose(fm.z)?;
    let gram = tape.matmul(zt, fm.z)?;
    let eye = tape.constant(Tensor::eye(fm.k));
    let diff = tape.sub(gram, eye)?;
    let total = tape.frobenius_sq(diff);
    let out = match fm.batch {
        Some(n) => tape.scale(total, 1.0 / n as f64),
        None => total,
    };
    ensure_finite(tape, out, "os_penalty")
}

/// Mean over the batch of `w[y]·(−log softmax(logits)[y])`.
pub fn weighted_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let &[n, k] = shape.as_slice() else {
        return Err(Error::dim(
            "weighted_cross_entropy",
            format!("logits must be [N, K], got {shape:?}"),
        ));
    };
    if labels.len() != n {
        return Err(Error::dim(
            "weighted_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if class_weights.len() != k {
        return Err(Error::contract(
            "weighted_cross_entropy",
            format!("{} class weights for {k} classes", class_weights.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(
            "weighted_cross_entropy",
            format!("label {bad} outside 0..{k}"),
        ));
    }
    if class_weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::contract("weighted_cross_entropy", "weights must be positive"));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather_rows(logp, labels)?;
    let w: Vec<T> = labels.iter().map(|&y| T::from_f64(class_weights[y])).collect();
    let wv = tape.constant(Tensor::new(vec![n], w)?);
    let weighted = tape.mul(picked, wv)?;
    let s = tape.sum(weighted);
    let out = tape.scale(s, -1.0 / n as f64);
    ensure_finite(tape, out, "weighted_cross_entropy")
}

/// `λ·ce + (1 − λ)·os`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, ce: Var, os: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(ce, lambda);
    let b = tape.scale(os, 1.0 - lambda);
    let out = tape.add(a, b)?;
    ensure_finite(tape, out, "total_loss")
}
