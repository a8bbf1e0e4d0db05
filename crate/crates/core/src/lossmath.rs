//! Soft Dice loss, its quadratic variant, the analytic gradient and the
//! binary Dice score.
//!
//! All sums run over every voxel of the volume and accumulate in `f64`
//! whatever the storage type of the inputs.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: prediction {pred:?} vs truth {truth:?}")]
    Shape { pred: Vec<usize>, truth: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },
    #[error("prediction value {value} at {index} outside [0, 1]")]
    Prediction { index: usize, value: f64 },
    #[error("mask value {value} at {index} is not 0 or 1")]
    Binary { index: usize, value: f64 },
    #[error("smoothing epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

/// Additive smoothing term of the loss. Defaults to 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingEpsilon(f64);

impl SmoothingEpsilon {
    pub fn new(eps: f64) -> Result<Self, LossError> {
        if eps > 0.0 && eps.is_finite() {
            Ok(Self(eps))
        } else {
            Err(LossError::InvalidEpsilon(eps))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for SmoothingEpsilon {
    fn default() -> Self {
        Self(0.1)
    }
}

/// A validated prediction / ground-truth pair of identical shape.
#[derive(Debug, Clone, Copy)]
pub struct VolumePair<'a, T> {
    pred: &'a [T],
    truth: &'a [T],
    shape: &'a [usize],
}

fn check_shapes<T>(a: &[T], a_shape: &[usize], b: &[T], b_shape: &[usize]) -> Result<(), LossError> {
    if a_shape != b_shape {
        return Err(LossError::Shape {
            pred: a_shape.to_vec(),
            truth: b_shape.to_vec(),
        });
    }
    let expected: usize = a_shape.iter().product();
    for len in [a.len(), b.len()] {
        if len != expected {
            return Err(LossError::Length {
                len,
                shape: a_shape.to_vec(),
            });
        }
    }
    Ok(())
}

fn check_binary<T: Copy + Into<f64>>(mask: &[T]) -> Result<(), LossError> {
    match mask
        .iter()
        .map(|&v| v.into())
        .enumerate()
        .find(|&(_, v)| v != 0.0 && v != 1.0)
    {
        Some((index, value)) => Err(LossError::Binary { index, value }),
        None => Ok(()),
    }
}

impl<'a, T: Copy + Into<f64>> VolumePair<'a, T> {
    pub fn new(
        pred: &'a [T],
        pred_shape: &'a [usize],
        truth: &'a [T],
        truth_shape: &[usize],
    ) -> Result<Self, LossError> {
        check_shapes(pred, pred_shape, truth, truth_shape)?;
        if let Some((index, value)) = pred
            .iter()
            .map(|&v| v.into())
            .enumerate()
            .find(|&(_, v)| !(0.0..=1.0).contains(&v))
        {
            return Err(LossError::Prediction { index, value });
        }
        check_binary(truth)?;
        Ok(Self {
            pred,
            truth,
            shape: pred_shape,
        })
    }

    pub fn pred(&self) -> &'a [T] {
        self.pred
    }

    pub fn truth(&self) -> &'a [T] {
        self.truth
    }

    pub fn shape(&self) -> &'a [usize] {
        self.shape
    }
}

/// Σŷy, Σŷ, Σy and Σŷ² in one pass.
#[derive(Debug, Clone, Copy, Default)]
struct DiceSums {
    inter: f64,
    pred: f64,
    truth: f64,
    pred_sq: f64,
}

fn dice_sums<T: Copy + Into<f64>>(pred: &[T], truth: &[T]) -> DiceSums {
    pred.iter().zip(truth).fold(DiceSums::default(), |mut s, (&p, &t)| {
        let (p, t): (f64, f64) = (p.into(), t.into());
        s.inter += p * t;
        s.pred += p;
        s.truth += t;
        s.pred_sq += p * p;
        s
    })
}

/// `1 - (2Σŷy + ε) / (Σŷ + Σy + ε)` without any input validation.
/// Exposed for finite-difference probes that step outside `[0, 1]`.
pub fn dice_loss_raw<T: Copy + Into<f64>>(pred: &[T], truth: &[T], eps: f64) -> f64 {
    let s = dice_sums(pred, truth);
    1.0 - (2.0 * s.inter + eps) / (s.pred + s.truth + eps)
}

pub fn dice_loss<T: Copy + Into<f64>>(pair: &VolumePair<'_, T>, eps: SmoothingEpsilon) -> f64 {
    dice_loss_raw(pair.pred, pair.truth, eps.0)
}

/// ∂L/∂ŷ for every element: `-(2·y_k·B − A) / B²` with
/// `A = 2Σŷy + ε` and `B = Σŷ + Σy + ε`.
pub fn dice_loss_grad<T: Copy + Into<f64>>(pair: &VolumePair<'_, T>, eps: SmoothingEpsilon) -> Vec<f64> {
    let s = dice_sums(pair.pred, pair.truth);
    let a = 2.0 * s.inter + eps.0;
    let b = s.pred + s.truth + eps.0;
    let b2 = b * b;
    pair.truth
        .iter()
        .map(|&t| {
            let t: f64 = t.into();
            -(2.0 * t * b - a) / b2
        })
        .collect()
}

/// Squared-denominator variant: `1 - (2Σŷy + ε) / (Σŷ² + Σy² + ε)`.
pub fn quadratic_dice_loss<T: Copy + Into<f64>>(pair: &VolumePair<'_, T>, eps: SmoothingEpsilon) -> f64 {
    let s = dice_sums(pair.pred, pair.truth);
    // truth is binary, so Σy² = Σy
    1.0 - (2.0 * s.inter + eps.0) / (s.pred_sq + s.truth + eps.0)
}

/// Thresholds probabilities into a {0,1} mask (`p >= threshold` is foreground).
pub fn binarize<T: Copy + Into<f64>>(pred: &[T], threshold: f64) -> Vec<u8> {
    pred.iter().map(|&p| u8::from(p.into() >= threshold)).collect()
}

/// Set-overlap Dice score `2|A∩B| / (|A| + |B|)`; 1.0 when both are empty.
pub fn dice_score<T: Copy + Into<f64>>(
    pred_binary: &[T],
    pred_shape: &[usize],
    truth: &[T],
    truth_shape: &[usize],
) -> Result<f64, LossError> {
    check_shapes(pred_binary, pred_shape, truth, truth_shape)?;
    check_binary(pred_binary)?;
    check_binary(truth)?;
    let (mut both, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred_binary.iter().zip(truth) {
        let (p, t) = (p.into() == 1.0, t.into() == 1.0);
        both += u64::from(p && t);
        a += u64::from(p);
        b += u64::from(t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Central-difference estimate of ∂L/∂ŷ with step `h`.
pub fn finite_difference_grad(pred: &[f64], truth: &[f64], eps: f64, h: f64) -> Vec<f64> {
    let mut probe = pred.to_vec();
    (0..pred.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = dice_loss_raw(&probe, truth, eps);
            probe[k] = orig - h;
            let down = dice_loss_raw(&probe, truth, eps);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst-case deviation between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_abs: f64,
    pub max_rel: f64,
}

pub fn grad_check(pair: &VolumePair<'_, f64>, eps: SmoothingEpsilon, h: f64) -> GradCheck {
    let analytic = dice_loss_grad(pair, eps);
    let numeric = finite_difference_grad(pair.pred, pair.truth, eps.0, h);
    analytic
        .iter()
        .zip(&numeric)
        .fold(GradCheck::default(), |acc, (&a, &n)| {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
            GradCheck {
                max_abs: acc.max_abs.max(abs),
                max_rel: acc.max_rel.max(rel),
            }
        })
}
