//! Editing loss and the CE / Dice baselines, mean-reduced, with analytic
//! gradients with respect to the predicted probabilities.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, ScalarField};

pub const CLAMP_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: ScalarField,
}

/// Blended cross-entropy against a soft target `m`, mean over voxels.
/// Writes d(loss)/d(y_hat) into `grad`.
pub fn soft_ce_slice(y_hat: &[f64], m: impl Fn(usize) -> f64, grad: &mut [f64]) -> f64 {
    let n = y_hat.len() as f64;
    let mut total = 0.0;
    for (idx, (&p, g)) in y_hat.iter().zip(grad.iter_mut()).enumerate() {
        let t = m(idx);
        let pc = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        total += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        *g = if p < CLAMP_EPS || p > 1.0 - CLAMP_EPS {
            0.0
        } else {
            (-t / pc + (1.0 - t) / (1.0 - pc)) / n
        };
    }
    total / n
}

/// Editing loss on raw slices: `a` weighs the ground truth, `1 - a` the
/// initial segmentation.
pub fn editing_loss_slice(y_hat: &[f64], y: &[u8], y_init: &[u8], a: &[f64], grad: &mut [f64]) -> f64 {
    soft_ce_slice(
        y_hat,
        |i| a[i] * f64::from(y[i]) + (1.0 - a[i]) * f64::from(y_init[i]),
        grad,
    )
}

pub fn ce_loss_slice(y_hat: &[f64], target: &[u8], grad: &mut [f64]) -> f64 {
    soft_ce_slice(y_hat, |i| f64::from(target[i]), grad)
}

pub fn dice_loss_slice(y_hat: &[f64], target: &[u8], grad: &mut [f64]) -> f64 {
    let (mut inter, mut sq, mut t_sum) = (0.0, 0.0, 0.0);
    for (&p, &t) in y_hat.iter().zip(target) {
        let t = f64::from(t);
        inter += p * t;
        sq += p * p;
        t_sum += t * t;
    }
    let denom = sq + t_sum + DICE_SMOOTH;
    for ((g, &p), &t) in grad.iter_mut().zip(y_hat).zip(target) {
        *g = -2.0 * (f64::from(t) * denom - inter * 2.0 * p) / (denom * denom);
    }
    1.0 - 2.0 * inter / denom
}

fn check_inputs(y_hat: &ScalarField, masks: &[&BinaryMask]) -> Result<()> {
    for m in masks {
        y_hat.meta().check_same(m.meta())?;
    }
    y_hat.check_probability("prediction")
}

fn finish(y_hat: &ScalarField, f: impl FnOnce(&mut [f64]) -> f64) -> Result<LossValue> {
    let mut grad = ScalarField::constant(*y_hat.meta(), 0.0);
    let value = f(grad.values_mut());
    if !value.is_finite() {
        return Err(Error::OutOfRange(format!("non-finite loss {value}")));
    }
    Ok(LossValue { value, grad })
}

pub fn editing_loss(y_hat: &ScalarField, y: &BinaryMask, y_init: &BinaryMask, a: &ScalarField) -> Result<LossValue> {
    check_inputs(y_hat, &[y, y_init])?;
    y_hat.meta().check_same(a.meta())?;
    a.check_probability("vicinity map")?;
    finish(y_hat, |g| {
        editing_loss_slice(y_hat.values(), y.as_bytes(), y_init.as_bytes(), a.values(), g)
    })
}

pub fn ce_loss(y_hat: &ScalarField, target: &BinaryMask) -> Result<LossValue> {
    check_inputs(y_hat, &[target])?;
    finish(y_hat, |g| ce_loss_slice(y_hat.values(), target.as_bytes(), g))
}

pub fn dice_loss(y_hat: &ScalarField, target: &BinaryMask) -> Result<LossValue> {
    check_inputs(y_hat, &[target])?;
    finish(y_hat, |g| dice_loss_slice(y_hat.values(), target.as_bytes(), g))
}
