//! Per-task training losses on graph logits.

use qface_numerics::{Graph, NumericsError, Real, Result, RngStream, Tensor, Var};

/// Smoothed-L1 threshold, in age units.
pub const AGE_BETA: f64 = 1.0;

/// Standard deviation of the training-time age label noise.
pub const AGE_NOISE_STD: f64 = 1.0;

/// Mean over the batch of `-log softmax(logits)[label]`; `logits` is `[B, K]`.
pub fn ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = *g.shape(logits).last().unwrap_or(&0);
    if k < 2 {
        return Err(NumericsError::Shape { op: "ce_loss", detail: format!("need at least 2 classes, got {k}") });
    }
    let last = g.shape(logits).len() - 1;
    let lp = g.log_softmax(logits, last)?;
    let picked = g.pick(lp, labels.to_vec())?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -T::one()))
}

/// Mean over unmasked entries of the logit-space binary cross-entropy.
///
/// `targets` and `mask` are flat `B * K` vectors. With every entry masked the
/// loss is a constant zero.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[bool], mask: Option<&[bool]>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let n = g.value(logits).len();
    if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(NumericsError::Shape { op: "bce_loss", detail: format!("{n} logits vs {} targets", targets.len()) });
    }
    let keep: Vec<T> = (0..n).map(|i| if mask.is_none_or(|m| m[i]) { T::one() } else { T::zero() }).collect();
    let count = keep.iter().filter(|v| **v != T::zero()).count();
    if count == 0 {
        let z = g.scale(logits, T::zero());
        return Ok(g.sum_all(z));
    }
    let y = g.constant(Tensor::new(shape.clone(), targets.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?);
    let w = g.constant(Tensor::new(shape, keep)?);
    // softplus(z) - z*y  ==  -[y log s(z) + (1-y) log(1-s(z))]
    let sp = g.softplus(logits);
    let zy = g.mul(logits, y)?;
    let per = g.sub(sp, zy)?;
    let per = g.mul(per, w)?;
    let s = g.sum_all(per);
    Ok(g.scale(s, T::one() / T::from_usize(count).unwrap()))
}

/// Age target: the label itself in evaluation, label plus `N(0, 1)` in training.
pub fn age_target(age: f64, rng: Option<&mut RngStream>) -> f64 {
    match rng {
        Some(r) => age + AGE_NOISE_STD * r.normal(),
        None => age,
    }
}

/// Smoothed-L1 loss between `[B]` predictions and (optionally noised) ages.
pub fn age_loss<T: Real>(g: &mut Graph<T>, pred: Var, ages: &[f64], mut rng: Option<&mut RngStream>) -> Result<Var> {
    let targets: Vec<T> = ages.iter().map(|&a| T::lit(age_target(a, rng.as_deref_mut()))).collect();
    let t = g.constant(Tensor::new(g.shape(pred).to_vec(), targets)?);
    g.smooth_l1(pred, t, T::lit(AGE_BETA))
}
