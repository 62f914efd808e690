//! Evaluation metrics. All take aligned, non-empty inputs.

use crate::error::{Error, Result};
use crate::tasks::rotation::{wrap_angle, RotationLabel};

fn non_empty(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Metric("empty input".into()));
    }
    if n != m {
        return Err(Error::Metric(format!("length mismatch: {n} vs {m}")));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    // 0/0 := 0 for both precision and recall.
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn top1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    non_empty(preds.len(), labels.len())?;
    Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

/// One-vs-rest F1 per class.
pub fn per_class_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    non_empty(preds.len(), labels.len())?;
    let mut tp = vec![0; k];
    let mut fp = vec![0; k];
    let mut fneg = vec![0; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Metric(format!("class index out of range for {k} classes")));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    Ok((0..k).map(|c| f1(tp[c], fp[c], fneg[c])).collect())
}

pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let f = per_class_f1(preds, labels, k)?;
    Ok(f.iter().sum::<f64>() / k as f64)
}

/// F1 per label column of `[n, k]` row-major binary matrices.
pub fn per_label_f1(preds: &[bool], targets: &[bool], k: usize) -> Result<Vec<f64>> {
    non_empty(preds.len(), targets.len())?;
    if k == 0 || !preds.len().is_multiple_of(k) {
        return Err(Error::Metric(format!("{} entries do not form rows of {k}", preds.len())));
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (p, t) in preds.iter().skip(c).step_by(k).zip(targets.iter().skip(c).step_by(k)) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        out.push(f1(tp, fp, fneg));
    }
    Ok(out)
}

pub fn mean_accuracy(preds: &[bool], targets: &[bool]) -> Result<f64> {
    non_empty(preds.len(), targets.len())?;
    Ok(preds.iter().zip(targets).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    non_empty(preds.len(), targets.len())?;
    Ok(preds.iter().zip(targets).map(|(a, b)| (a - b).abs()).sum::<f64>() / preds.len() as f64)
}

/// Concordance correlation coefficient (population moments).
pub fn ccc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    non_empty(preds.len(), targets.len())?;
    let n = preds.len() as f64;
    let mx = preds.iter().sum::<f64>() / n;
    let my = targets.iter().sum::<f64>() / n;
    let vx = preds.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
    let vy = targets.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
    let cov = preds.iter().zip(targets).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let den = vx + vy + (mx - my) * (mx - my);
    Ok(if den == 0.0 { 0.0 } else { 2.0 * cov / den })
}

/// Mean absolute error over yaw, pitch and roll (ZYX), in radians.
pub fn euler_mae(preds: &[RotationLabel], targets: &[RotationLabel]) -> Result<f64> {
    non_empty(preds.len(), targets.len())?;
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let (a, b) = (p.to_euler_zyx(), t.to_euler_zyx());
        s += wrap_angle(a.0 - b.0).abs() + wrap_angle(a.1 - b.1).abs() + wrap_angle(a.2 - b.2).abs();
    }
    Ok(s / (3.0 * preds.len() as f64))
}

/// Mean CCC over the three Euler angles.
pub fn euler_ccc(preds: &[RotationLabel], targets: &[RotationLabel]) -> Result<f64> {
    non_empty(preds.len(), targets.len())?;
    let pe: Vec<(f64, f64, f64)> = preds.iter().map(RotationLabel::to_euler_zyx).collect();
    let te: Vec<(f64, f64, f64)> = targets.iter().map(RotationLabel::to_euler_zyx).collect();
    let pick = |v: &[(f64, f64, f64)], i: usize| -> Vec<f64> {
        v.iter().map(|a| [a.0, a.1, a.2][i]).collect()
    };
    let mut s = 0.0;
    for i in 0..3 {
        s += ccc(&pick(&pe, i), &pick(&te, i))?;
    }
    Ok(s / 3.0)
}

/// Arithmetic mean of per-task scores in `[0, 1]`, reported on a 0-100 scale.
pub fn avg_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Metric("empty input".into()));
    }
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_matrix_f1() {
        // rows = truth: [[2,1],[0,3]]
        let labels = [0, 0, 0, 1, 1, 1];
        let preds = [0, 0, 1, 1, 1, 1];
        let f = per_class_f1(&preds, &labels, 2).unwrap();
        assert!((f[0] - 0.8).abs() < 1e-12);
        assert!((f[1] - 6.0 / 7.0).abs() < 1e-12);
        assert!((macro_f1(&preds, &labels, 2).unwrap() - 0.828_571_428_571_428_6).abs() < 1e-12);
    }

    #[test]
    fn ccc_identity_and_symmetry() {
        let x = [1.0, 2.0, 4.0, 3.5];
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = [0.5, 2.5, 3.0, 4.0];
        assert_eq!(ccc(&x, &y).unwrap(), ccc(&y, &x).unwrap());
    }

    #[test]
    fn avg_cases() {
        assert_eq!(avg_score(&[1.0, 1.0, 1.0]).unwrap(), 100.0);
        assert_eq!(avg_score(&[0.42]).unwrap(), 42.0);
        let reference = [0.7358, 0.7036, 0.8796, 0.9353, 0.9641];
        assert!((avg_score(&reference).unwrap() - 84.37).abs() < 0.005);
    }

    #[test]
    fn euler_mae_of_self_is_zero() {
        let r = vec![RotationLabel::from_euler_zyx(0.1, 0.2, 0.3); 3];
        assert_eq!(euler_mae(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(top1(&[], &[]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert!(ccc(&[], &[]).is_err());
    }
}
