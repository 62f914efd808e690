//! Rotation math: the 6D code, Gram-Schmidt recovery, geodesic distance,
//! label perturbation and ZYX Euler angles.

use qface_numerics::{Graph, Real, Result as NResult, RngStream, Var};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Norm below which a Gram-Schmidt column counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Clamp margin keeping `acos` differentiable in the training loss.
pub const GEODESIC_EPS: f64 = 1e-7;

/// A proper rotation matrix (orthonormal, det +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationLabel {
    r: Mat3,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// Largest entry of `|R^T R - I|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = matmul3(&transpose3(r), r);
    let mut e: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            e = e.max((rtr[i][j] - IDENTITY[i][j]).abs());
        }
    }
    e
}

/// Recovers a rotation from its first two columns (`code[0..3]`, `code[3..6]`).
pub fn rot6d_to_matrix(code: &[f64; 6]) -> Result<RotationLabel> {
    let a1 = [code[0], code[1], code[2]];
    let a2 = [code[3], code[4], code[5]];
    let n1 = dot(&a1, &a1).sqrt();
    if !(n1 >= DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation(format!("first column norm {n1:e}")));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let p = dot(&b1, &a2);
    let u = [a2[0] - p * b1[0], a2[1] - p * b1[1], a2[2] - p * b1[2]];
    let n2 = dot(&u, &u).sqrt();
    if !(n2 >= DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation(format!("second column collinear (residual norm {n2:e})")));
    }
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let b3 = cross(&b1, &b2);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        r[i][0] = b1[i];
        r[i][1] = b2[i];
        r[i][2] = b3[i];
    }
    Ok(RotationLabel { r })
}

impl RotationLabel {
    pub fn identity() -> Self {
        RotationLabel { r: IDENTITY }
    }

    /// Validates the rotation invariants within `1e-6`.
    pub fn new(r: Mat3) -> Result<Self> {
        let e = orthonormality_error(&r);
        let d = det(&r);
        if e > 1e-6 || (d - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateRotation(format!("not a rotation: |RtR-I|={e:e}, det={d}")));
        }
        Ok(RotationLabel { r })
    }

    /// `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        RotationLabel {
            r: [
                [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                [-sp, cp * sr, cp * cr],
            ],
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.r
    }

    /// First two columns, flattened column by column.
    pub fn to_6d(&self) -> [f64; 6] {
        let r = &self.r;
        [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
    }

    /// All three columns flattened column by column (graph layout).
    pub fn to_col_major(&self) -> [f64; 9] {
        let r = &self.r;
        [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1], r[0][2], r[1][2], r[2][2]]
    }

    pub fn from_col_major(v: &[f64]) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for c in 0..3 {
            for i in 0..3 {
                r[i][c] = v[3 * c + i];
            }
        }
        r
    }

    /// `(yaw, pitch, roll)` in the ZYX convention, yaw in `(-pi, pi]`,
    /// pitch in `[-pi/2, pi/2]`.
    pub fn to_euler_zyx(&self) -> (f64, f64, f64) {
        let r = &self.r;
        let pitch = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let yaw = r[1][0].atan2(r[0][0]);
        let roll = r[2][1].atan2(r[2][2]);
        (yaw, pitch, roll)
    }
}

/// Angular distance on SO(3). Only rounding error is clamped away here; the
/// graph loss additionally keeps [`GEODESIC_EPS`] from the ends.
pub fn geodesic(a: &RotationLabel, b: &RotationLabel) -> f64 {
    let mut tr = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            tr += a.r[i][j] * b.r[i][j];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Adds i.i.d. `N(0, std^2)` noise to every entry, then re-orthonormalizes
/// through the first two columns.
pub fn perturb_rotation(r: &RotationLabel, rng: &mut RngStream, std: f64) -> Result<RotationLabel> {
    if std == 0.0 {
        return Ok(*r);
    }
    let mut m = r.r;
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v += std * rng.normal();
        }
    }
    let code = [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]];
    rot6d_to_matrix(&code)
}

/// Signed angle difference wrapped to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// Differentiable Gram-Schmidt: `[B, 6]` codes to `[B, 9]` column-major matrices.
pub fn rot6d_graph<T: Real>(g: &mut Graph<T>, code: Var) -> NResult<Var> {
    let b = g.shape(code)[0];
    let a1 = g.slice(code, 1, 0..3)?;
    let a2 = g.slice(code, 1, 3..6)?;
    let b1 = g.normalize(a1)?;
    let prod = g.mul(b1, a2)?;
    let d = g.sum(prod, 1)?;
    let d = g.reshape(d, vec![b, 1])?;
    let proj = g.mul_col(b1, d)?;
    let u = g.sub(a2, proj)?;
    let b2 = g.normalize(u)?;
    let b3 = g.cross(b1, b2)?;
    g.concat(&[b1, b2, b3], 1)
}

/// Mean geodesic distance between `[B, 9]` column-major rotation batches.
pub fn geodesic_graph<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> NResult<Var> {
    let prod = g.mul(pred, target)?;
    let tr = g.sum(prod, 1)?;
    let c = g.affine(tr, T::lit(0.5), T::lit(-0.5))?;
    let c = g.clamp(c, T::lit(-1.0 + GEODESIC_EPS), T::lit(1.0 - GEODESIC_EPS));
    let ang = g.acos(c);
    Ok(g.mean_all(ang))
}

#[cfg(test)]
mod tests {
    use super::*;
    use qface_numerics::{Purpose, Tensor};
    use std::f64::consts::PI;

    #[test]
    fn canonical_code_is_identity() {
        let r = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r.matrix(), &IDENTITY);
    }

    #[test]
    fn degenerate_codes_rejected() {
        assert!(rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).is_err());
    }

    #[test]
    fn geodesic_cases() {
        let i = RotationLabel::identity();
        assert!(geodesic(&i, &i) < 1e-3);
        let flip = RotationLabel::new([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!((geodesic(&i, &flip) - PI).abs() < 1e-12);
        let a = RotationLabel::from_euler_zyx(0.3, -0.2, 0.1);
        let b = RotationLabel::from_euler_zyx(-0.1, 0.4, 0.2);
        assert_eq!(geodesic(&a, &b), geodesic(&b, &a));
    }

    #[test]
    fn euler_round_trip() {
        for &(y, p, r) in &[(0.3, -0.2, 0.1), (-0.5, 0.5, -0.5), (0.0, 0.0, 0.0)] {
            let (y2, p2, r2) = RotationLabel::from_euler_zyx(y, p, r).to_euler_zyx();
            assert!((y - y2).abs() < 1e-12 && (p - p2).abs() < 1e-12 && (r - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_zero_std_is_identity_map() {
        let mut rng = RngStream::new(0, Purpose::LabelNoise);
        let r = RotationLabel::from_euler_zyx(0.2, 0.1, -0.3);
        assert_eq!(perturb_rotation(&r, &mut rng, 0.0).unwrap(), r);
        for _ in 0..100 {
            let p = perturb_rotation(&r, &mut rng, 0.01).unwrap();
            assert!(orthonormality_error(p.matrix()) < 1e-6);
            assert!((det(p.matrix()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_matches_scalar_path() {
        let code = [0.3, -1.2, 0.5, 0.7, 0.2, -0.4];
        let r = rot6d_to_matrix(&code).unwrap();
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::new([1, 6], code.to_vec()).unwrap());
        let m = rot6d_graph(&mut g, c).unwrap();
        for (a, b) in g.value(m).data().iter().zip(r.to_col_major()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.25) + 0.25).abs() < 1e-15);
    }
}
