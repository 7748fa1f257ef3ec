//! Quaternion and covariance geometry.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Unit quaternion in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    /// Renormalizes `q`; zero or non-finite input is rejected.
    pub fn normalized(q: [f64; 4]) -> Result<Quat> {
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !n.is_finite() || n <= f64::EPSILON {
            return Err(Error::invalid(format!("quaternion {q:?} has no direction")));
        }
        Ok(Quat([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn neg(&self) -> Quat {
        Quat(self.0.map(|c| -c))
    }
}

/// Rotation matrix of a (w, x, y, z) quaternion. The input is renormalized.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Mat3> {
    let Quat([w, x, y, z]) = Quat::normalized(q)?;
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Σ = R S Sᵀ Rᵀ with S = diag(scale).
pub fn covariance3d(scale: &Vec3, q: [f64; 4]) -> Result<Mat3> {
    if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::invalid(format!(
            "scale must be positive, got {:?}",
            scale.as_slice()
        )));
    }
    let r = quat_to_rotmat(q)?;
    let m = r * Mat3::from_diagonal(scale);
    let cov = m * m.transpose();
    // exact symmetry
    Ok((cov + cov.transpose()) * 0.5)
}

/// Inverse covariance R S⁻² Rᵀ, computed without a general inversion.
pub fn precision3d(scale: &Vec3, q: [f64; 4]) -> Result<Mat3> {
    if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::invalid(format!(
            "scale must be positive, got {:?}",
            scale.as_slice()
        )));
    }
    let r = quat_to_rotmat(q)?;
    let inv = Vec3::new(1.0 / scale.x, 1.0 / scale.y, 1.0 / scale.z);
    let m = r * Mat3::from_diagonal(&inv);
    let p = m * m.transpose();
    Ok((p + p.transpose()) * 0.5)
}

/// Rigid transform mapping camera coordinates into the ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const ORTHO_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !err.is_finite() || err > Self::ORTHO_TOL || rotation.determinant() < 0.0 {
            return Err(Error::invalid(format!(
                "pose rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a row-major 3×4 `[R | t]`.
    pub fn from_rows(m: &[f64; 12]) -> Result<Self> {
        let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(r, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    /// Camera looking from `eye` towards `target`, with camera +y pointing
    /// away from `up` (image rows grow downwards).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let fwd = target - eye;
        if fwd.norm() <= f64::EPSILON {
            return Err(Error::invalid("look_at target coincides with eye"));
        }
        let z = fwd.normalize();
        let x = z.cross(&up);
        if x.norm() <= 1e-9 {
            return Err(Error::invalid("look_at up vector is parallel to the view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}
