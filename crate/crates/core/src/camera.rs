//! Pinhole cameras, projection and back-projection.

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::plane::{DepthMap, Plane};

/// Points at or in front of this camera-z are considered behind the camera.
pub const Z_NEAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("principal point is not finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    #[inline]
    pub fn project(&self, p_cam: &Vec3) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Camera-frame point at camera-z `depth` seen through pixel `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// One calibrated image: intrinsics, camera→ego pose and optional reference
/// planes.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    pub timestamp: i64,
    pub ref_depth: Option<DepthMap>,
    pub ref_feature: Option<Plane>,
    pub photo: Option<Plane>,
}

/// Result of projecting an ego-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    BehindCamera,
}

impl Projection {
    pub fn visible(self) -> Option<(f64, f64, f64)> {
        match self {
            Projection::Visible { u, v, z } => Some((u, v, z)),
            Projection::BehindCamera => None,
        }
    }
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera image must be non-empty"));
        }
        Ok(CameraView {
            intrinsics,
            pose,
            width,
            height,
            timestamp: 0,
            ref_depth: None,
            ref_feature: None,
            photo: None,
        })
    }

    pub fn with_timestamp(mut self, t: i64) -> Self {
        self.timestamp = t;
        self
    }

    /// Checks that attached planes match the image size.
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.ref_depth {
            if d.width() != self.width || d.height() != self.height {
                return Err(Error::invalid("reference depth size differs from camera size"));
            }
        }
        for (name, p) in [("feature", &self.ref_feature), ("photo", &self.photo)] {
            if let Some(p) = p {
                if p.width != self.width || p.height != self.height {
                    return Err(Error::invalid(format!(
                        "reference {name} size differs from camera size"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.pose.apply_inverse(p)
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }
}

/// Projects an ego-frame point into `cam`. Points with camera-z at or below
/// [`Z_NEAR`] are reported as [`Projection::BehindCamera`].
pub fn project_point(p: &Vec3, cam: &CameraView) -> Projection {
    let pc = cam.to_camera(p);
    if !(pc.z > Z_NEAR) {
        return Projection::BehindCamera;
    }
    let (u, v) = cam.intrinsics.project(&pc);
    Projection::Visible { u, v, z: pc.z }
}

/// One ego-frame point per valid depth pixel, in row-major pixel order.
pub fn backproject(cam: &CameraView, depth: &DepthMap) -> Vec<Vec3> {
    let mut out = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if let Some(d) = depth.get(x, y) {
                out.push(backproject_pixel(cam, x as f64, y as f64, d));
            }
        }
    }
    out
}

#[inline]
pub fn backproject_pixel(cam: &CameraView, u: f64, v: f64, depth: f64) -> Vec3 {
    cam.pose.apply(&cam.intrinsics.unproject(u, v, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use nalgebra::{Matrix3x4, Matrix4, Vector4};

    fn cam(pose: Pose) -> CameraView {
        CameraView::new(Intrinsics::new(500.0, 480.0, 32.0, 24.0).unwrap(), pose, 64, 48).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let c = cam(Pose::identity());
        let p = project_point(&Vec3::new(0.0, 0.0, 5.0), &c);
        assert_eq!(p, Projection::Visible { u: 32.0, v: 24.0, z: 5.0 });
    }

    #[test]
    fn camera_center_is_behind() {
        let pose = Pose::look_at(Vec3::new(1.0, 1.0, 1.0), Vec3::zeros(), Vec3::z()).unwrap();
        let c = cam(pose);
        assert_eq!(project_point(&c.center(), &c), Projection::BehindCamera);
        let behind = c.pose.apply(&Vec3::new(0.0, 0.0, -2.0));
        assert_eq!(project_point(&behind, &c), Projection::BehindCamera);
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let pose = Pose::look_at(
            Vec3::new(2.0, -3.0, 1.5),
            Vec3::new(10.0, 4.0, 0.0),
            Vec3::z(),
        )
        .unwrap();
        let c = cam(pose);
        // K · [I|0] · T⁻¹ in homogeneous coordinates
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
        let t_inv = t.try_inverse().unwrap();
        let k = Mat3::new(500.0, 0.0, 32.0, 0.0, 480.0, 24.0, 0.0, 0.0, 1.0);
        let proj = Matrix3x4::identity();
        for p in [
            Vec3::new(10.0, 4.0, 0.0),
            Vec3::new(8.0, 1.0, 2.0),
            Vec3::new(12.0, 6.0, -1.0),
        ] {
            let h = k * proj * t_inv * Vector4::new(p.x, p.y, p.z, 1.0);
            let (u, v, z) = project_point(&p, &c).visible().unwrap();
            assert!((u - h.x / h.z).abs() < 1e-9);
            assert!((v - h.y / h.z).abs() < 1e-9);
            assert!((z - h.z).abs() < 1e-9);
        }
    }

    #[test]
    fn backproject_principal_pixel() {
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::new(5.0, 0.0, 2.0), Vec3::z()).unwrap();
        let mut c = cam(pose);
        c.width = 64;
        let mut data = vec![0.0; 64 * 48];
        data[24 * 64 + 32] = 7.0;
        let d = DepthMap::from_plane(Plane::from_data(64, 48, 1, data).unwrap()).unwrap();
        let pts = backproject(&c, &d);
        assert_eq!(pts.len(), 1);
        assert!((pts[0] - pose.apply(&Vec3::new(0.0, 0.0, 7.0))).norm() < 1e-12);
        assert!((pts[0] - Vec3::new(7.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_all_invalid_is_empty() {
        let c = cam(Pose::identity());
        let d = DepthMap::from_plane(Plane::zeros(64, 48, 1)).unwrap();
        assert!(backproject(&c, &d).is_empty());
    }

    #[test]
    fn round_trip_residual_is_tiny() {
        let pose = Pose::look_at(Vec3::new(0.5, -1.0, 1.6), Vec3::new(6.0, 2.0, 0.3), Vec3::z()).unwrap();
        let c = CameraView::new(Intrinsics::new(3.1, 2.9, 1.6, 1.4).unwrap(), pose, 4, 4).unwrap();
        let depths: Vec<f64> = (0..16).map(|i| 1.0 + 0.731 * i as f64).collect();
        let d = DepthMap::from_plane(Plane::from_data(4, 4, 1, depths.clone()).unwrap()).unwrap();
        let pts = backproject(&c, &d);
        for (i, p) in pts.iter().enumerate() {
            let (u, v, z) = project_point(p, &c).visible().unwrap();
            assert!((u - (i % 4) as f64).abs() < 1e-4);
            assert!((v - (i / 4) as f64).abs() < 1e-4);
            assert!((z - depths[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }
}
