//! Feature Gaussians and layered scenes.

use crate::error::{Error, Result};
use crate::geometry::{covariance3d, precision3d, quat_to_rotmat, Mat3, Quat, Vec3};

/// Default feature width for the full-size model.
pub const DEFAULT_FEATURE_DIM: usize = 512;
/// Feature width used by desk-scale fixtures.
pub const DESK_FEATURE_DIM: usize = 16;

/// One anisotropic blob carrying a text-aligned feature instead of color.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGaussian {
    pub mean: Vec3,
    /// Per-axis standard deviation in meters (linear, not log).
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    pub feature: Vec<f64>,
}

impl FeatureGaussian {
    /// Validates and builds a Gaussian; the quaternion is renormalized.
    pub fn new(
        mean: Vec3,
        scale: Vec3,
        rotation: [f64; 4],
        opacity: f64,
        feature: Vec<f64>,
    ) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian mean is not finite"));
        }
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid(format!(
                "gaussian scale must be positive, got {:?}",
                scale.as_slice()
            )));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian feature is not finite"));
        }
        Ok(FeatureGaussian {
            mean,
            scale,
            rotation: Quat::normalized(rotation)?,
            opacity,
            feature,
        })
    }

    /// Axis-aligned isotropic blob.
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, feature: Vec<f64>) -> Result<Self> {
        Self::new(mean, Vec3::repeat(scale), Quat::IDENTITY.0, opacity, feature)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rotmat(self.rotation.0).expect("stored quaternion is unit")
    }

    pub fn covariance(&self) -> Mat3 {
        covariance3d(&self.scale, self.rotation.0).expect("stored gaussian is valid")
    }

    pub fn precision(&self) -> Mat3 {
        precision3d(&self.scale, self.rotation.0).expect("stored gaussian is valid")
    }

    /// Checks every invariant; used after decoding and loading.
    pub fn check(&self) -> Result<()> {
        FeatureGaussian::new(
            self.mean,
            self.scale,
            self.rotation.0,
            self.opacity,
            self.feature.clone(),
        )?;
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("gaussian quaternion is not unit"));
        }
        Ok(())
    }
}

/// Ordered Gaussian list partitioned into progressive layers.
///
/// `layer_offsets[b]` is the cumulative count after layer `b`. A layer that
/// added nothing repeats the previous offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<FeatureGaussian>,
    pub layer_offsets: Vec<usize>,
    pub feature_dim: usize,
}

impl GaussianScene {
    pub fn empty(feature_dim: usize) -> Self {
        GaussianScene {
            gaussians: Vec::new(),
            layer_offsets: Vec::new(),
            feature_dim,
        }
    }

    /// A scene with all Gaussians in a single layer.
    pub fn single_layer(gaussians: Vec<FeatureGaussian>, feature_dim: usize) -> Result<Self> {
        let n = gaussians.len();
        Self::new(gaussians, vec![n], feature_dim)
    }

    pub fn new(
        gaussians: Vec<FeatureGaussian>,
        layer_offsets: Vec<usize>,
        feature_dim: usize,
    ) -> Result<Self> {
        let scene = GaussianScene {
            gaussians,
            layer_offsets,
            feature_dim,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("layer offsets must be non-decreasing"));
        }
        let last = self.layer_offsets.last().copied().unwrap_or(0);
        if last != self.gaussians.len() {
            return Err(Error::invalid(format!(
                "last layer offset {last} does not match gaussian count {}",
                self.gaussians.len()
            )));
        }
        if let Some(g) = self.gaussians.iter().find(|g| g.feature.len() != self.feature_dim) {
            return Err(Error::invalid(format!(
                "feature length {} differs from scene feature dim {}",
                g.feature.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_offsets.len()
    }

    /// Index range of layer `b`.
    pub fn layer_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = if b == 0 { 0 } else { self.layer_offsets[b - 1] };
        start..self.layer_offsets[b]
    }

    /// Count inherited by the newest layer (`x_{b-1}`).
    pub fn inherited_count(&self) -> usize {
        match self.layer_offsets.len() {
            0 | 1 => 0,
            n => self.layer_offsets[n - 2],
        }
    }
}
