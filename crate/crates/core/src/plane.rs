//! Dense per-pixel planes (depth, feature, photo).

use crate::error::{Error, Result};

/// Row-major `height × width × channels` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Plane {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "plane data has {} values, expected {}×{}×{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Plane {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear sample with texel centers at integer coordinates. Returns
    /// `None` outside `[0, w-1] × [0, h-1]`.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_into(u, v, &mut out).then_some(out)
    }

    /// Like [`Plane::bilinear`] but writes into `out`; returns false when
    /// the location is out of bounds.
    pub fn bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        if !(u.is_finite() && v.is_finite()) || self.width == 0 || self.height == 0 {
            return false;
        }
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if u < 0.0 || v < 0.0 || u > wmax || v > hmax {
            return false;
        }
        let x0 = (u.floor() as usize).min(self.width - 1);
        let y0 = (v.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = u - x0 as f64;
        let ty = v - y0 as f64;
        let (a, b, c, d) = (self.at(x0, y0), self.at(x1, y0), self.at(x0, y1), self.at(x1, y1));
        for (k, o) in out.iter_mut().enumerate() {
            let top = a[k] + tx * (b[k] - a[k]);
            let bot = c[k] + tx * (d[k] - c[k]);
            *o = top + ty * (bot - top);
        }
        true
    }
}

/// Single-channel depth in meters with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Plane,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels with non-finite or non-positive values are marked invalid.
    pub fn from_plane(depth: Plane) -> Result<Self> {
        if depth.channels != 1 {
            return Err(Error::invalid(format!(
                "depth plane must have one channel, got {}",
                depth.channels
            )));
        }
        let valid: Vec<bool> = depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let mut depth = depth;
        for (d, ok) in depth.data.iter_mut().zip(&valid) {
            if !*ok {
                *d = 0.0;
            }
        }
        Ok(DepthMap { depth, valid })
    }

    pub fn new(depth: Plane, valid: Vec<bool>) -> Result<Self> {
        if depth.channels != 1 || valid.len() != depth.pixel_count() {
            return Err(Error::invalid("depth map shape mismatch"));
        }
        Ok(DepthMap { depth, valid })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.depth.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.depth.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.depth.width + x;
        self.valid[i].then(|| self.depth.data[i])
    }

    /// Depth plane with invalid pixels written as 0 (the on-disk convention).
    pub fn to_plane(&self) -> Plane {
        let mut p = self.depth.clone();
        for (d, ok) in p.data.iter_mut().zip(&self.valid) {
            if !ok {
                *d = 0.0;
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_pixel_center_is_exact() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        let p = Plane::from_data(4, 3, 1, data).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(p.bilinear(x as f64, y as f64).unwrap()[0], p.at(x, y)[0]);
            }
        }
    }

    #[test]
    fn bilinear_midpoint_is_four_way_average() {
        let p = Plane::from_data(2, 2, 2, vec![1.0, 10.0, 2.0, 20.0, 4.0, 40.0, 8.0, 80.0]).unwrap();
        let s = p.bilinear(0.5, 0.5).unwrap();
        assert_eq!(s, vec![(1.0 + 2.0 + 4.0 + 8.0) / 4.0, 150.0 / 4.0]);
    }

    #[test]
    fn bilinear_out_of_bounds() {
        let p = Plane::zeros(3, 3, 1);
        assert!(p.bilinear(-0.01, 1.0).is_none());
        assert!(p.bilinear(2.01, 1.0).is_none());
        assert!(p.bilinear(1.0, f64::NAN).is_none());
        assert!(p.bilinear(2.0, 2.0).is_some());
    }

    #[test]
    fn depth_map_masks_non_positive() {
        let p = Plane::from_data(3, 1, 1, vec![1.0, 0.0, f64::NAN]).unwrap();
        let d = DepthMap::from_plane(p).unwrap();
        assert_eq!(d.valid, vec![true, false, false]);
        assert_eq!(d.get(0, 0), Some(1.0));
        assert_eq!(d.get(2, 0), None);
        assert!(d.depth.data.iter().all(|v| v.is_finite()));
    }
}
