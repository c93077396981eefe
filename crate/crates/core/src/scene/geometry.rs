use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.fx) && ok(self.fy) && self.cx.is_finite() && self.cy.is_finite() {
            Ok(())
        } else {
            Err(Error::SingularIntrinsics { fx: self.fx, fy: self.fy })
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: Point3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Point in the camera frame, meters (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// `depth * K^-1 * (u, v, 1)`.
pub fn unproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Point3> {
    k.validate()?;
    if !(depth >= 0.0) {
        return Err(Error::invalid("depth", format!("{depth} is negative")));
    }
    Ok(Point3::new(
        depth * (u - k.cx) / k.fx,
        depth * (v - k.cy) / k.fy,
        depth,
    ))
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}
