//! Pinhole event-camera model.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole intrinsics plus sensor size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    /// DAVIS346-sized sensor.
    fn default() -> Self {
        Intrinsics {
            fx: 200.0,
            fy: 200.0,
            cx: 173.0,
            cy: 130.0,
            width: 346,
            height: 260,
        }
    }
}

impl Intrinsics {
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Normalized ray `[x, y, 1]` through a pixel.
    pub fn ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// Back-project a pixel at inverse depth `inv_depth`.
    pub fn unproject(&self, px: &Vector2<f64>, inv_depth: f64) -> Vector3<f64> {
        self.ray(px) / inv_depth
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}
