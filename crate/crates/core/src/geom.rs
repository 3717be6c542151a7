//! Small fixed-size vector helpers and the axis-aligned bounding box used by
//! every grid in the crate.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

/// Axis-aligned box; grids subdivide it into `res` equal voxels per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bbox {
    fn default() -> Self {
        Self::unit()
    }
}

impl Bbox {
    /// The `[-1, 1]^3` cube.
    pub const fn unit() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    /// Voxel edge length per axis at resolution `res`.
    pub fn voxel_size(&self, res: usize) -> Vec3 {
        scale(self.extent(), 1.0 / res as f64)
    }

    /// Center of voxel `(i, j, k)` at resolution `res`.
    #[inline]
    pub fn voxel_center(&self, res: usize, ijk: [usize; 3]) -> Vec3 {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let h = (self.max[a] - self.min[a]) / res as f64;
            p[a] = self.min[a] + (ijk[a] as f64 + 0.5) * h;
        }
        p
    }
}
