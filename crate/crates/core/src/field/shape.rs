//! Analytic signed-distance shapes used as ground truth and as the generating
//! surfaces for toy vecset latents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geom::{self, Vec3};
use crate::{Error, Result};

/// Minimum gap between any shape and the faces of `[-1, 1]^3`.
pub const BBOX_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere {
        radius: f64,
    },
    Box {
        half: Vec3,
    },
    /// Ring torus around the z axis.
    Torus {
        major: f64,
        minor: f64,
    },
    /// Disk of radius `radius` in the xy plane swept by a ball of radius
    /// `half_thickness` (a slab with a rounded rim), rotated by `tilt` radians
    /// about the x axis.
    ThinPlate {
        half_thickness: f64,
        radius: f64,
        tilt: f64,
    },
    /// Two spheres of radii `r1`, `r2` centred at `center -/+ offset * x`.
    Union2 {
        r1: f64,
        r2: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub center: Vec3,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, center: Vec3) -> Result<Self> {
        let spec = Self { kind, center };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sphere(radius: f64) -> Self {
        Self {
            kind: ShapeKind::Sphere { radius },
            center: [0.0; 3],
        }
    }

    pub fn cube(half: f64) -> Self {
        Self {
            kind: ShapeKind::Box { half: [half; 3] },
            center: [0.0; 3],
        }
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Self {
            kind: ShapeKind::Torus { major, minor },
            center: [0.0; 3],
        }
    }

    pub fn thin_plate(half_thickness: f64) -> Self {
        Self {
            kind: ShapeKind::ThinPlate {
                half_thickness,
                radius: 0.6,
                tilt: 0.0,
            },
            center: [0.0; 3],
        }
    }

    pub fn union2(r1: f64, r2: f64, offset: f64) -> Self {
        Self {
            kind: ShapeKind::Union2 { r1, r2, offset },
            center: [0.0; 3],
        }
    }

    pub fn with_center(mut self, center: Vec3) -> Self {
        self.center = center;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ShapeKind::Sphere { .. } => "sphere",
            ShapeKind::Box { .. } => "box",
            ShapeKind::Torus { .. } => "torus",
            ShapeKind::ThinPlate { .. } => "plate",
            ShapeKind::Union2 { .. } => "union2",
        }
    }

    fn params(&self) -> Vec<f64> {
        match self.kind {
            ShapeKind::Sphere { radius } => vec![radius],
            ShapeKind::Box { half } => half.to_vec(),
            ShapeKind::Torus { major, minor } => vec![major, minor],
            ShapeKind::ThinPlate {
                half_thickness,
                radius,
                ..
            } => vec![half_thickness, radius],
            ShapeKind::Union2 { r1, r2, offset } => vec![r1, r2, offset],
        }
    }

    /// Axis-aligned bounds of the solid.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let c = self.center;
        let (lo, hi) = match self.kind {
            ShapeKind::Sphere { radius } => ([-radius; 3], [radius; 3]),
            ShapeKind::Box { half } => (geom::scale(half, -1.0), half),
            ShapeKind::Torus { major, minor } => {
                let e = major + minor;
                ([-e, -e, -minor], [e, e, minor])
            }
            ShapeKind::ThinPlate {
                half_thickness,
                radius,
                tilt,
            } => {
                let (s, co) = tilt.sin_cos();
                let ex = radius + half_thickness;
                let ey = ex * co.abs() + half_thickness * s.abs();
                let ez = ex * s.abs() + half_thickness * co.abs();
                ([-ex, -ey, -ez], [ex, ey, ez])
            }
            ShapeKind::Union2 { r1, r2, offset } => (
                [(-offset - r1).min(offset - r2), -r1.max(r2), -r1.max(r2)],
                [(-offset + r1).max(offset + r2), r1.max(r2), r1.max(r2)],
            ),
        };
        (geom::add(c, lo), geom::add(c, hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidShape(format!(
                "{}: all parameters must be strictly positive",
                self
            )));
        }
        if let ShapeKind::Torus { major, minor } = self.kind {
            if minor >= major {
                return Err(Error::InvalidShape(format!(
                    "{self}: minor radius must be smaller than major radius"
                )));
            }
        }
        if let ShapeKind::ThinPlate { tilt, .. } = self.kind {
            if !tilt.is_finite() {
                return Err(Error::InvalidShape(format!("{self}: tilt must be finite")));
            }
        }
        let (lo, hi) = self.bounds();
        let limit = 1.0 - BBOX_MARGIN;
        if lo.iter().chain(hi.iter()).any(|v| v.abs() > limit + 1e-12) {
            return Err(Error::InvalidShape(format!(
                "{self}: does not fit inside [-{limit}, {limit}]^3"
            )));
        }
        Ok(())
    }

    /// Signed distance, negative inside.
    ///
    /// Exact for sphere, box, plate and torus. For `union2` the min of the two
    /// member distances is exact outside and a lower bound on the magnitude
    /// inside the overlap.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let p = geom::sub(p, self.center);
        match self.kind {
            ShapeKind::Sphere { radius } => geom::norm(p) - radius,
            ShapeKind::Box { half } => box_sdf(p, half),
            ShapeKind::Torus { major, minor } => {
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let a = rho - major;
                (a * a + p[2] * p[2]).sqrt() - minor
            }
            ShapeKind::ThinPlate {
                half_thickness,
                radius,
                tilt,
            } => geom::norm(plate_offset(rotate_x(p, -tilt), radius)) - half_thickness,
            ShapeKind::Union2 { r1, r2, offset } => {
                let a = geom::norm(geom::sub(p, [-offset, 0.0, 0.0])) - r1;
                let b = geom::norm(geom::sub(p, [offset, 0.0, 0.0])) - r2;
                a.min(b)
            }
        }
    }

    /// Unit gradient of [`sdf`](Self::sdf); `None` where it is undefined
    /// (sphere center, torus core circle, ...).
    pub fn gradient(&self, p: Vec3) -> Option<Vec3> {
        let p = geom::sub(p, self.center);
        match self.kind {
            ShapeKind::Sphere { .. } => geom::normalize(p),
            ShapeKind::Box { half } => box_gradient(p, half),
            ShapeKind::Torus { major, .. } => {
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if rho == 0.0 {
                    return None;
                }
                let a = rho - major;
                geom::normalize([a * p[0] / rho, a * p[1] / rho, p[2]])
            }
            ShapeKind::ThinPlate { radius, tilt, .. } => {
                geom::normalize(plate_offset(rotate_x(p, -tilt), radius)).map(|g| rotate_x(g, tilt))
            }
            ShapeKind::Union2 { r1, r2, offset } => {
                let pa = geom::sub(p, [-offset, 0.0, 0.0]);
                let pb = geom::sub(p, [offset, 0.0, 0.0]);
                if geom::norm(pa) - r1 <= geom::norm(pb) - r2 {
                    geom::normalize(pa)
                } else {
                    geom::normalize(pb)
                }
            }
        }
    }
}

fn rotate_x(p: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

/// Vector from the nearest point of the disk `rho <= a, z = 0` to `p`.
fn plate_offset(p: Vec3, a: f64) -> Vec3 {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if rho <= a {
        return [0.0, 0.0, p[2]];
    }
    let k = (rho - a) / rho;
    [k * p[0], k * p[1], p[2]]
}

fn box_sdf(p: Vec3, half: Vec3) -> f64 {
    let q = [
        p[0].abs() - half[0],
        p[1].abs() - half[1],
        p[2].abs() - half[2],
    ];
    let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    outside + inside
}

fn box_gradient(p: Vec3, half: Vec3) -> Option<Vec3> {
    let q = [
        p[0].abs() - half[0],
        p[1].abs() - half[1],
        p[2].abs() - half[2],
    ];
    let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
    let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
    if outside.iter().any(|&v| v > 0.0) {
        let g = [
            outside[0] * sign(p[0]),
            outside[1] * sign(p[1]),
            outside[2] * sign(p[2]),
        ];
        return geom::normalize(g);
    }
    let mut axis = 0;
    for a in 1..3 {
        if q[a] > q[axis] {
            axis = a;
        }
    }
    let mut g = [0.0; 3];
    g[axis] = sign(p[axis]);
    Some(g)
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ShapeKind::Sphere { radius } => write!(f, "sphere:r={radius}")?,
            ShapeKind::Box { half } => write!(f, "box:hx={},hy={},hz={}", half[0], half[1], half[2])?,
            ShapeKind::Torus { major, minor } => write!(f, "torus:R={major},r={minor}")?,
            ShapeKind::ThinPlate {
                half_thickness,
                radius,
                tilt,
            } => write!(f, "plate:h={half_thickness},a={radius},tilt={tilt}")?,
            ShapeKind::Union2 { r1, r2, offset } => write!(f, "union2:r={r1},s={r2},d={offset}")?,
        }
        if self.center != [0.0; 3] {
            write!(
                f,
                ",cx={},cy={},cz={}",
                self.center[0], self.center[1], self.center[2]
            )?;
        }
        Ok(())
    }
}

/// Parses `kind[:key=value,...]`, e.g. `sphere:r=0.5`, `plate:h=0.01`,
/// `torus:R=0.5,r=0.15`. Omitted keys take per-kind defaults; `cx`, `cy`, `cz`
/// set the center.
impl FromStr for ShapeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| Error::ShapeParse {
            spec: s.to_string(),
            reason,
        };
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k.trim(), r.trim()),
            None => (s.trim(), ""),
        };
        let mut kv: Vec<(String, f64)> = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{item}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| err(format!("`{}` is not a number", v.trim())))?;
            kv.push((k.trim().to_string(), v));
        }
        let mut take = |key: &str, default: f64| -> f64 {
            match kv.iter().position(|(k, _)| k == key) {
                Some(i) => kv.remove(i).1,
                None => default,
            }
        };
        let shape_kind = match kind {
            "sphere" => ShapeKind::Sphere {
                radius: take("r", 0.5),
            },
            "box" => {
                let a = take("a", 0.4);
                ShapeKind::Box {
                    half: [take("hx", a), take("hy", a), take("hz", a)],
                }
            }
            "torus" => ShapeKind::Torus {
                major: take("R", 0.5),
                minor: take("r", 0.15),
            },
            "plate" | "thin_plate" => ShapeKind::ThinPlate {
                half_thickness: take("h", 0.01),
                radius: take("a", 0.6),
                tilt: take("tilt", 0.0),
            },
            "union2" => ShapeKind::Union2 {
                r1: take("r", 0.35),
                r2: take("s", 0.25),
                offset: take("d", 0.25),
            },
            other => return Err(err(format!("unknown shape kind `{other}`"))),
        };
        let center = [take("cx", 0.0), take("cy", 0.0), take("cz", 0.0)];
        if let Some((k, _)) = kv.first() {
            return Err(err(format!("unknown parameter `{k}` for {kind}")));
        }
        ShapeSpec::new(shape_kind, center).map_err(|e| err(e.to_string()))
    }
}
