//! Isosurface extraction, mesh topology checks and mesh I/O.

mod table;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::geom::{self, Vec3};
use crate::hierdec::DenseVolume;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Config(format!("triangle {i} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Config(format!("triangle {i} is degenerate")));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Config("non-finite vertex".into()));
        }
        Ok(())
    }

    /// Use count of every undirected edge.
    fn edge_uses(&self) -> HashMap<(u32, u32), u32> {
        let mut uses = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    pub fn edge_count(&self) -> usize {
        self.edge_uses().len()
    }

    /// `V - E + F` over vertices referenced by at least one triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// Volume enclosed by a closed mesh; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }
}

/// Edges used by exactly one triangle.
pub fn boundary_edge_count(mesh: &Mesh) -> usize {
    mesh.edge_uses().values().filter(|&&c| c == 1).count()
}

/// Extracts the `gamma` level set of a volume sampled at voxel centers.
///
/// Cells span eight neighbouring voxel centers; a corner is inside when its
/// value is `<= gamma`. Vertices are shared between cells through an
/// edge-keyed map and numbered in order of first use, scanning cells
/// x-fastest.
pub fn marching_cubes(volume: &DenseVolume, gamma: f32) -> Result<Mesh> {
    let [nx, ny, nz] = volume.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::Config(format!(
            "marching cubes needs at least 2 samples per axis, got {:?}",
            volume.dims()
        )));
    }
    let bbox = *volume.bbox();
    let h = [
        (bbox.max[0] - bbox.min[0]) / nx as f64,
        (bbox.max[1] - bbox.min[1]) / ny as f64,
        (bbox.max[2] - bbox.min[2]) / nz as f64,
    ];
    let node_pos = |ijk: [usize; 3]| -> Vec3 {
        [
            bbox.min[0] + (ijk[0] as f64 + 0.5) * h[0],
            bbox.min[1] + (ijk[1] as f64 + 0.5) * h[1],
            bbox.min[2] + (ijk[2] as f64 + 0.5) * h[2],
        ]
    };
    let values = volume.values();
    let at = |ijk: [usize; 3]| values[ijk[0] + nx * (ijk[1] + ny * ijk[2])];
    let edges = table::edges();
    let cases = table::cases();

    let mut mesh = Mesh::default();
    let mut vertex_of: HashMap<u64, u32> = HashMap::new();
    let mut corner_vals = [0f32; 8];
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut mask = 0usize;
                for (c, off) in table::CORNERS.iter().enumerate() {
                    let v = at([x + off[0], y + off[1], z + off[2]]);
                    corner_vals[c] = v;
                    if v <= gamma {
                        mask |= 1 << c;
                    }
                }
                let tris = &cases[mask];
                if tris.is_empty() {
                    continue;
                }
                for tri in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri.iter()) {
                        let edge = &edges[e as usize];
                        let o = table::CORNERS[edge.a];
                        let lo = [x + o[0], y + o[1], z + o[2]];
                        let key = ((lo[0] + nx * (lo[1] + ny * lo[2])) * 3 + edge.axis) as u64;
                        *slot = *vertex_of.entry(key).or_insert_with(|| {
                            let (va, vb) = (corner_vals[edge.a] as f64, corner_vals[edge.b] as f64);
                            let t = ((gamma as f64 - va) / (vb - va)).clamp(0.0, 1.0);
                            let pa = node_pos(lo);
                            let mut p = pa;
                            p[edge.axis] += t * h[edge.axis];
                            mesh.vertices.push(p);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    Ok(mesh)
}

/// Occupancy bits of a volume: `value <= gamma`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }
}

pub fn sign_volume(volume: &DenseVolume, gamma: f32) -> OccupancyGrid {
    OccupancyGrid {
        dims: volume.dims(),
        bits: volume.values().iter().map(|&v| v <= gamma).collect(),
    }
}

/// Writes `v x y z` lines then `f i j k` lines with 1-based indices.
pub fn write_obj<W: Write>(mesh: &Mesh, mut sink: W) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(sink, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(sink, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    sink.flush()?;
    Ok(())
}

/// Reads `v` and `f` records. Normals, texture coordinates, groups and
/// material statements are skipped; polygons are fan-triangulated.
/// `name` labels parse errors.
pub fn read_obj<R: BufRead>(source: R, name: &str) -> Result<Mesh> {
    let mut mesh = Mesh::default();
    let err = |line: usize, reason: String| Error::Parse {
        path: name.to_string(),
        line,
        reason,
    };
    let mut face_lines = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        match tag {
            "v" => {
                let c: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| err(lineno, format!("bad coordinate `{p}`"))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 && c.len() != 4 {
                    return Err(err(lineno, format!("expected 3 coordinates, got {}", c.len())));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(err(lineno, "non-finite coordinate".into()));
                }
                mesh.vertices.push([c[0], c[1], c[2]]);
            }
            "f" => {
                let idx: Vec<u32> = parts
                    .map(|p| {
                        let head = p.split('/').next().unwrap_or_default();
                        match head.parse::<u32>() {
                            Ok(v) if v >= 1 => Ok(v - 1),
                            _ => Err(err(lineno, format!("bad vertex index `{p}`"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(lineno, format!("face needs 3 vertices, got {}", idx.len())));
                }
                for k in 1..idx.len() - 1 {
                    let t = [idx[0], idx[k], idx[k + 1]];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        return Err(err(lineno, "degenerate face".into()));
                    }
                    mesh.triangles.push(t);
                    face_lines.push(lineno);
                }
            }
            "vn" | "vt" | "vp" | "o" | "g" | "s" | "usemtl" | "mtllib" | "l" => {}
            other => return Err(err(lineno, format!("unknown record `{other}`"))),
        }
    }
    let n = mesh.vertices.len() as u32;
    for (t, &lineno) in mesh.triangles.iter().zip(&face_lines) {
        if let Some(&bad) = t.iter().find(|&&v| v >= n) {
            return Err(err(lineno, format!("vertex index {} out of range ({n} vertices)", bad + 1)));
        }
    }
    Ok(mesh)
}

const MESH_MAGIC: &[u8; 10] = b"FVDM-MESH1";

/// Binary dump: magic, vertex and triangle counts as little-endian u32,
/// vertices as little-endian f32 triples, then u32 index triples.
pub fn write_mesh_bin<W: Write>(mesh: &Mesh, mut sink: W) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + mesh.vertices.len() * 12 + mesh.triangles.len() * 12);
    buf.extend_from_slice(MESH_MAGIC);
    buf.extend_from_slice(&(mesh.vertices.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for v in &mesh.vertices {
        for c in v {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{analytic_sdf, ShapeSpec};
    use crate::geom::Bbox;
    use crate::hierdec::{gen_grid_points, DenseVolume};
    use proptest::prelude::*;

    fn analytic(shape: &ShapeSpec, res: usize, trunc: f64) -> DenseVolume {
        let values = gen_grid_points(res, &Bbox::unit())
            .iter()
            .map(|p| (analytic_sdf(shape, *p).clamp(-trunc, trunc) / trunc) as f32)
            .collect();
        DenseVolume::new([res; 3], Bbox::unit(), values).unwrap()
    }

    #[test]
    fn uniform_volume_gives_empty_mesh() {
        let vol = DenseVolume::new([4; 3], Bbox::unit(), vec![1.0; 64]).unwrap();
        assert!(marching_cubes(&vol, 0.0).unwrap().is_empty());
        let tiny = DenseVolume::new([1; 3], Bbox::unit(), vec![1.0]).unwrap();
        assert!(marching_cubes(&tiny, 0.0).is_err());
    }

    #[test]
    fn sphere_mesh_is_closed_and_outward() {
        let vol = analytic(&ShapeSpec::sphere(0.5), 64, 0.125);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        mesh.validate().unwrap();
        let h = 2.0 / 64.0;
        for v in &mesh.vertices {
            assert!((geom::norm(*v) - 0.5).abs() <= 2.0 * h);
        }
        assert_eq!(boundary_edge_count(&mesh), 0);
        assert_eq!(mesh.euler_characteristic(), 2);
        let vol_true = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        let sv = mesh.signed_volume();
        assert!(sv > 0.0 && (sv - vol_true).abs() / vol_true < 0.02, "{sv}");
    }

    #[test]
    fn torus_has_genus_one() {
        let vol = analytic(&ShapeSpec::torus(0.5, 0.15), 64, 0.125);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert_eq!(boundary_edge_count(&mesh), 0);
        assert_eq!(mesh.euler_characteristic(), 0);
    }

    #[test]
    fn vertices_interpolate_to_gamma() {
        let vol = analytic(&ShapeSpec::sphere(0.37), 24, 0.3);
        let gamma = 0.1f32;
        let mesh = marching_cubes(&vol, gamma).unwrap();
        let h = 2.0 / 24.0;
        for v in &mesh.vertices {
            // exactly one coordinate is off-node; interpolate the field along it
            let g: Vec<f64> = v.iter().map(|c| (c + 1.0) / h - 0.5).collect();
            let axis = (0..3).find(|&a| (g[a] - g[a].round()).abs() > 1e-9).unwrap_or(0);
            let mut lo = [0usize; 3];
            for a in 0..3 {
                lo[a] = if a == axis { g[a].floor() as usize } else { g[a].round() as usize };
            }
            let mut hi = lo;
            hi[axis] += 1;
            let t = g[axis] - lo[axis] as f64;
            let f = vol.get(lo) as f64 * (1.0 - t) + vol.get(hi) as f64 * t;
            assert!((f - gamma as f64).abs() <= 1e-6);
        }
    }

    #[test]
    fn boundary_edge_examples() {
        let one = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert_eq!(boundary_edge_count(&one), 3);
        let two = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
        };
        assert_eq!(boundary_edge_count(&two), 4);
    }

    #[test]
    fn obj_formats() {
        let mut buf = Vec::new();
        write_obj(&Mesh::default(), &mut buf).unwrap();
        assert!(buf.is_empty());
        let tri = Mesh {
            vertices: vec![[0.0; 3], [1.5, 0.0, 0.0], [0.0, 1.0, -0.25]],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        write_obj(&tri, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
        assert!(text.contains("f 1 2 3"));
        assert_eq!(read_obj(text.as_bytes(), "t.obj").unwrap(), tri);
    }

    #[test]
    fn obj_errors_name_the_line() {
        let bad = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n";
        match read_obj(bad.as_bytes(), "bad.obj") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(path, "bad.obj");
            }
            other => panic!("{other:?}"),
        }
        assert!(read_obj("v 0 0 0\nf 1 2 3\n".as_bytes(), "x").is_err());
        assert!(read_obj("q 1 2\n".as_bytes(), "x").is_err());
        let skipped = "# c\no thing\nv 0 0 0\nvn 0 0 1\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1//1 2//1 4//1 3//1\n";
        assert_eq!(read_obj(skipped.as_bytes(), "x").unwrap().triangles.len(), 2);
    }

    proptest! {
        #[test]
        fn obj_round_trip_is_idempotent(
            verts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 3..20),
            tris in proptest::collection::vec((0u32..1000, 0u32..1000, 0u32..1000), 0..20),
        ) {
            let n = verts.len() as u32;
            let mesh = Mesh {
                vertices: verts.iter().map(|&(a, b, c)| [a, b, c]).collect(),
                triangles: tris
                    .iter()
                    .map(|&(a, b, c)| [a % n, b % n, c % n])
                    .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
                    .collect(),
            };
            let mut buf = Vec::new();
            write_obj(&mesh, &mut buf).unwrap();
            let once = read_obj(&buf[..], "a").unwrap();
            prop_assert_eq!(&once, &mesh);
            let mut buf2 = Vec::new();
            write_obj(&once, &mut buf2).unwrap();
            prop_assert_eq!(read_obj(&buf2[..], "b").unwrap(), once);
        }

        #[test]
        fn sign_consistent_volumes_share_topology(
            signs in proptest::collection::vec(any::<bool>(), 125),
            mags in proptest::collection::vec((0.01f32..1.0, 0.01f32..1.0), 125),
        ) {
            let a: Vec<f32> = signs.iter().zip(&mags).map(|(&s, m)| if s { -m.0 } else { m.0 }).collect();
            let b: Vec<f32> = signs.iter().zip(&mags).map(|(&s, m)| if s { -m.1 } else { m.1 }).collect();
            let ma = marching_cubes(&DenseVolume::new([5; 3], Bbox::unit(), a).unwrap(), 0.0).unwrap();
            let mb = marching_cubes(&DenseVolume::new([5; 3], Bbox::unit(), b).unwrap(), 0.0).unwrap();
            prop_assert_eq!(ma.triangles, mb.triangles);
            prop_assert_eq!(ma.vertices.len(), mb.vertices.len());
        }

        #[test]
        fn random_sign_fields_are_closed_inside_the_grid(signs in proptest::collection::vec(any::<bool>(), 216)) {
            // pad with outside values so the surface never meets the grid boundary
            let mut v = vec![1.0f32; 8 * 8 * 8];
            for z in 0..6 { for y in 0..6 { for x in 0..6 {
                if signs[x + 6 * (y + 6 * z)] { v[(x + 1) + 8 * ((y + 1) + 8 * (z + 1))] = -1.0; }
            }}}
            let mesh = marching_cubes(&DenseVolume::new([8; 3], Bbox::unit(), v).unwrap(), 0.0).unwrap();
            mesh.validate().unwrap();
            prop_assert_eq!(boundary_edge_count(&mesh), 0);
        }
    }

    #[test]
    fn occupancy() {
        let vol = DenseVolume::new([2; 3], Bbox::unit(), vec![1.0; 8]).unwrap();
        assert_eq!(sign_volume(&vol, 0.0).count(), 0);
        assert_eq!(sign_volume(&vol, 2.0).count(), 8);
        let s = analytic(&ShapeSpec::sphere(0.5), 64, 0.125);
        let f = sign_volume(&s, 0.0).fraction();
        assert!((f - 0.0654).abs() <= 0.005);
    }

    #[test]
    fn binary_dump_layout() {
        let tri = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        write_mesh_bin(&tri, &mut buf).unwrap();
        assert_eq!(&buf[..10], b"FVDM-MESH1");
        assert_eq!(buf.len(), 10 + 8 + 36 + 12);
    }
}
