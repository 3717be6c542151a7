//! Marching-cubes case table, derived from corner signs alone.
//!
//! For each face of the cell the crossing edges are paired into segments.
//! A face with four crossings (diagonal corners inside) keeps its inside
//! corners connected, so the segments cut off the two outside corners. The
//! decision depends only on the face's own corners, so neighbouring cells
//! agree and the surface has no cracks. Segments are oriented so that the
//! resulting polygons wind counter-clockwise seen from outside the solid;
//! closed cycles of segments are fan-triangulated.

use std::sync::OnceLock;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, c >> 2)`.
pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Cell edge: lower corner, upper corner, axis.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
}

pub fn edges() -> &'static [Edge; 12] {
    static EDGES: OnceLock<[Edge; 12]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut out = [Edge { a: 0, b: 0, axis: 0 }; 12];
        let mut n = 0;
        for axis in 0..3 {
            for a in 0..8 {
                if a & (1 << axis) == 0 {
                    out[n] = Edge {
                        a,
                        b: a | (1 << axis),
                        axis,
                    };
                    n += 1;
                }
            }
        }
        out
    })
}

/// Triangles (as cell-edge triples) for each of the 256 inside-corner masks.
pub fn cases() -> &'static Vec<Vec<[u8; 3]>> {
    static CASES: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    CASES.get_or_init(|| (0..256).map(|m| build_case(m as u8)).collect())
}

fn midpoint(e: &Edge) -> [f64; 3] {
    let mut p = [0.0; 3];
    for (a, v) in p.iter_mut().enumerate() {
        *v = (CORNERS[e.a][a] + CORNERS[e.b][a]) as f64 * 0.5;
    }
    p
}

fn corner(c: usize) -> [f64; 3] {
    CORNERS[c].map(|v| v as f64)
}

/// `((b - a) x (c - a)) . n`
fn side(a: [f64; 3], b: [f64; 3], c: [f64; 3], n: [f64; 3]) -> f64 {
    let u = crate::geom::sub(b, a);
    let v = crate::geom::sub(c, a);
    crate::geom::dot(crate::geom::cross(u, v), n)
}

fn build_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask & (1 << c) != 0;
    let edges = edges();
    // next[e] = edge following e along its polygon
    let mut next: [Option<usize>; 12] = [None; 12];
    for axis in 0..3 {
        for s in 0..2 {
            let mut normal = [0.0; 3];
            normal[axis] = if s == 1 { 1.0 } else { -1.0 };
            let face_corners: Vec<usize> = (0..8).filter(|&c| CORNERS[c][axis] == s).collect();
            let face_edges: Vec<usize> = (0..12)
                .filter(|&e| CORNERS[edges[e].a][axis] == s && CORNERS[edges[e].b][axis] == s)
                .collect();
            let crossing: Vec<usize> = face_edges
                .iter()
                .copied()
                .filter(|&e| inside(edges[e].a) != inside(edges[e].b))
                .collect();
            let mut segments: Vec<(usize, usize, usize, bool)> = Vec::new();
            match crossing.len() {
                0 => {}
                2 => {
                    let c = *face_corners.iter().find(|&&c| inside(c)).unwrap();
                    segments.push((crossing[0], crossing[1], c, true));
                }
                4 => {
                    for &o in face_corners.iter().filter(|&&c| !inside(c)) {
                        let pair: Vec<usize> = crossing
                            .iter()
                            .copied()
                            .filter(|&e| edges[e].a == o || edges[e].b == o)
                            .collect();
                        segments.push((pair[0], pair[1], o, false));
                    }
                }
                n => unreachable!("a face has {n} crossings"),
            }
            for (e0, e1, c, c_inside) in segments {
                let (p0, p1) = (midpoint(&edges[e0]), midpoint(&edges[e1]));
                // outward winding: inside corners to the right seen from outside the cell
                let right = side(p0, p1, corner(c), normal) < 0.0;
                let (from, to) = if right == c_inside { (e0, e1) } else { (e1, e0) };
                debug_assert!(next[from].is_none());
                next[from] = Some(to);
            }
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut cycle = vec![start];
        seen[start] = true;
        let mut cur = next[start].unwrap();
        while cur != start {
            seen[cur] = true;
            cycle.push(cur);
            cur = next[cur].expect("segments form closed cycles");
        }
        for i in 1..cycle.len() - 1 {
            tris.push([cycle[0] as u8, cycle[i] as u8, cycle[i + 1] as u8]);
        }
    }
    tris
}
