//! Surface-anchored token sets standing in for learned shape latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel::TokenBlock;
use super::shape::ShapeSpec;
use crate::geom::{self, Vec3};
use crate::{Error, Result};

/// Default softmax temperature, world units squared.
pub const DEFAULT_TAU: f64 = 1e-3;

/// Half-width of the inner shell that candidate points are drawn from before
/// projection onto the surface.
const SHELL: f64 = 0.01;
/// Candidate pool size relative to the requested token count; farthest-point
/// sampling thins the pool down to M.
const POOL_FACTOR: usize = 4;
const MAX_DRAWS_PER_CANDIDATE: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub anchor: Vec3,
    pub normal: Vec3,
    /// Plane offset so that `normal . q + offset` is the signed distance of
    /// `q` to the tangent plane at `anchor`.
    pub offset: f64,
}

impl Token {
    pub fn new(anchor: Vec3, normal: Vec3) -> Self {
        Self {
            anchor,
            normal,
            offset: -geom::dot(normal, anchor),
        }
    }

    #[inline]
    pub fn plane_distance(&self, q: Vec3) -> f64 {
        geom::dot(self.normal, q) + self.offset
    }
}

#[derive(Debug, Clone)]
pub struct ToyVecsetLatents {
    tokens: Vec<Token>,
    tau: f64,
    trunc: f64,
    block: TokenBlock,
}

impl ToyVecsetLatents {
    pub fn new(tokens: Vec<Token>, tau: f64, trunc: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("latents need at least one token".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) || !(trunc > 0.0 && trunc.is_finite()) {
            return Err(Error::Config(format!(
                "tau and trunc must be positive, got tau={tau} trunc={trunc}"
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if (geom::norm(t.normal) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("token {i} normal is not unit length")));
            }
            if t.anchor.iter().chain(t.normal.iter()).any(|v| !v.is_finite()) || !t.offset.is_finite() {
                return Err(Error::Config(format!("token {i} is not finite")));
            }
        }
        let block = TokenBlock::from_tokens(&tokens, 0..tokens.len());
        Ok(Self {
            tokens,
            tau,
            trunc,
            block,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn trunc(&self) -> f64 {
        self.trunc
    }

    pub(crate) fn full_block(&self) -> &TokenBlock {
        &self.block
    }

    /// Same tokens, different temperature and truncation.
    pub fn with_params(&self, tau: f64, trunc: f64) -> Result<Self> {
        Self::new(self.tokens.clone(), tau, trunc)
    }
}

/// Samples `m` anchors quasi-uniformly on the zero level set of `shape`.
///
/// Points are drawn uniformly inside a thin shell just inside the surface,
/// projected onto it along the analytic gradient, and the resulting pool is
/// thinned with farthest-point sampling.
pub fn build_surface_latents(
    shape: &ShapeSpec,
    m: usize,
    seed: u64,
    tau: f64,
    trunc: f64,
) -> Result<ToyVecsetLatents> {
    if m < 4 {
        return Err(Error::Config(format!("need at least 4 tokens, got {m}")));
    }
    shape.validate()?;
    let wanted = POOL_FACTOR * m;
    let pool = sample_surface_points(shape, wanted, seed)?;
    let picked = farthest_point_order(&pool, m);
    let tokens = picked
        .into_iter()
        .map(|i| {
            let p = pool[i];
            let n = shape.gradient(p).expect("pool points have defined gradients");
            Token::new(p, n)
        })
        .collect();
    ToyVecsetLatents::new(tokens, tau, trunc)
}

/// Draws `wanted` points with `|sdf| <= 1e-12` and a defined gradient.
pub fn sample_surface_points(shape: &ShapeSpec, wanted: usize, seed: u64) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = shape.bounds();
    let budget = wanted.saturating_mul(MAX_DRAWS_PER_CANDIDATE).max(100_000);
    let mut out = Vec::with_capacity(wanted);
    let mut draws = 0usize;
    while out.len() < wanted {
        if draws >= budget {
            return Err(Error::SamplingExhausted {
                attempts: draws,
                accepted: out.len(),
                wanted,
            });
        }
        draws += 1;
        let p = [
            rng.random_range(lo[0]..=hi[0]),
            rng.random_range(lo[1]..=hi[1]),
            rng.random_range(lo[2]..=hi[2]),
        ];
        let d = shape.sdf(p);
        if !(-SHELL..=0.0).contains(&d) {
            continue;
        }
        if let Some(q) = project(shape, p) {
            out.push(q);
        }
    }
    Ok(out)
}

fn project(shape: &ShapeSpec, mut p: Vec3) -> Option<Vec3> {
    for _ in 0..3 {
        let d = shape.sdf(p);
        if d.abs() <= 1e-15 {
            break;
        }
        let g = shape.gradient(p)?;
        p = geom::sub(p, geom::scale(g, d));
    }
    (shape.sdf(p).abs() <= 1e-12 && shape.gradient(p).is_some()).then_some(p)
}

/// Greedy farthest-point ordering starting from the first pool point.
fn farthest_point_order(pool: &[Vec3], m: usize) -> Vec<usize> {
    let m = m.min(pool.len());
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; pool.len()];
    let mut current = 0usize;
    for _ in 0..m {
        picked.push(current);
        let c = pool[current];
        let mut next = 0usize;
        let mut far = -1.0;
        for (i, p) in pool.iter().enumerate() {
            let d = geom::dist2(*p, c);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        current = next;
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_anchors_on_surface() {
        let lat = build_surface_latents(&ShapeSpec::sphere(0.5), 16, 7, 1e-3, 0.125).unwrap();
        assert_eq!(lat.len(), 16);
        for t in lat.tokens() {
            assert!((geom::norm(t.anchor) - 0.5).abs() <= 1e-9);
            assert!((geom::norm(t.normal) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn same_seed_same_latents() {
        let s = ShapeSpec::torus(0.5, 0.15);
        let a = build_surface_latents(&s, 64, 7, 1e-3, 0.125).unwrap();
        let b = build_surface_latents(&s, 64, 7, 1e-3, 0.125).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        let c = build_surface_latents(&s, 64, 8, 1e-3, 0.125).unwrap();
        assert_ne!(a.tokens(), c.tokens());
    }

    #[test]
    fn box_normals_are_axis_aligned_and_match_fd() {
        let s = ShapeSpec::cube(0.4);
        let lat = build_surface_latents(&s, 4, 3, 1e-3, 0.125).unwrap();
        for t in lat.tokens() {
            let nonzero: Vec<_> = t.normal.iter().filter(|v| **v != 0.0).collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(nonzero[0].abs(), 1.0);
            // finite differences from just outside the face
            let p = geom::add(t.anchor, geom::scale(t.normal, 1e-4));
            let h = 1e-7;
            for a in 0..3 {
                let mut lo = p;
                let mut hi = p;
                lo[a] -= h;
                hi[a] += h;
                let fd = (s.sdf(hi) - s.sdf(lo)) / (2.0 * h);
                assert!((fd - t.normal[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn every_shape_samples() {
        for spec in ["sphere", "box", "torus", "plate:h=0.01", "union2", "plate:h=0.01,tilt=0.1"] {
            let s: ShapeSpec = spec.parse().unwrap();
            let lat = build_surface_latents(&s, 128, 1, 1e-3, 0.125).unwrap();
            for t in lat.tokens() {
                assert!(s.sdf(t.anchor).abs() <= 1e-9, "{spec}");
            }
        }
    }

    #[test]
    fn rejects_small_m_and_bad_params() {
        assert!(build_surface_latents(&ShapeSpec::sphere(0.5), 3, 0, 1e-3, 0.1).is_err());
        assert!(build_surface_latents(&ShapeSpec::sphere(0.5), 8, 0, 0.0, 0.1).is_err());
        let bad = Token {
            anchor: [0.0; 3],
            normal: [2.0, 0.0, 0.0],
            offset: 0.0,
        };
        assert!(ToyVecsetLatents::new(vec![bad], 1e-3, 0.1).is_err());
    }

    #[test]
    fn fps_spreads_points() {
        let pool: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_order(&pool, 3), vec![0, 9, 4]);
    }
}
