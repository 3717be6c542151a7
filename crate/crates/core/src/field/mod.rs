//! Ground-truth shapes and the synthetic cross-attention field.
//!
//! A query `q` attends to every token with score `-|q - p_i|^2 / tau`; the field
//! value is the softmax-weighted signed distance to the tokens' tangent planes,
//! truncated to `[-trunc, trunc]` and divided by `trunc`.

mod flops;
mod kernel;
mod latents;
mod shape;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use flops::{attention_flops, flops_per_query, HeadConfig, POS_ENC_WIDTH};
pub use kernel::{TokenBlock, LANES};
pub use latents::{build_surface_latents, sample_surface_points, Token, ToyVecsetLatents, DEFAULT_TAU};
pub use shape::{ShapeKind, ShapeSpec, BBOX_MARGIN};

use crate::geom::{self, Vec3};

/// Signed distance to `shape`, negative inside.
pub fn analytic_sdf(shape: &ShapeSpec, p: Vec3) -> f64 {
    shape.sdf(p)
}

/// Softmax attention of `q` over the selected tokens (all tokens when
/// `selection` is `None`), in selection order.
pub fn attention_weights(q: Vec3, latents: &ToyVecsetLatents, selection: Option<&[usize]>) -> Vec<f64> {
    let tokens = latents.tokens();
    let inv_tau = 1.0 / latents.tau();
    let scores: Vec<f64> = match selection {
        Some(sel) => sel
            .iter()
            .map(|&i| -geom::dist2(q, tokens[i].anchor) * inv_tau)
            .collect(),
        None => tokens
            .iter()
            .map(|t| -geom::dist2(q, t.anchor) * inv_tau)
            .collect(),
    };
    softmax(&scores)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Double-precision reference for the un-truncated field value.
pub fn raw_field_f64(q: Vec3, latents: &ToyVecsetLatents, selection: Option<&[usize]>) -> f64 {
    let w = attention_weights(q, latents, selection);
    let tokens = latents.tokens();
    match selection {
        Some(sel) => sel
            .iter()
            .zip(&w)
            .map(|(&i, w)| w * tokens[i].plane_distance(q))
            .sum(),
        None => tokens
            .iter()
            .zip(&w)
            .map(|(t, w)| w * t.plane_distance(q))
            .sum(),
    }
}

/// Per-group token subsets with a group index for every query point.
#[derive(Debug, Clone, Copy)]
pub struct GroupSelection<'a> {
    pub groups: &'a [Vec<usize>],
    pub assignment: &'a [u32],
}

/// Evaluates the normalized tSDF at every point.
///
/// With a selection, each point attends only to the tokens of its group and
/// the softmax is renormalized over that subset.
pub fn eval_field(points: &[Vec3], latents: &ToyVecsetLatents, selection: Option<GroupSelection<'_>>) -> Vec<f32> {
    match selection {
        None => eval_block(points, latents, latents.full_block()),
        Some(sel) => {
            assert_eq!(sel.assignment.len(), points.len(), "one group per point");
            let blocks: Vec<TokenBlock> = sel
                .groups
                .iter()
                .map(|g| TokenBlock::from_tokens(latents.tokens(), g.iter().copied()))
                .collect();
            let refs: Vec<&TokenBlock> = blocks.iter().collect();
            eval_grouped(points, latents, &refs, sel.assignment)
        }
    }
}

/// Evaluates every point against one block.
pub fn eval_block(points: &[Vec3], latents: &ToyVecsetLatents, block: &TokenBlock) -> Vec<f32> {
    let norm = Normalizer::new(latents);
    points
        .par_iter()
        .with_min_len(256)
        .map(|p| norm.apply(block.raw_value(to_f32(*p), norm.neg_inv_tau)))
        .collect()
}

/// Evaluates point `i` against `blocks[assignment[i]]`.
pub fn eval_grouped(points: &[Vec3], latents: &ToyVecsetLatents, blocks: &[&TokenBlock], assignment: &[u32]) -> Vec<f32> {
    let norm = Normalizer::new(latents);
    points
        .par_iter()
        .zip(assignment.par_iter())
        .with_min_len(256)
        .map(|(p, &g)| norm.apply(blocks[g as usize].raw_value(to_f32(*p), norm.neg_inv_tau)))
        .collect()
}

struct Normalizer {
    neg_inv_tau: f32,
    trunc: f32,
}

impl Normalizer {
    fn new(latents: &ToyVecsetLatents) -> Self {
        Self {
            neg_inv_tau: (-1.0 / latents.tau()) as f32,
            trunc: latents.trunc() as f32,
        }
    }

    #[inline]
    fn apply(&self, raw: f32) -> f32 {
        raw.clamp(-self.trunc, self.trunc) / self.trunc
    }
}

#[inline]
fn to_f32(p: Vec3) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

/// Log2-bucketed histogram: bucket 0 counts zeros, bucket `b >= 1` counts
/// values in `[2^(b-1), 2^b)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower_edges: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[usize]) -> Self {
        let bucket = |v: usize| if v == 0 { 0 } else { (usize::BITS - v.leading_zeros()) as usize };
        let nb = values.iter().map(|&v| bucket(v)).max().map_or(0, |b| b + 1);
        let mut counts = vec![0usize; nb];
        for &v in values {
            counts[bucket(v)] += 1;
        }
        let lower_edges = (0..nb).map(|b| if b == 0 { 0 } else { 1 << (b - 1) }).collect();
        Self { lower_edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionStats {
    pub epsilon: f64,
    /// Tokens with weight above `epsilon`, per query.
    pub counts: Vec<usize>,
    /// Union of activated tokens per region label, sorted.
    pub region_sets: BTreeMap<u32, Vec<usize>>,
    pub histogram: Histogram,
}

impl AttentionStats {
    pub fn mean_count(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.counts.iter().sum::<usize>() as f64 / self.counts.len() as f64
    }

    pub fn mean_region_size(&self) -> f64 {
        if self.region_sets.is_empty() {
            return 0.0;
        }
        let total: usize = self.region_sets.values().map(Vec::len).sum();
        total as f64 / self.region_sets.len() as f64
    }
}

/// Counts tokens receiving more than `epsilon` attention at each point and,
/// when `regions` labels are given, the union of those tokens per region.
pub fn activated_token_stats(
    points: &[Vec3],
    latents: &ToyVecsetLatents,
    epsilon: f64,
    regions: Option<&[u32]>,
) -> crate::Result<AttentionStats> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(crate::Error::Config(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    if let Some(r) = regions {
        if r.len() != points.len() {
            return Err(crate::Error::ShapeMismatch(format!(
                "{} region labels for {} points",
                r.len(),
                points.len()
            )));
        }
    }
    let active: Vec<Vec<usize>> = points
        .par_iter()
        .map(|&q| {
            attention_weights(q, latents, None)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > epsilon)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let counts: Vec<usize> = active.iter().map(Vec::len).collect();
    let mut region_sets: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    if let Some(labels) = regions {
        for (set, &label) in active.iter().zip(labels) {
            region_sets.entry(label).or_default().extend_from_slice(set);
        }
        for v in region_sets.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
    }
    let histogram = Histogram::of(&counts);
    Ok(AttentionStats {
        epsilon,
        counts,
        region_sets,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tokens(d1: f64, d2: f64, tau: f64) -> ToyVecsetLatents {
        let n = [0.0, 0.0, 1.0];
        ToyVecsetLatents::new(vec![Token::new([d1, 0.0, 0.0], n), Token::new([-d2, 0.0, 0.0], n)], tau, 0.1).unwrap()
    }

    #[test]
    fn singleton_weight_is_one() {
        let lat = ToyVecsetLatents::new(vec![Token::new([0.3, 0.0, 0.0], [1.0, 0.0, 0.0])], 1e-3, 0.1).unwrap();
        assert_eq!(attention_weights([0.0, 0.5, 0.0], &lat, None), vec![1.0]);
    }

    #[test]
    fn equidistant_tokens_split_evenly() {
        let w = attention_weights([0.0; 3], &two_tokens(0.2, 0.2, 1e-3), None);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_softmax() {
        // scores -1 and -4
        let w = attention_weights([0.0; 3], &two_tokens(0.1, 0.2, 0.01), None);
        assert!((w[0] - 0.9526).abs() < 1e-4);
        assert!((w[1] - 0.0474).abs() < 1e-4);
        let exact = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((w[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn anchors_evaluate_near_zero() {
        let lat = build_surface_latents(&ShapeSpec::sphere(0.5), 256, 11, 1e-3, 0.125).unwrap();
        let pts: Vec<Vec3> = lat.tokens().iter().map(|t| t.anchor).collect();
        for v in eval_field(&pts, &lat, None) {
            assert!(v.abs() <= 0.02, "{v}");
        }
    }

    #[test]
    fn saturates_outside_trunc() {
        let lat = build_surface_latents(&ShapeSpec::sphere(0.5), 256, 11, 1e-3, 0.125).unwrap();
        let pts = [[0.9, 0.0, 0.0], [0.0, -0.8, 0.0], [0.5, 0.5, 0.5]];
        assert_eq!(eval_field(&pts, &lat, None), vec![1.0; 3]);
        assert_eq!(eval_field(&[[0.0; 3]], &lat, None), vec![-1.0]);
    }

    #[test]
    fn full_selection_is_bitwise_identity() {
        let lat = build_surface_latents(&ShapeSpec::torus(0.5, 0.15), 200, 2, 1e-3, 0.125).unwrap();
        let pts: Vec<Vec3> = (0..500)
            .map(|i| {
                let t = i as f64 * 0.37;
                [0.6 * t.sin(), 0.6 * (1.3 * t).cos(), 0.2 * (0.7 * t).sin()]
            })
            .collect();
        let all: Vec<Vec<usize>> = vec![(0..lat.len()).collect()];
        let assign = vec![0u32; pts.len()];
        let sel = GroupSelection {
            groups: &all,
            assignment: &assign,
        };
        let a = eval_field(&pts, &lat, None);
        let b = eval_field(&pts, &lat, Some(sel));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn kernel_agrees_with_f64_reference() {
        let lat = build_surface_latents(&ShapeSpec::union2(0.35, 0.25, 0.25), 300, 5, 1e-3, 0.125).unwrap();
        for i in 0..200 {
            let t = i as f64 * 0.113;
            let q = [0.7 * t.cos(), 0.5 * (2.1 * t).sin(), 0.4 * (0.3 * t).cos()];
            let want = raw_field_f64(q, &lat, None).clamp(-0.125, 0.125) / 0.125;
            let got = eval_field(&[q], &lat, None)[0] as f64;
            assert!((want - got).abs() < 2e-5, "{q:?}: {want} vs {got}");
        }
    }

    #[test]
    fn single_token_selection_is_plane_distance() {
        let lat = build_surface_latents(&ShapeSpec::sphere(0.5), 64, 1, 1e-3, 0.125).unwrap();
        let q = [0.1, 0.2, 0.3];
        let groups = vec![vec![5usize]];
        let v = eval_field(&[q], &lat, Some(GroupSelection { groups: &groups, assignment: &[0] }))[0] as f64;
        let want = lat.tokens()[5].plane_distance(q).clamp(-0.125, 0.125) / 0.125;
        assert!((v - want).abs() < 1e-6);
    }

    #[test]
    fn stats_limits() {
        let lat = build_surface_latents(&ShapeSpec::sphere(0.5), 64, 1, 1e3, 0.125).unwrap();
        let pts = [[0.0, 0.0, 0.01]];
        let s = activated_token_stats(&pts, &lat, 1.0 / 64.0 * 0.99, None).unwrap();
        assert_eq!(s.counts, vec![64]);
        let sharp = lat.with_params(1e-8, 0.125).unwrap();
        let pts = [[0.1, 0.2, 0.3], [0.6, -0.1, 0.05]];
        let s = activated_token_stats(&pts, &sharp, 1e-3, Some(&[0, 0])).unwrap();
        assert_eq!(s.counts, vec![1, 1]);
        assert_eq!(s.histogram.total(), 2);
        assert!(s.region_sets[&0].len() <= 2);
        assert!(activated_token_stats(&pts, &sharp, 1.0, None).is_err());
    }

    #[test]
    fn histogram_buckets() {
        let h = Histogram::of(&[0, 1, 2, 3, 4, 9]);
        assert_eq!(h.lower_edges, vec![0, 1, 2, 4, 8]);
        assert_eq!(h.counts, vec![1, 1, 2, 1, 1]);
    }
}
