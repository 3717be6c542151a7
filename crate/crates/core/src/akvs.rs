//! Adaptive key/value selection.
//!
//! The grid is split into `r^3` subvolumes. A few probe queries per
//! subvolume score every token; the subvolume then attends only to the
//! tokens those probes rank highest. Queries are packed subvolume-contiguously
//! so each batch runs against a handful of small token blocks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{attention_flops, attention_weights, eval_grouped, TokenBlock, ToyVecsetLatents};
use crate::geom::{self, Bbox, Vec3};
use crate::hierdec::{decode_with_engine, unlinear, DecodeConfig, DenseVolume, DecodeReport, LevelQuery, QueryEngine};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AkvsMode {
    /// Keep the `k` tokens with the highest probe-mean score.
    MeanTopk,
    /// Union of every probe's `n` highest-scoring tokens.
    TopnMerge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AkvsConfig {
    /// Subvolumes per axis.
    pub r: usize,
    pub n_probe: usize,
    pub mode: AkvsMode,
    pub k: usize,
    pub n: usize,
    pub pack_batch: usize,
    pub seed: u64,
    /// Key/value channel width used for FLOPs accounting.
    pub kv_width: u64,
    /// Non-probe queries per level checked for kept softmax mass.
    pub kept_mass_samples: usize,
}

impl Default for AkvsConfig {
    fn default() -> Self {
        Self {
            r: 16,
            n_probe: 8,
            mode: AkvsMode::MeanTopk,
            k: 512,
            n: 50,
            pack_batch: 1 << 16,
            seed: 0,
            kv_width: 512,
            kept_mass_samples: 2048,
        }
    }
}

impl AkvsConfig {
    /// Checks ranges; `m` is the token count when known.
    pub fn validate(&self, m: Option<usize>) -> Result<()> {
        if self.r == 0 || self.n_probe == 0 || self.k == 0 || self.n == 0 || self.pack_batch == 0 || self.kv_width == 0 {
            return Err(Error::Config(format!("key/value selection parameters must be >= 1: {self:?}")));
        }
        if let Some(m) = m {
            let (name, v) = match self.mode {
                AkvsMode::MeanTopk => ("k", self.k),
                AkvsMode::TopnMerge => ("n", self.n),
            };
            if v > m {
                return Err(Error::Config(format!("{name}={v} exceeds the token count {m}")));
            }
        }
        Ok(())
    }
}

/// Linearized subvolume id of voxel `ijk`.
#[inline]
pub fn subvolume_of(res: usize, r: usize, ijk: [usize; 3]) -> u32 {
    let s = |c: usize| c * r / res;
    (s(ijk[0]) + r * (s(ijk[1]) + r * s(ijk[2]))) as u32
}

/// Subvolume id of every voxel of a `res^3` grid, x-fastest.
pub fn partition_subvolumes(res: usize, r: usize) -> Result<Vec<u32>> {
    if r == 0 || r > res {
        return Err(Error::Config(format!("need 1 <= r <= res, got r={r} res={res}")));
    }
    Ok((0..res * res * res)
        .map(|i| subvolume_of(res, r, unlinear(res, i)))
        .collect())
}

/// Query positions grouped by subvolume; ids ascending, members in the
/// original query order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubvolumeQueries {
    pub ids: Vec<u32>,
    pub members: Vec<Vec<u32>>,
}

impl SubvolumeQueries {
    pub fn from_labels(labels: &[u32]) -> Self {
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (pos, &sv) in labels.iter().enumerate() {
            map.entry(sv).or_default().push(pos as u32);
        }
        let (ids, members) = map.into_iter().unzip();
        Self { ids, members }
    }

    pub fn query_count(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Groups voxel queries (linear indices at `res`) by subvolume.
pub fn group_by_subvolume(res: usize, r: usize, voxels: &[u32]) -> SubvolumeQueries {
    let labels: Vec<u32> = voxels
        .iter()
        .map(|&v| subvolume_of(res, r, unlinear(res, v as usize)))
        .collect();
    SubvolumeQueries::from_labels(&labels)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KVSelection {
    /// Sorted token indices per subvolume.
    pub tokens: BTreeMap<u32, Vec<usize>>,
    /// Query positions used as probes, per subvolume.
    pub probes: BTreeMap<u32, Vec<u32>>,
}

impl KVSelection {
    pub fn get(&self, sv: u32) -> Option<&[usize]> {
        self.tokens.get(&sv).map(Vec::as_slice)
    }

    pub fn probe_count(&self) -> usize {
        self.probes.values().map(Vec::len).sum()
    }
}

/// Stratified probe positions: the member list is split into `n_probe`
/// contiguous strata and one member is drawn from each.
fn pick_probes(members: &[u32], n_probe: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if members.len() <= n_probe {
        return members.to_vec();
    }
    (0..n_probe)
        .map(|s| {
            let lo = s * members.len() / n_probe;
            let hi = (s + 1) * members.len() / n_probe;
            members[rng.random_range(lo..hi)]
        })
        .collect()
}

/// Indices of the `k` largest scores, ties to the lower index, returned
/// ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn token_scores(q: Vec3, latents: &ToyVecsetLatents) -> Vec<f64> {
    let inv_tau = 1.0 / latents.tau();
    latents
        .tokens()
        .iter()
        .map(|t| -geom::dist2(q, t.anchor) * inv_tau)
        .collect()
}

/// Chooses tokens for every subvolume from its probe queries.
pub fn probe_and_select(
    latents: &ToyVecsetLatents,
    points: &[Vec3],
    groups: &SubvolumeQueries,
    cfg: &AkvsConfig,
    seed: u64,
) -> Result<KVSelection> {
    cfg.validate(Some(latents.len()))?;
    let per_sv: Vec<(u32, Vec<usize>, Vec<u32>)> = groups
        .ids
        .par_iter()
        .zip(groups.members.par_iter())
        .filter(|(_, members)| !members.is_empty())
        .map(|(&sv, members)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sv as u64);
            let probes = pick_probes(members, cfg.n_probe, &mut rng);
            let tokens = match cfg.mode {
                AkvsMode::MeanTopk => {
                    // The probe-mean of -|q - a|^2 / tau is the score at the probe
                    // centroid minus a token-independent spread term, so both rank alike.
                    let mut c = [0.0f64; 3];
                    for &p in &probes {
                        let q = points[p as usize];
                        (0..3).for_each(|d| c[d] += q[d]);
                    }
                    let inv = 1.0 / probes.len() as f64;
                    c.iter_mut().for_each(|v| *v *= inv);
                    top_k(&token_scores(c, latents), cfg.k)
                }
                AkvsMode::TopnMerge => {
                    let mut all: Vec<usize> = probes
                        .iter()
                        .flat_map(|&p| top_k(&token_scores(points[p as usize], latents), cfg.n))
                        .collect();
                    all.sort_unstable();
                    all.dedup();
                    all
                }
            };
            (sv, tokens, probes)
        })
        .collect();
    let mut sel = KVSelection::default();
    for (sv, tokens, probes) in per_sv {
        sel.tokens.insert(sv, tokens);
        sel.probes.insert(sv, probes);
    }
    Ok(sel)
}

/// A run of consecutive packed queries belonging to one subvolume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub subvolume: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedQueryBatch {
    pub queries: Vec<Vec3>,
    /// Original position of every packed query.
    pub origin: Vec<u32>,
    pub subvolume: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PackedQueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn push_run(&mut self, sv: u32, positions: &[u32], points: &[Vec3]) {
        let start = self.queries.len();
        for &p in positions {
            self.queries.push(points[p as usize]);
            self.origin.push(p);
            self.subvolume.push(sv);
        }
        self.segments.push(Segment {
            subvolume: sv,
            start,
            end: self.queries.len(),
        });
    }
}

/// Concatenates subvolumes greedily into batches of at most `pack_batch`
/// queries. A subvolume is split only when it alone exceeds `pack_batch`.
pub fn pack_queries(points: &[Vec3], groups: &SubvolumeQueries, pack_batch: usize) -> Vec<PackedQueryBatch> {
    let pack_batch = pack_batch.max(1);
    let mut out = Vec::new();
    let mut cur = PackedQueryBatch::default();
    for (&sv, members) in groups.ids.iter().zip(&groups.members) {
        if members.is_empty() {
            continue;
        }
        if members.len() > pack_batch {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            let mut chunks = members.chunks(pack_batch).peekable();
            while let Some(c) = chunks.next() {
                cur.push_run(sv, c, points);
                if chunks.peek().is_some() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            continue;
        }
        if cur.len() + members.len() > pack_batch {
            out.push(std::mem::take(&mut cur));
        }
        cur.push_run(sv, members, points);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scatters per-batch outputs back to original query order.
pub fn unpack<T: Copy + Default>(batches: &[PackedQueryBatch], outputs: &[Vec<T>], total: usize) -> Vec<T> {
    let mut out = vec![T::default(); total];
    for (b, vals) in batches.iter().zip(outputs) {
        for (&o, &v) in b.origin.iter().zip(vals) {
            out[o as usize] = v;
        }
    }
    out
}

/// Evaluates packed batches with per-subvolume token subsets and returns the
/// values in original query order.
pub fn akvs_eval(
    latents: &ToyVecsetLatents,
    batches: &[PackedQueryBatch],
    selection: &KVSelection,
    total: usize,
) -> Result<Vec<f32>> {
    let mut outputs = Vec::with_capacity(batches.len());
    for b in batches {
        let mut blocks: Vec<TokenBlock> = Vec::with_capacity(b.segments.len());
        let mut assignment = vec![0u32; b.len()];
        for (g, seg) in b.segments.iter().enumerate() {
            let tokens = selection.get(seg.subvolume).ok_or(Error::MissingSelection(seg.subvolume))?;
            blocks.push(TokenBlock::from_tokens(latents.tokens(), tokens.iter().copied()));
            assignment[seg.start..seg.end].fill(g as u32);
        }
        let refs: Vec<&TokenBlock> = blocks.iter().collect();
        outputs.push(eval_grouped(&b.queries, latents, &refs, &assignment));
    }
    Ok(unpack(batches, &outputs, total))
}

/// Softmax mass of `q` kept by `selected`, in double precision.
pub fn kept_mass(q: Vec3, latents: &ToyVecsetLatents, selected: &[usize]) -> f64 {
    let w = attention_weights(q, latents, None);
    selected.iter().map(|&i| w[i]).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeptMassQuantiles {
    pub samples: usize,
    pub min: f64,
    pub p01: f64,
    pub p05: f64,
    pub p50: f64,
    pub mean: f64,
    /// Fraction of samples keeping at least 0.999 of the mass.
    pub frac_ge_0999: f64,
}

impl KeptMassQuantiles {
    pub fn from_samples(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Self {
            samples: v.len(),
            min: v[0],
            p01: q(0.01),
            p05: q(0.05),
            p50: q(0.5),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            frac_ge_0999: v.iter().filter(|&&x| x >= 0.999).count() as f64 / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AkvsLevelStats {
    pub level: usize,
    pub res: usize,
    pub subvolumes: usize,
    pub queries: u64,
    pub probes: u64,
    /// Mean selected-token count over active subvolumes.
    pub mean_selected: f64,
    /// Query-weighted mean selected-token count.
    pub effective_m_kv: f64,
    pub attention_flops_full: u64,
    pub attention_flops_selected: u64,
    /// Scoring every token for every probe.
    pub probe_flops: u64,
    pub kept_mass: KeptMassQuantiles,
}

impl AkvsLevelStats {
    fn compute(
        level: usize,
        res: usize,
        latents: &ToyVecsetLatents,
        points: &[Vec3],
        groups: &SubvolumeQueries,
        sel: &KVSelection,
        cfg: &AkvsConfig,
    ) -> Self {
        let m = latents.len() as u64;
        let mut queries = 0u64;
        let mut selected_weighted = 0u64;
        let mut flops_sel = 0u64;
        let mut sizes = 0usize;
        for (sv, members) in groups.ids.iter().zip(&groups.members) {
            let k = sel.get(*sv).map_or(0, <[usize]>::len) as u64;
            queries += members.len() as u64;
            selected_weighted += k * members.len() as u64;
            flops_sel += members.len() as u64 * attention_flops(k, cfg.kv_width);
            sizes += k as usize;
        }
        let probes = sel.probe_count() as u64;
        let samples = kept_mass_sample(latents, points, groups, sel, cfg.kept_mass_samples);
        Self {
            level,
            res,
            subvolumes: groups.ids.len(),
            queries,
            probes,
            mean_selected: if groups.ids.is_empty() { 0.0 } else { sizes as f64 / groups.ids.len() as f64 },
            effective_m_kv: if queries == 0 { 0.0 } else { selected_weighted as f64 / queries as f64 },
            attention_flops_full: queries * attention_flops(m, cfg.kv_width),
            attention_flops_selected: flops_sel,
            probe_flops: probes * m * 2 * cfg.kv_width,
            kept_mass: KeptMassQuantiles::from_samples(samples),
        }
    }
}

/// Kept mass on an evenly strided sample of non-probe queries.
fn kept_mass_sample(
    latents: &ToyVecsetLatents,
    points: &[Vec3],
    groups: &SubvolumeQueries,
    sel: &KVSelection,
    budget: usize,
) -> Vec<f64> {
    let mut candidates: Vec<(u32, u32)> = Vec::new();
    for (sv, members) in groups.ids.iter().zip(&groups.members) {
        let probes = sel.probes.get(sv).map(Vec::as_slice).unwrap_or(&[]);
        candidates.extend(members.iter().filter(|p| !probes.contains(p)).map(|&p| (*sv, p)));
    }
    if candidates.is_empty() || budget == 0 {
        return Vec::new();
    }
    let stride = candidates.len().div_ceil(budget);
    candidates
        .par_iter()
        .step_by(stride)
        .map(|&(sv, p)| kept_mass(points[p as usize], latents, sel.get(sv).unwrap_or(&[])))
        .collect()
}

/// Query engine that routes every level through selection and packing.
pub struct AkvsEngine<'a> {
    pub latents: &'a ToyVecsetLatents,
    pub cfg: AkvsConfig,
}

impl QueryEngine for AkvsEngine<'_> {
    fn query(&self, level: usize, res: usize, bbox: &Bbox, voxels: &[u32]) -> Result<LevelQuery> {
        let r = self.cfg.r.min(res);
        let points: Vec<Vec3> = voxels
            .par_iter()
            .map(|&v| bbox.voxel_center(res, unlinear(res, v as usize)))
            .collect();
        let groups = group_by_subvolume(res, r, voxels);
        let seed = self.cfg.seed.wrapping_add(level as u64);
        let sel = probe_and_select(self.latents, &points, &groups, &self.cfg, seed)?;
        let batches = pack_queries(&points, &groups, self.cfg.pack_batch);
        let values = akvs_eval(self.latents, &batches, &sel, points.len())?;
        let stats = AkvsLevelStats::compute(level, res, self.latents, &points, &groups, &sel, &self.cfg);
        Ok(LevelQuery {
            values,
            akvs: Some(stats),
        })
    }
}

/// Hierarchical decoding with per-subvolume token selection at every level.
pub fn hierarchical_decode_akvs(latents: &ToyVecsetLatents, cfg: &DecodeConfig) -> Result<(DenseVolume, DecodeReport)> {
    let akvs = cfg
        .akvs
        .clone()
        .ok_or_else(|| Error::Config("key/value selection config missing".into()))?;
    akvs.validate(Some(latents.len()))?;
    let out = decode_with_engine(cfg, &AkvsEngine { latents, cfg: akvs })?;
    Ok((out.volume, out.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{build_surface_latents, eval_field, ShapeSpec};
    use crate::hierdec::hierarchical_decode;
    use proptest::prelude::*;

    fn sphere(m: usize) -> ToyVecsetLatents {
        build_surface_latents(&ShapeSpec::sphere(0.5), m, 1, 1e-3, 0.125).unwrap()
    }

    #[test]
    fn partition_examples() {
        assert!(partition_subvolumes(8, 1).unwrap().iter().all(|&s| s == 0));
        assert_eq!(subvolume_of(4, 2, [3, 0, 0]), 1);
        let p = partition_subvolumes(64, 16).unwrap();
        let mut counts = vec![0usize; 16 * 16 * 16];
        for s in p {
            counts[s as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 64));
        assert!(partition_subvolumes(4, 5).is_err());
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 4], 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn packing_examples() {
        let pts: Vec<Vec3> = (0..12).map(|i| [i as f64, 0.0, 0.0]).collect();
        let one = SubvolumeQueries::from_labels(&[0; 10]);
        let b = pack_queries(&pts, &one, 100);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
        let labels: Vec<u32> = (0..12).map(|i| i / 4).collect();
        let three = SubvolumeQueries::from_labels(&labels);
        let b = pack_queries(&pts, &three, 8);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].segments.len(), 2);
        assert_eq!(b[1].segments[0].subvolume, 2);
        let big = pack_queries(&pts, &SubvolumeQueries::from_labels(&[0; 12]), 5);
        assert_eq!(big.iter().map(PackedQueryBatch::len).collect::<Vec<_>>(), vec![5, 5, 2]);
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(labels in proptest::collection::vec(0u32..6, 1..80), batch in 1usize..20) {
            let pts: Vec<Vec3> = (0..labels.len()).map(|i| [i as f64, 0.0, 0.0]).collect();
            let groups = SubvolumeQueries::from_labels(&labels);
            let batches = pack_queries(&pts, &groups, batch);
            let outs: Vec<Vec<u32>> = batches.iter().map(|b| b.origin.clone()).collect();
            let back = unpack(&batches, &outs, labels.len());
            prop_assert_eq!(back, (0..labels.len() as u32).collect::<Vec<_>>());
            for b in &batches {
                prop_assert!(b.len() <= batch);
                let covered: usize = b.segments.iter().map(|s| s.end - s.start).sum();
                prop_assert_eq!(covered, b.len());
                for s in &b.segments {
                    prop_assert!(b.subvolume[s.start..s.end].iter().all(|&v| v == s.subvolume));
                }
            }
        }
    }

    #[test]
    fn k_equals_m_selects_everything() {
        let lat = sphere(64);
        let pts: Vec<Vec3> = (0..40).map(|i| [0.02 * i as f64 - 0.4, 0.1, 0.3]).collect();
        let groups = SubvolumeQueries::from_labels(&(0..40).map(|i| i % 3).collect::<Vec<_>>());
        for mode in [AkvsMode::MeanTopk, AkvsMode::TopnMerge] {
            let cfg = AkvsConfig {
                mode,
                k: 64,
                n: 64,
                ..Default::default()
            };
            let sel = probe_and_select(&lat, &pts, &groups, &cfg, 9).unwrap();
            for v in sel.tokens.values() {
                assert_eq!(v, &(0..64).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn mean_topk_matches_explicit_probe_mean() {
        let lat = sphere(256);
        let pts: Vec<Vec3> = (0..60)
            .map(|i| [0.013 * i as f64 - 0.4, 0.2 - 0.007 * i as f64, 0.35])
            .collect();
        let groups = SubvolumeQueries::from_labels(&(0..60).map(|i| i / 20).collect::<Vec<_>>());
        let cfg = AkvsConfig {
            k: 40,
            ..Default::default()
        };
        let sel = probe_and_select(&lat, &pts, &groups, &cfg, 2).unwrap();
        for (sv, probes) in &sel.probes {
            let mut mean = vec![0.0; lat.len()];
            for &p in probes {
                for (acc, s) in mean.iter_mut().zip(token_scores(pts[p as usize], &lat)) {
                    *acc += s / probes.len() as f64;
                }
            }
            assert_eq!(sel.tokens[sv], top_k(&mean, 40));
        }
    }

    #[test]
    fn single_probe_single_token_is_nearest_anchor() {
        let lat = sphere(128);
        let q = [0.31, -0.2, 0.33];
        let cfg = AkvsConfig {
            mode: AkvsMode::TopnMerge,
            n_probe: 1,
            n: 1,
            ..Default::default()
        };
        let groups = SubvolumeQueries::from_labels(&[5]);
        let sel = probe_and_select(&lat, &[q], &groups, &cfg, 0).unwrap();
        let nearest = (0..lat.len())
            .min_by(|&a, &b| {
                geom::dist2(q, lat.tokens()[a].anchor).total_cmp(&geom::dist2(q, lat.tokens()[b].anchor))
            })
            .unwrap();
        assert_eq!(sel.get(5).unwrap(), &[nearest]);
    }

    #[test]
    fn probes_are_deterministic_and_stratified() {
        let members: Vec<u32> = (0..100).collect();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let pa = pick_probes(&members, 8, &mut a);
        assert_eq!(pa, pick_probes(&members, 8, &mut b));
        for (s, p) in pa.iter().enumerate() {
            assert!((*p as usize) >= s * 100 / 8 && (*p as usize) < (s + 1) * 100 / 8);
        }
        assert_eq!(pick_probes(&members[..5], 8, &mut a), members[..5].to_vec());
    }

    #[test]
    fn eval_requires_selection_per_subvolume() {
        let lat = sphere(16);
        let pts = [[0.0; 3]];
        let groups = SubvolumeQueries::from_labels(&[3]);
        let batches = pack_queries(&pts, &groups, 10);
        assert!(matches!(
            akvs_eval(&lat, &batches, &KVSelection::default(), 1),
            Err(Error::MissingSelection(3))
        ));
    }

    #[test]
    fn full_selection_matches_unrestricted_eval_bitwise() {
        let lat = sphere(100);
        let pts: Vec<Vec3> = (0..300).map(|i| {
            let t = i as f64 * 0.21;
            [0.7 * t.sin(), 0.6 * t.cos(), 0.5 * (0.4 * t).sin()]
        }).collect();
        let groups = SubvolumeQueries::from_labels(&(0..300).map(|i| (i * 7 % 5) as u32).collect::<Vec<_>>());
        let cfg = AkvsConfig { k: 100, ..Default::default() };
        let sel = probe_and_select(&lat, &pts, &groups, &cfg, 1).unwrap();
        let batches = pack_queries(&pts, &groups, 64);
        let got = akvs_eval(&lat, &batches, &sel, pts.len()).unwrap();
        let want = eval_field(&pts, &lat, None);
        assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn error_bounded_by_discarded_mass() {
        let lat = sphere(512);
        let pts: Vec<Vec3> = (0..400).map(|i| {
            let t = i as f64 * 0.173;
            let r = 0.45 + 0.1 * (3.1 * t).sin();
            [r * t.sin() * (0.5 * t).cos(), r * t.cos() * (0.5 * t).cos(), r * (0.5 * t).sin()]
        }).collect();
        let labels: Vec<u32> = pts.iter().map(|p| subvolume_of(16, 4, [
            ((p[0] + 1.0) * 8.0) as usize, ((p[1] + 1.0) * 8.0) as usize, ((p[2] + 1.0) * 8.0) as usize])).collect();
        let groups = SubvolumeQueries::from_labels(&labels);
        let cfg = AkvsConfig { k: 32, ..Default::default() };
        let sel = probe_and_select(&lat, &pts, &groups, &cfg, 4).unwrap();
        let batches = pack_queries(&pts, &groups, 1000);
        let got = akvs_eval(&lat, &batches, &sel, pts.len()).unwrap();
        let full = eval_field(&pts, &lat, None);
        for (i, q) in pts.iter().enumerate() {
            let tokens = sel.get(labels[i]).unwrap();
            let w = attention_weights(*q, &lat, None);
            let top1 = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            if !tokens.contains(&top1) {
                continue;
            }
            let kept: f64 = tokens.iter().map(|&t| w[t]).sum();
            let err = (got[i] - full[i]).abs() as f64;
            assert!(err <= 2.0 * (1.0 - kept) + 1e-5, "err {err} kept {kept}");
        }
    }

    #[test]
    fn finer_partition_keeps_at_least_as_much_mass_on_own_probe() {
        let lat = sphere(256);
        let pts: Vec<Vec3> = (0..8).map(|i| [0.45, -0.2 + 0.05 * i as f64, 0.1]).collect();
        let cfg = AkvsConfig { k: 16, n_probe: 8, ..Default::default() };
        let coarse = probe_and_select(&lat, &pts, &SubvolumeQueries::from_labels(&[0; 8]), &cfg, 0).unwrap();
        for (i, q) in pts.iter().enumerate() {
            let fine = probe_and_select(&lat, &[*q], &SubvolumeQueries::from_labels(&[0]), &cfg, 0).unwrap();
            let m_fine = kept_mass(*q, &lat, fine.get(0).unwrap());
            let m_coarse = kept_mass(*q, &lat, coarse.get(0).unwrap());
            assert!(m_fine >= m_coarse - 1e-15, "probe {i}");
        }
    }

    #[test]
    fn akvs_decode_with_all_tokens_is_bitwise_hierarchical() {
        let lat = build_surface_latents(&ShapeSpec::torus(0.5, 0.15), 256, 2, 1e-3, 0.25).unwrap();
        let mut cfg = DecodeConfig { target_res: 64, base_res: 32, ..Default::default() };
        let (h, _) = hierarchical_decode(&lat, &cfg).unwrap();
        cfg.akvs = Some(AkvsConfig { r: 4, k: 256, ..Default::default() });
        let (a, rep) = hierarchical_decode_akvs(&lat, &cfg).unwrap();
        assert!(a.bitwise_eq(&h));
        for s in &rep.akvs {
            assert_eq!(s.attention_flops_full, s.attention_flops_selected);
        }
    }

    #[test]
    fn flops_accounting_identity() {
        let lat = sphere(512);
        let cfg = DecodeConfig {
            target_res: 64,
            base_res: 16,
            akvs: Some(AkvsConfig { r: 4, k: 64, ..Default::default() }),
            ..Default::default()
        };
        let (_, rep) = hierarchical_decode_akvs(&lat, &cfg).unwrap();
        assert!(!rep.akvs.is_empty());
        for s in &rep.akvs {
            // full minus selected equals the per-query attention-term gap summed over queries
            let per_query_gap = attention_flops(512, 512) - attention_flops(64, 512);
            assert_eq!(s.attention_flops_full - s.attention_flops_selected, s.queries * per_query_gap);
            assert_eq!(s.effective_m_kv, 64.0);
            assert!(s.kept_mass.samples > 0);
        }
        assert!(hierarchical_decode_akvs(&lat, &DecodeConfig::default()).is_err());
    }
}
