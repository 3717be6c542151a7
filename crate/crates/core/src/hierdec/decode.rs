//! The hierarchical decoding loop and the dense baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::volume::{overlay, upsample, DenseVolume, LevelVolume};
use super::voxelset::{dilate, expand, find_intersect, find_near, unlinear, SparseVoxelSet};
use crate::akvs::{AkvsConfig, AkvsLevelStats};
use crate::field::{eval_block, ToyVecsetLatents};
use crate::geom::{Bbox, Vec3};
use crate::{Error, Result};

/// Points evaluated per field call.
const CHUNK: usize = 1 << 16;

/// How the last refinement step is taken when `final_double_expand` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalExpand {
    /// Drop the penultimate level and expand the selection by 4x at once.
    Jump4,
    /// Keep the penultimate level unqueried: expand 2x, dilate, expand 2x.
    Staged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub target_res: usize,
    pub base_res: usize,
    /// Isosurface level; a voxel is inside when its value is `<= gamma`.
    pub gamma: f32,
    /// Voxels with `|tSDF| < eta` join the refinement set.
    pub eta: f32,
    pub dilation_radius: usize,
    /// Turns the near-surface selection off entirely (ablation).
    pub find_near: bool,
    /// Skip the near-surface selection when refining into the target level.
    pub final_skip_findnear: bool,
    /// Reach the target from two levels below in one refinement step; see
    /// [`FinalExpand`].
    pub final_double_expand: bool,
    pub final_expand: FinalExpand,
    pub bbox: Bbox,
    pub akvs: Option<AkvsConfig>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            target_res: 256,
            base_res: 64,
            gamma: 0.0,
            eta: 0.95,
            dilation_radius: 1,
            find_near: true,
            final_skip_findnear: true,
            final_double_expand: false,
            final_expand: FinalExpand::Jump4,
            bbox: Bbox::unit(),
            akvs: None,
        }
    }
}

/// One entry of the executed schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelPlan {
    pub res: usize,
    pub queried: bool,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.gamma && self.gamma < self.eta && self.eta <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= gamma < eta <= 1, got gamma {} eta {}",
                self.gamma, self.eta
            )));
        }
        super::get_resolutions(self.target_res, self.base_res)?;
        if let Some(a) = &self.akvs {
            a.validate(None)?;
        }
        Ok(())
    }

    /// Truncation distance that makes `eta = 0.95` select a band of about
    /// four base voxels.
    pub fn default_trunc(&self) -> f64 {
        4.0 * (self.bbox.extent()[0] / self.base_res as f64)
    }

    pub fn plan(&self) -> Result<Vec<LevelPlan>> {
        let levels = super::get_resolutions(self.target_res, self.base_res)?;
        let mut plan: Vec<LevelPlan> = levels
            .iter()
            .map(|&res| LevelPlan { res, queried: true })
            .collect();
        let n = plan.len();
        if self.final_double_expand && n >= 3 {
            match self.final_expand {
                FinalExpand::Jump4 => {
                    plan.remove(n - 2);
                }
                FinalExpand::Staged => plan[n - 2].queried = false,
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub resolutions: Vec<usize>,
    pub per_level_queries: Vec<u64>,
    pub total_queries: u64,
    /// `target^3`.
    pub dense_equivalent: u64,
    /// `1 - total / dense_equivalent`, floored at 0.
    pub reduction: f64,
    pub stages: Vec<StageTiming>,
    /// Selection statistics per queried level; empty without key/value
    /// selection.
    pub akvs: Vec<AkvsLevelStats>,
}

impl DecodeReport {
    fn new(target: usize) -> Self {
        Self {
            resolutions: Vec::new(),
            per_level_queries: Vec::new(),
            total_queries: 0,
            dense_equivalent: (target as u64).pow(3),
            reduction: 0.0,
            stages: Vec::new(),
            akvs: Vec::new(),
        }
    }

    fn record_level(&mut self, res: usize, queries: usize, stats: Option<AkvsLevelStats>) {
        self.resolutions.push(res);
        self.per_level_queries.push(queries as u64);
        self.total_queries += queries as u64;
        self.akvs.extend(stats);
    }

    fn time(&mut self, stage: impl Into<String>, since: Instant) {
        self.stages.push(StageTiming {
            stage: stage.into(),
            seconds: since.elapsed().as_secs_f64(),
        });
    }

    fn finish(&mut self) {
        self.reduction = (1.0 - self.total_queries as f64 / self.dense_equivalent as f64).max(0.0);
    }

    /// Wall time of every query stage.
    pub fn query_seconds(&self) -> f64 {
        self.stages
            .iter()
            .filter(|s| s.stage.starts_with("query"))
            .map(|s| s.seconds)
            .sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }
}

/// Values for one level's query pass.
#[derive(Debug, Clone)]
pub struct LevelQuery {
    pub values: Vec<f32>,
    pub akvs: Option<AkvsLevelStats>,
}

/// Evaluates the field at voxel centers of one level.
pub trait QueryEngine: Sync {
    /// `voxels` are ascending linear indices into the `res^3` grid; values
    /// are returned in the same order.
    fn query(&self, level: usize, res: usize, bbox: &Bbox, voxels: &[u32]) -> Result<LevelQuery>;
}

/// Attends to every token.
pub struct FullEngine<'a> {
    pub latents: &'a ToyVecsetLatents,
}

impl QueryEngine for FullEngine<'_> {
    fn query(&self, _level: usize, res: usize, bbox: &Bbox, voxels: &[u32]) -> Result<LevelQuery> {
        let mut values = Vec::with_capacity(voxels.len());
        let mut pts: Vec<Vec3> = Vec::with_capacity(CHUNK.min(voxels.len()));
        for chunk in voxels.chunks(CHUNK) {
            pts.clear();
            pts.extend(chunk.iter().map(|&i| bbox.voxel_center(res, unlinear(res, i as usize))));
            values.extend(eval_block(&pts, self.latents, self.latents.full_block()));
        }
        Ok(LevelQuery { values, akvs: None })
    }
}

/// Output of [`decode_with_engine`].
#[derive(Debug, Clone)]
pub struct HierarchicalDecode {
    pub volume: DenseVolume,
    pub report: DecodeReport,
    pub levels: Vec<LevelVolume>,
}

/// Runs the hierarchy with full attention.
pub fn hierarchical_decode(latents: &ToyVecsetLatents, cfg: &DecodeConfig) -> Result<(DenseVolume, DecodeReport)> {
    let out = decode_with_engine(cfg, &FullEngine { latents })?;
    Ok((out.volume, out.report))
}

pub fn decode_with_engine<E: QueryEngine + ?Sized>(cfg: &DecodeConfig, engine: &E) -> Result<HierarchicalDecode> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let bbox = cfg.bbox;
    let mut report = DecodeReport::new(cfg.target_res);

    let base = plan[0].res;
    let t = Instant::now();
    let all: Vec<u32> = (0..(base * base * base) as u32).collect();
    let q = engine.query(0, base, &bbox, &all)?;
    report.time(format!("query_{base}"), t);
    report.record_level(base, all.len(), q.akvs);
    let mut grid = q.values.clone();
    let mut levels = vec![LevelVolume::dense(base, q.values)];

    let mut res = base;
    let mut carried: Option<SparseVoxelSet> = None;
    for i in 1..plan.len() {
        let next = plan[i].res;
        let t = Instant::now();
        let selected = match carried.take() {
            Some(s) => dilate(&s, cfg.dilation_radius),
            None => {
                let vol = DenseVolume::new([res; 3], bbox, grid)?;
                let mut s = find_intersect(&vol, cfg.gamma);
                let is_final = i + 1 == plan.len();
                let skip_near = cfg.final_skip_findnear && is_final;
                if cfg.find_near && !skip_near {
                    s.union_with(&find_near(&vol, cfg.eta));
                }
                grid = vol.into_values();
                dilate(&s, cfg.dilation_radius)
            }
        };
        let fine = expand(&selected, res, next)?;
        report.time(format!("select_{next}"), t);

        let level = if plan[i].queried {
            let idx = fine.linear_indices();
            let t = Instant::now();
            let q = engine.query(i, next, &bbox, &idx)?;
            report.time(format!("query_{next}"), t);
            report.record_level(next, idx.len(), q.akvs);
            LevelVolume::sparse(next, idx.into_iter().zip(q.values).collect())
        } else {
            report.record_level(next, 0, None);
            carried = Some(fine);
            LevelVolume::sparse(next, Vec::new())
        };
        let t = Instant::now();
        grid = upsample(&grid, res, next);
        overlay(&mut grid, &level);
        report.time(format!("assemble_{next}"), t);
        levels.push(level);
        res = next;
    }
    report.finish();
    let volume = DenseVolume::new([res; 3], bbox, grid)?;
    Ok(HierarchicalDecode { volume, report, levels })
}

/// Evaluates every voxel center of a `res^3` grid over `[-1, 1]^3`.
pub fn dense_decode(latents: &ToyVecsetLatents, res: usize) -> (DenseVolume, DecodeReport) {
    dense_decode_in(latents, res, Bbox::unit())
}

pub fn dense_decode_in(latents: &ToyVecsetLatents, res: usize, bbox: Bbox) -> (DenseVolume, DecodeReport) {
    let n = res * res * res;
    let mut report = DecodeReport::new(res);
    let t = Instant::now();
    let mut values = Vec::with_capacity(n);
    let mut pts: Vec<Vec3> = Vec::with_capacity(CHUNK.min(n));
    for start in (0..n).step_by(CHUNK) {
        pts.clear();
        pts.extend((start..(start + CHUNK).min(n)).map(|i| bbox.voxel_center(res, unlinear(res, i))));
        values.extend(eval_block(&pts, latents, latents.full_block()));
    }
    report.time(format!("query_{res}"), t);
    report.record_level(res, n, None);
    report.finish();
    let volume = DenseVolume::new([res; 3], bbox, values).expect("sized by construction");
    (volume, report)
}
