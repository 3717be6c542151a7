//! IoU metrics, run reports and the benchmark harness.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::akvs::{hierarchical_decode_akvs, AkvsConfig};
use crate::field::{attention_flops, build_surface_latents, ShapeSpec, ToyVecsetLatents, DEFAULT_TAU};
use crate::hierdec::{dense_decode_in, hierarchical_decode, DecodeConfig, DecodeReport, DenseVolume};
use crate::surface::OccupancyGrid;
use crate::{Error, Result};

/// Bumped whenever a report field changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `|a & b| / |a | b|`, 1.0 when both are empty.
pub fn volume_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(iou_of(a.bits.iter().copied().zip(b.bits.iter().copied())))
}

fn iou_of(pairs: impl Iterator<Item = (bool, bool)>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in pairs {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Occupancy IoU restricted to the band where either volume is within
/// `band_voxels * h_normalized` of `gamma`. `h_normalized` is the voxel size
/// in normalized tSDF units (voxel edge / truncation distance).
pub fn surface_iou(a: &DenseVolume, b: &DenseVolume, band_voxels: f64, h_normalized: f64, gamma: f32) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if band_voxels < 1.0 {
        return Err(Error::Config(format!("band must be at least one voxel, got {band_voxels}")));
    }
    let band = band_voxels * h_normalized;
    let g = gamma as f64;
    Ok(iou_of(a.values().iter().zip(b.values()).filter_map(|(&x, &y)| {
        let near = (x as f64 - g).abs().min((y as f64 - g).abs()) <= band;
        near.then_some((x <= gamma, y <= gamma))
    })))
}

/// Fraction of voxels whose occupancy agrees.
pub fn sign_agreement(a: &DenseVolume, b: &DenseVolume, gamma: f32) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.values().len().max(1);
    let same = a
        .values()
        .iter()
        .zip(b.values())
        .filter(|(x, y)| (**x <= gamma) == (**y <= gamma))
        .count();
    Ok(same as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeMode {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "hier")]
    Hier,
    #[serde(rename = "hier+akvs")]
    HierAkvs,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Dense, DecodeMode::Hier, DecodeMode::HierAkvs];
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Dense => "dense",
            DecodeMode::Hier => "hier",
            DecodeMode::HierAkvs => "hier+akvs",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(DecodeMode::Dense),
            "hier" => Ok(DecodeMode::Hier),
            "hier+akvs" | "hier_akvs" => Ok(DecodeMode::HierAkvs),
            other => Err(Error::Config(format!("unknown mode `{other}` (dense, hier, hier+akvs)"))),
        }
    }
}

/// Runs one decode. `cfg.akvs` must be set for [`DecodeMode::HierAkvs`].
pub fn decode(mode: DecodeMode, latents: &ToyVecsetLatents, cfg: &DecodeConfig) -> Result<(DenseVolume, DecodeReport)> {
    match mode {
        DecodeMode::Dense => Ok(dense_decode_in(latents, cfg.target_res, cfg.bbox)),
        DecodeMode::Hier => hierarchical_decode(latents, cfg),
        DecodeMode::HierAkvs => hierarchical_decode_akvs(latents, cfg),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsTotals {
    /// Attention-term FLOPs had every query attended to all tokens.
    pub attention_full: u64,
    pub attention_selected: u64,
    pub probe: u64,
    /// `1 - (selected + probe) / full`.
    pub reduction: f64,
}

impl FlopsTotals {
    pub fn from_report(report: &DecodeReport, m_tokens: usize, kv_width: u64) -> Self {
        let full = report.total_queries * attention_flops(m_tokens as u64, kv_width);
        let (selected, probe) = if report.akvs.is_empty() {
            (full, 0)
        } else {
            (
                report.akvs.iter().map(|s| s.attention_flops_selected).sum(),
                report.akvs.iter().map(|s| s.probe_flops).sum(),
            )
        };
        let reduction = if full == 0 {
            0.0
        } else {
            (1.0 - (selected + probe) as f64 / full as f64).max(0.0)
        };
        Self {
            attention_full: full,
            attention_selected: selected,
            probe,
            reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Decode wall time of every repetition.
    pub decode_seconds: Vec<f64>,
    pub decode_median_seconds: f64,
}

impl Timings {
    pub fn from_samples(v: Vec<f64>) -> Self {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            decode_seconds: v,
            decode_median_seconds: median,
        }
    }
}

/// One JSON line of a benchmark or decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub shape: String,
    pub mode: DecodeMode,
    pub seed: u64,
    pub m_tokens: usize,
    pub tau: f64,
    pub trunc: f64,
    /// Resolved configuration as run.
    pub config: serde_json::Value,
    pub decode: DecodeReport,
    /// Against the dense decode of the same field, when one was available.
    pub v_iou: Option<f64>,
    pub s_iou: Option<f64>,
    pub sign_agreement: Option<f64>,
    pub s_iou_band_voxels: f64,
    pub flops: FlopsTotals,
    pub timings: Timings,
}

impl RunReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Default band for surface IoU, in target voxels.
pub const S_IOU_BAND: f64 = 2.0;

/// Compares `vol` with the dense `reference`: (V-IoU, S-IoU, sign agreement).
pub fn compare_to_reference(vol: &DenseVolume, reference: &DenseVolume, trunc: f64, gamma: f32) -> Result<(f64, f64, f64)> {
    let v = volume_iou(&crate::surface::sign_volume(vol, gamma), &crate::surface::sign_volume(reference, gamma))?;
    let h = vol.bbox().extent()[0] / vol.dims()[0] as f64;
    let s = surface_iou(vol, reference, S_IOU_BAND, h / trunc, gamma)?;
    let a = sign_agreement(vol, reference, gamma)?;
    Ok((v, s, a))
}

/// Decodes `repeat` times (at least once) and reports the median wall time.
#[allow(clippy::too_many_arguments)]
pub fn run_mode(
    shape: &ShapeSpec,
    mode: DecodeMode,
    latents: &ToyVecsetLatents,
    cfg: &DecodeConfig,
    seed: u64,
    repeat: usize,
    reference: Option<&DenseVolume>,
    config_echo: serde_json::Value,
) -> Result<(DenseVolume, RunReport)> {
    let mut times = Vec::new();
    let mut last = None;
    for _ in 0..repeat.max(1) {
        let t = Instant::now();
        let out = decode(mode, latents, cfg)?;
        times.push(t.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (vol, decode_report) = last.expect("at least one repetition");
    let (v_iou, s_iou, agree) = match reference {
        Some(r) => {
            let (v, s, a) = compare_to_reference(&vol, r, latents.trunc(), cfg.gamma)?;
            (Some(v), Some(s), Some(a))
        }
        None => (None, None, None),
    };
    let kv_width = cfg.akvs.as_ref().map_or(AkvsConfig::default().kv_width, |a| a.kv_width);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        shape: shape.to_string(),
        mode,
        seed,
        m_tokens: latents.len(),
        tau: latents.tau(),
        trunc: latents.trunc(),
        config: config_echo,
        flops: FlopsTotals::from_report(&decode_report, latents.len(), kv_width),
        decode: decode_report,
        v_iou,
        s_iou,
        sign_agreement: agree,
        s_iou_band_voxels: S_IOU_BAND,
        timings: Timings::from_samples(times),
    };
    Ok((vol, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSuite {
    pub name: String,
    pub shapes: Vec<String>,
    pub modes: Vec<DecodeMode>,
    pub m_tokens: usize,
    pub tau: f64,
    /// Truncation distance; derived from the base resolution when absent.
    pub trunc: Option<f64>,
    pub repeat: usize,
    pub decode: DecodeConfig,
}

impl Default for BenchSuite {
    fn default() -> Self {
        Self::named("default").expect("built-in suite")
    }
}

impl BenchSuite {
    /// `default`: sphere, torus, box and a thin plate. `full` adds the
    /// two-sphere union.
    pub fn named(name: &str) -> Result<Self> {
        let mut shapes: Vec<String> = ["sphere:r=0.5", "torus:R=0.5,r=0.15", "box:a=0.4", "plate:h=0.01"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        match name {
            "default" => {}
            "full" => shapes.push("union2:r=0.35,s=0.25,d=0.25".into()),
            other => return Err(Error::Config(format!("unknown suite `{other}` (default, full)"))),
        }
        Ok(Self {
            name: name.to_string(),
            shapes,
            modes: DecodeMode::ALL.to_vec(),
            m_tokens: 1024,
            tau: DEFAULT_TAU,
            trunc: None,
            repeat: 3,
            decode: DecodeConfig {
                akvs: Some(AkvsConfig::default()),
                ..Default::default()
            },
        })
    }

    pub fn parsed_shapes(&self) -> Result<Vec<ShapeSpec>> {
        self.shapes.iter().map(|s| s.parse()).collect()
    }

    pub fn resolved_trunc(&self) -> f64 {
        self.trunc.unwrap_or_else(|| self.decode.default_trunc())
    }
}

/// Runs every (shape, seed, mode) of the suite, writing one JSON line per run
/// to `sink` and flushing after each so partial results survive failures.
pub fn bench_run<W: Write>(suite: &BenchSuite, seeds: &[u64], mut sink: W) -> Result<Vec<RunReport>> {
    let shapes = suite.parsed_shapes()?;
    let trunc = suite.resolved_trunc();
    let mut out = Vec::new();
    let mut cfg = suite.decode.clone();
    for shape in &shapes {
        for &seed in seeds {
            let latents = build_surface_latents(shape, suite.m_tokens, seed, suite.tau, trunc)?;
            if let Some(a) = cfg.akvs.as_mut() {
                a.seed = seed;
                a.k = a.k.min(latents.len());
                a.n = a.n.min(latents.len());
            }
            let echo = serde_json::json!({ "suite": suite, "resolved_decode": &cfg });
            let needs_ref = suite.modes.iter().any(|m| *m != DecodeMode::Dense);
            let mut reference: Option<DenseVolume> = None;
            let mut order = suite.modes.clone();
            // the dense run doubles as the reference, so do it first
            order.sort_by_key(|m| *m != DecodeMode::Dense);
            for mode in order {
                let (vol, mut report) =
                    run_mode(shape, mode, &latents, &cfg, seed, suite.repeat, reference.as_ref(), echo.clone())?;
                if mode == DecodeMode::Dense {
                    report.v_iou = Some(1.0);
                    report.s_iou = Some(1.0);
                    report.sign_agreement = Some(1.0);
                    if needs_ref {
                        reference = Some(vol);
                    }
                } else if reference.is_none() {
                    let (r, _) = dense_decode_in(&latents, cfg.target_res, cfg.bbox);
                    let (v, s, a) = compare_to_reference(&vol, &r, trunc, cfg.gamma)?;
                    report.v_iou = Some(v);
                    report.s_iou = Some(s);
                    report.sign_agreement = Some(a);
                    reference = Some(r);
                }
                writeln!(sink, "{}", report.to_json_line()?)?;
                sink.flush()?;
                out.push(report);
            }
        }
    }
    Ok(out)
}

pub fn write_csv_summary<W: Write>(reports: &[RunReport], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "shape",
        "mode",
        "seed",
        "target_res",
        "m_tokens",
        "total_queries",
        "reduction",
        "v_iou",
        "s_iou",
        "median_seconds",
        "attention_flops_full",
        "attention_flops_selected",
        "probe_flops",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.shape.clone(),
            r.mode.to_string(),
            r.seed.to_string(),
            r.decode.resolutions.last().copied().unwrap_or(0).to_string(),
            r.m_tokens.to_string(),
            r.decode.total_queries.to_string(),
            r.decode.reduction.to_string(),
            opt(r.v_iou),
            opt(r.s_iou),
            r.timings.decode_median_seconds.to_string(),
            r.flops.attention_full.to_string(),
            r.flops.attention_selected.to_string(),
            r.flops.probe.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table: mode, queries, reduction, V-IoU, median time.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut s = format!(
        "{:<28} {:<10} {:>12} {:>10} {:>9} {:>11}\n",
        "shape", "mode", "queries", "reduction", "V-IoU", "median_s"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<28} {:<10} {:>12} {:>10.4} {:>9} {:>11.3}\n",
            r.shape,
            r.mode.to_string(),
            r.decode.total_queries,
            r.decode.reduction,
            r.v_iou.map_or("-".to_string(), |v| format!("{v:.5}")),
            r.timings.decode_median_seconds
        ));
    }
    s
}
