use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use fvdm_core::field::{build_surface_latents, ShapeSpec};
use fvdm_core::hierdec::dense_decode_in;
use fvdm_core::metrics::{bench_run, compare_to_reference, run_mode, summary_table, write_csv_summary, BenchSuite, DecodeMode, RunReport};
use fvdm_core::surface::{boundary_edge_count, marching_cubes, write_obj};
use serde::Serialize;

use crate::config::CliConfig;
use crate::{create_parent, default_out_dir, write_file, CliError};

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Shape spec, e.g. `sphere:r=0.5` or `torus:R=0.5,r=0.15`.
    #[arg(long)]
    shape: ShapeSpec,
    /// dense, hier or hier+akvs.
    #[arg(long, default_value = "hier")]
    mode: DecodeMode,
    /// Seed of the surface samples behind the latent tokens.
    #[arg(long)]
    seed: u64,
    /// Target resolution.
    #[arg(long)]
    res: Option<usize>,
    /// Base resolution of hierarchical decoding.
    #[arg(long)]
    base: Option<usize>,
    /// Latent token count.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    trunc: Option<f64>,
    /// Subvolumes per axis for key/value selection.
    #[arg(long)]
    subvol: Option<usize>,
    /// Tokens kept per subvolume.
    #[arg(long)]
    topk: Option<usize>,
    /// Mesh output (OBJ).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the assembled volume (FVDM1).
    #[arg(long)]
    volume: Option<PathBuf>,
    /// JSON report; defaults to the mesh path with a `.json` extension.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Decode densely as well and report IoU against it.
    #[arg(long)]
    compare_dense: bool,
}

#[derive(Debug, Serialize)]
struct MeshStats {
    vertices: usize,
    triangles: usize,
    boundary_edges: usize,
    euler_characteristic: i64,
}

#[derive(Debug, Serialize)]
struct DecodeOutput {
    #[serde(flatten)]
    run: RunReport,
    mesh: MeshStats,
    mesh_path: PathBuf,
    volume_path: Option<PathBuf>,
}

pub fn decode(a: DecodeArgs, mut config: CliConfig) -> Result<(), CliError> {
    let field = &mut config.field;
    if let Some(m) = a.tokens {
        field.m_tokens = m;
    }
    if let Some(t) = a.tau {
        field.tau = t;
    }
    if a.trunc.is_some() {
        field.trunc = a.trunc;
    }
    let cfg = &mut config.decode;
    if let Some(r) = a.res {
        cfg.target_res = r;
    }
    match a.base {
        Some(b) => cfg.base_res = b,
        // dense decoding has no base level; keep the default schedule valid
        None if a.mode == DecodeMode::Dense => cfg.base_res = cfg.base_res.min(cfg.target_res),
        None => {}
    }
    if let Some(r) = a.subvol {
        config.akvs.r = r;
    }
    if let Some(k) = a.topk {
        config.akvs.k = k;
    }
    config.akvs.seed = a.seed;
    cfg.akvs = (a.mode == DecodeMode::HierAkvs).then(|| config.akvs.clone());
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let trunc = config.field.trunc.unwrap_or_else(|| cfg.default_trunc());
    let latents = build_surface_latents(&a.shape, config.field.m_tokens, a.seed, config.field.tau, trunc)?;
    if let Some(ak) = &cfg.akvs {
        ak.validate(Some(latents.len())).map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let echo = serde_json::json!({
        "shape": a.shape.to_string(),
        "mode": a.mode,
        "seed": a.seed,
        "field": { "m_tokens": config.field.m_tokens, "tau": config.field.tau, "trunc": trunc },
        "decode": cfg,
    });
    let reference = a
        .compare_dense
        .then(|| dense_decode_in(&latents, cfg.target_res, cfg.bbox).0);
    let (vol, mut run) = run_mode(&a.shape, a.mode, &latents, cfg, a.seed, 1, reference.as_ref(), echo)?;
    if a.mode == DecodeMode::Dense && reference.is_some() {
        let (v, s, g) = compare_to_reference(&vol, reference.as_ref().unwrap(), trunc, cfg.gamma)?;
        run.v_iou = Some(v);
        run.s_iou = Some(s);
        run.sign_agreement = Some(g);
    }
    let mesh = marching_cubes(&vol, cfg.gamma)?;

    let mesh_path = a
        .out
        .unwrap_or_else(|| default_out_dir().join(format!("{}_{}.obj", a.shape.name(), mode_slug(a.mode))));
    create_parent(&mesh_path)?;
    let f = File::create(&mesh_path).map_err(|e| CliError::io(&mesh_path, e))?;
    write_obj(&mesh, BufWriter::new(f))?;
    if let Some(p) = &a.volume {
        create_parent(p)?;
        let f = File::create(p).map_err(|e| CliError::io(p, e))?;
        vol.write_fvdm1(BufWriter::new(f))?;
    }
    let report_path = a.report.unwrap_or_else(|| mesh_path.with_extension("json"));
    let out = DecodeOutput {
        mesh: MeshStats {
            vertices: mesh.vertices.len(),
            triangles: mesh.triangles.len(),
            boundary_edges: boundary_edge_count(&mesh),
            euler_characteristic: mesh.euler_characteristic(),
        },
        run,
        mesh_path: mesh_path.clone(),
        volume_path: a.volume.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&out)?;
    json.push(b'\n');
    write_file(&report_path, &json)?;
    println!(
        "{} {}: {} queries (reduction {:.4}), {} triangles, {} boundary edges, {:.3}s -> {}",
        out.run.shape,
        out.run.mode,
        out.run.decode.total_queries,
        out.run.decode.reduction,
        out.mesh.triangles,
        out.mesh.boundary_edges,
        out.run.timings.decode_median_seconds,
        mesh_path.display()
    );
    Ok(())
}

fn mode_slug(m: DecodeMode) -> &'static str {
    match m {
        DecodeMode::Dense => "dense",
        DecodeMode::Hier => "hier",
        DecodeMode::HierAkvs => "hier_akvs",
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Built-in suite: default or full. A `[bench]` config table replaces it.
    #[arg(long, default_value = "default")]
    suite: String,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seed: Vec<u64>,
    /// Decodes per run; the median wall time is reported.
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    base: Option<usize>,
    /// Comma-separated subset of modes.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<DecodeMode>,
    /// Shapes replacing the suite's list.
    #[arg(long = "shape")]
    shapes: Vec<ShapeSpec>,
    /// JSON-lines output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn bench(a: BenchArgs, config: CliConfig) -> Result<(), CliError> {
    let mut suite = match config.bench {
        Some(s) => s,
        None => BenchSuite::named(&a.suite).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    if let Some(r) = a.repeat {
        suite.repeat = r;
    }
    if let Some(m) = a.tokens {
        suite.m_tokens = m;
    }
    if let Some(r) = a.res {
        suite.decode.target_res = r;
    }
    if let Some(b) = a.base {
        suite.decode.base_res = b;
    }
    if !a.modes.is_empty() {
        suite.modes = a.modes;
    }
    if !a.shapes.is_empty() {
        suite.shapes = a.shapes.iter().map(ToString::to_string).collect();
    }
    suite.decode.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    suite.parsed_shapes().map_err(|e| CliError::Usage(e.to_string()))?;
    let path = a
        .out
        .unwrap_or_else(|| default_out_dir().join(format!("bench_{}.jsonl", suite.name)));
    create_parent(&path)?;
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut sink = BufWriter::new(f);
    let reports = bench_run(&suite, &a.seed, &mut sink)?;
    sink.flush().map_err(|e| CliError::io(&path, e))?;
    if let Some(p) = &a.csv {
        create_parent(p)?;
        let f = File::create(p).map_err(|e| CliError::io(p, e))?;
        write_csv_summary(&reports, BufWriter::new(f))?;
    }
    print!("{}", summary_table(&reports));
    println!("{} runs -> {}", reports.len(), path.display());
    Ok(())
}
