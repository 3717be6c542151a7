use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use fvdm_distill::ckpt::Checkpoint;
use fvdm_distill::data::N_CLASSES;
use fvdm_distill::eval::{student_distance, teacher_reference, EvalSet};
use fvdm_distill::flow::{gaussian_noise, ode_solve, student_sample, TeacherField};
use fvdm_distill::train::{
    adversarial_finetune, cfd_train, guidance_distill, train_teacher, CfdLoss, CfdTeacher, SolverTeacher, StageLog,
};
use fvdm_distill::{DistillConfig, FlowModel, ToyDist};
use serde::Serialize;

use crate::config::CliConfig;
use crate::{default_out_dir, write_file, CliError};

#[derive(Debug, Subcommand)]
pub enum Stage {
    /// Train the class-conditional flow-matching teacher.
    Teacher(Common),
    /// Guidance distillation into a w-conditioned student (needs teacher).
    Gd(Common),
    /// Multi-phase consistency distillation (needs gd, or teacher with
    /// --no-gd-warmup).
    Cfd(CfdArgs),
    /// Adversarial finetuning on teacher features (needs cfd).
    Adv(Common),
    /// Draw samples from a stage's model.
    Sample(SampleArgs),
    /// Energy distances of every available stage against held-out data.
    Eval(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    seed: u64,
    /// Checkpoint directory; defaults to `$FVDM_OUT_DIR/distill`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Directory prerequisites are read from; defaults to --dir.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Multiplies every stage's step count.
    #[arg(long)]
    steps_scale: Option<f64>,
    #[arg(long)]
    dist: Option<ToyDist>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Huber,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Guided,
    GuidanceStudent,
}

#[derive(Debug, Args)]
pub struct CfdArgs {
    #[command(flatten)]
    common: Common,
    /// Start from the teacher instead of the guidance-distilled student.
    #[arg(long)]
    no_gd_warmup: bool,
    /// Copy the student into the target each step instead of averaging.
    #[arg(long)]
    no_ema: bool,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Skip the single-phase finetune after the multi-phase run.
    #[arg(long)]
    no_phase1: bool,
    /// Network taking the solver step.
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleFrom {
    Teacher,
    Gd,
    Cfd,
    Adv,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Function evaluations (Euler steps for the teacher).
    #[arg(long, default_value_t = 5)]
    nfe: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Stage to sample; defaults to the latest one present.
    #[arg(long, value_enum)]
    from: Option<SampleFrom>,
    /// Guidance strength; defaults to the configured constant. The teacher
    /// samples conditionally unless this is given.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    cfg: DistillConfig,
    dir: PathBuf,
    input: PathBuf,
}

impl Ctx {
    fn new(c: &Common, config: &CliConfig) -> Result<Self, CliError> {
        let mut cfg = config.distill.clone();
        cfg.seed = c.seed;
        if let Some(d) = c.dist {
            cfg.dist = d;
        }
        if let Some(f) = c.steps_scale {
            if !(f > 0.0) {
                return Err(CliError::Usage(format!("--steps-scale must be positive, got {f}")));
            }
            cfg = cfg.scaled_steps(f);
        }
        let dir = c.dir.clone().unwrap_or_else(|| default_out_dir().join("distill"));
        let input = c.input_dir.clone().unwrap_or_else(|| dir.clone());
        Ok(Self { cfg, dir, input })
    }

    fn validate(&self) -> Result<(), CliError> {
        self.cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    fn ckpt_path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.ckpt"))
    }

    /// Loads a prerequisite, looking in the input directory first and then
    /// in the output directory.
    fn load(&self, stage: &str) -> Result<Checkpoint, CliError> {
        for d in [&self.input, &self.dir] {
            let p = Self::ckpt_path(d, stage);
            if p.exists() {
                return Ok(Checkpoint::load(&p)?);
            }
        }
        Err(fvdm_distill::Error::MissingStage(stage.to_string()).into())
    }

    fn has(&self, stage: &str) -> bool {
        [&self.input, &self.dir].iter().any(|d| Self::ckpt_path(d, stage).exists())
    }

    fn save(&self, ckpt: &Checkpoint) -> Result<PathBuf, CliError> {
        let p = Self::ckpt_path(&self.dir, &ckpt.echo.stage);
        ckpt.save(&p)?;
        Ok(p)
    }

    fn checkpoint(&self, stage: &str) -> Result<Checkpoint, CliError> {
        Ok(Checkpoint::new(stage, self.cfg.seed, serde_json::to_value(&self.cfg)?))
    }

    /// Appends the stage log to `train_log.jsonl` in the output directory.
    fn log(&self, log: &StageLog) -> Result<(), CliError> {
        let p = self.dir.join("train_log.jsonl");
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| CliError::io(&p, e))?;
        for r in &log.records {
            let mut v = serde_json::to_value(r)?;
            v["seed"] = self.cfg.seed.into();
            writeln!(f, "{v}").map_err(|e| CliError::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct StageSummary<'a> {
    stage: &'a str,
    seed: u64,
    checkpoint: PathBuf,
    initial_eval: Option<f64>,
    final_eval: Option<f64>,
}

fn finish(ctx: &Ctx, ckpt: &Checkpoint, log: &StageLog) -> Result<(), CliError> {
    let path = ctx.save(ckpt)?;
    ctx.log(log)?;
    let s = StageSummary {
        stage: &ckpt.echo.stage,
        seed: ctx.cfg.seed,
        checkpoint: path,
        initial_eval: log.initial_eval,
        final_eval: log.final_eval,
    };
    println!("{}", serde_json::to_string(&s)?);
    Ok(())
}

pub fn run(stage: Stage, config: CliConfig) -> Result<(), CliError> {
    match stage {
        Stage::Teacher(c) => {
            let ctx = Ctx::new(&c, &config)?;
            ctx.validate()?;
            let (model, log) = train_teacher(&ctx.cfg)?;
            let mut ck = ctx.checkpoint("teacher")?;
            ck.push_model("model", &model);
            finish(&ctx, &ck, &log)
        }
        Stage::Gd(c) => {
            let ctx = Ctx::new(&c, &config)?;
            ctx.validate()?;
            let teacher = ctx.load("teacher")?.model("model")?;
            let (model, log) = guidance_distill(&teacher, &ctx.cfg)?;
            let mut ck = ctx.checkpoint("gd")?;
            ck.push_model("model", &model);
            finish(&ctx, &ck, &log)
        }
        Stage::Cfd(a) => {
            let mut ctx = Ctx::new(&a.common, &config)?;
            if a.no_gd_warmup {
                ctx.cfg.gd_warmup = false;
            }
            if a.no_ema {
                ctx.cfg.use_ema = false;
            }
            if a.no_phase1 {
                ctx.cfg.phase1_finetune = false;
            }
            match a.loss {
                Some(LossArg::Huber) => ctx.cfg.loss = CfdLoss::Huber,
                Some(LossArg::L2) => ctx.cfg.loss = CfdLoss::L2,
                None => {}
            }
            match a.solver {
                Some(SolverArg::Guided) => ctx.cfg.cfd_teacher = CfdTeacher::Guided,
                Some(SolverArg::GuidanceStudent) => ctx.cfg.cfd_teacher = CfdTeacher::GuidanceStudent,
                None => {}
            }
            ctx.validate()?;
            let teacher = ctx.load("teacher")?.model("model")?;
            let needs_gd = ctx.cfg.gd_warmup || ctx.cfg.cfd_teacher == CfdTeacher::GuidanceStudent;
            let gd = if needs_gd { Some(ctx.load("gd")?.model("model")?) } else { None };
            let init = match (&gd, ctx.cfg.gd_warmup) {
                (Some(g), true) => g.clone(),
                _ => teacher.with_w_embedding(),
            };
            let solver = SolverTeacher {
                teacher: &teacher,
                guidance_student: gd.as_ref(),
                kind: ctx.cfg.cfd_teacher,
            };
            let (state, log) = cfd_train(init, &solver, &ctx.cfg)?;
            let mut ck = ctx.checkpoint("cfd")?;
            ck.push_model("student", &state.student);
            ck.push_model("target", &state.target);
            finish(&ctx, &ck, &log)
        }
        Stage::Adv(c) => {
            let ctx = Ctx::new(&c, &config)?;
            ctx.validate()?;
            let teacher = ctx.load("teacher")?.model("model")?;
            let cfd = ctx.load("cfd")?;
            let gd = if ctx.cfg.cfd_teacher == CfdTeacher::GuidanceStudent {
                Some(ctx.load("gd")?.model("model")?)
            } else {
                None
            };
            let state = fvdm_distill::train::CfdState {
                student: cfd.model("student")?,
                target: cfd.model("target")?,
            };
            let solver = SolverTeacher {
                teacher: &teacher,
                guidance_student: gd.as_ref(),
                kind: ctx.cfg.cfd_teacher,
            };
            let (state, disc, log) = adversarial_finetune(state, &solver, &ctx.cfg)?;
            let mut ck = ctx.checkpoint("adv")?;
            ck.push_model("student", &state.student);
            ck.push_model("target", &state.target);
            ck.push_disc(&disc);
            finish(&ctx, &ck, &log)
        }
        Stage::Sample(a) => sample(a, config),
        Stage::Eval(c) => eval(c, config),
    }
}

fn student_of(ctx: &Ctx, stage: &str) -> Result<FlowModel, CliError> {
    let ck = ctx.load(stage)?;
    Ok(match stage {
        "gd" => ck.model("model")?,
        _ => ck.model("student")?,
    })
}

#[derive(Debug, Serialize)]
struct SampleFile {
    stage: &'static str,
    seed: u64,
    nfe: usize,
    w: Option<f64>,
    config: DistillConfig,
    labels: Vec<usize>,
    samples: Vec<[f64; 2]>,
}

fn sample(a: SampleArgs, config: CliConfig) -> Result<(), CliError> {
    let ctx = Ctx::new(&a.common, &config)?;
    ctx.validate()?;
    if a.nfe == 0 || a.n == 0 {
        return Err(CliError::Usage("--nfe and --n must be at least 1".into()));
    }
    let from = match a.from {
        Some(f) => f,
        None => [SampleFrom::Adv, SampleFrom::Cfd, SampleFrom::Gd, SampleFrom::Teacher]
            .into_iter()
            .find(|s| ctx.has(stage_name(*s)))
            .ok_or_else(|| CliError::from(fvdm_distill::Error::MissingStage("teacher".into())))?,
    };
    let noise = gaussian_noise(a.n, ctx.cfg.seed);
    let labels: Vec<usize> = (0..a.n).map(|i| i % N_CLASSES).collect();
    let (w, x) = if from == SampleFrom::Teacher {
        let teacher = ctx.load("teacher")?.model("model")?;
        let field = TeacherField {
            model: &teacher,
            labels: &labels,
            w: a.w,
        };
        (a.w, ode_solve(&field, &noise, 1.0, 0.0, a.nfe)?)
    } else {
        let w = a.w.unwrap_or(ctx.cfg.w_const);
        let m = student_of(&ctx, stage_name(from))?;
        (Some(w), student_sample(&m, &noise, &labels, w, a.nfe)?)
    };
    let out = a.out.unwrap_or_else(|| {
        ctx.dir
            .join(format!("samples_{}_nfe{}_seed{}.json", stage_name(from), a.nfe, ctx.cfg.seed))
    });
    let file = SampleFile {
        stage: stage_name(from),
        seed: ctx.cfg.seed,
        nfe: a.nfe,
        w,
        config: ctx.cfg.clone(),
        labels,
        samples: (0..x.rows()).map(|i| [x.row(i)[0], x.row(i)[1]]).collect(),
    };
    let mut json = serde_json::to_vec(&file)?;
    json.push(b'\n');
    write_file(&out, &json)?;
    println!("{} samples from {} ({} NFE) -> {}", a.n, file.stage, a.nfe, out.display());
    Ok(())
}

fn stage_name(s: SampleFrom) -> &'static str {
    match s {
        SampleFrom::Teacher => "teacher",
        SampleFrom::Gd => "gd",
        SampleFrom::Cfd => "cfd",
        SampleFrom::Adv => "adv",
    }
}

fn eval(c: Common, config: CliConfig) -> Result<(), CliError> {
    let ctx = Ctx::new(&c, &config)?;
    ctx.validate()?;
    let teacher = ctx.load("teacher")?.model("model")?;
    let set = EvalSet::new(&ctx.cfg)?;
    let reference = teacher_reference(&teacher, &set, &ctx.cfg)?;
    let mut students = serde_json::Map::new();
    for stage in ["gd", "cfd", "adv"] {
        if ctx.has(stage) {
            let d = student_distance(&student_of(&ctx, stage)?, &set, &ctx.cfg)?;
            students.insert(stage.to_string(), serde_json::json!({
                "energy_distance": d,
                "ratio_to_guided_teacher": d / reference.guided,
            }));
        }
    }
    let report = serde_json::json!({
        "seed": ctx.cfg.seed,
        "eval_samples": ctx.cfg.eval_samples,
        "student_nfe": ctx.cfg.eval_nfe,
        "teacher": reference,
        "students": students,
        "config": ctx.cfg,
    });
    let text = serde_json::to_string_pretty(&report)?;
    write_file(&ctx.dir.join("eval.json"), format!("{text}\n").as_bytes())?;
    println!("{text}");
    Ok(())
}
