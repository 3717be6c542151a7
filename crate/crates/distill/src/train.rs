//! Teacher training, guidance distillation, consistency flow distillation and
//! adversarial finetuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_with, ToyBatch, ToyDist, NULL_CLASS};
use crate::flow::{cfg_velocity, cfg_velocity_rows, student_predict, student_predict_on};
use crate::nn::{ema_update, Adam, Bound, DiscriminatorHeads, FlowModel, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfdLoss {
    Huber,
    L2,
}

/// Which network takes the one-step solver step inside consistency
/// distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfdTeacher {
    /// Original teacher with classifier-free guidance at `w_const`.
    Guided,
    /// Guidance-distilled student queried at `w_const`.
    GuidanceStudent,
}

/// Learning-rate schedule within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let f = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub seed: u64,
    pub dist: ToyDist,
    pub model: ModelConfig,
    pub batch: usize,
    pub label_dropout: f64,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub gd_steps: usize,
    pub gd_lr: f64,
    pub w_range: [f64; 2],
    /// Steps of the multi-phase stage.
    pub cfd_steps: usize,
    pub cfd_lr: f64,
    /// Steps of the single-phase finetune that follows.
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub adv_steps: usize,
    pub disc_lr: f64,
    pub gen_lr: f64,
    pub disc_hidden: usize,
    /// 0-based teacher hidden layers fed to the discriminator heads.
    pub disc_taps: Vec<usize>,
    pub lambda_adv: f64,
    pub k_skip: usize,
    /// Size of the uniform time grid on `[0, 1]`.
    pub n_timesteps: usize,
    pub phases: usize,
    pub ema_decay: f64,
    pub huber_c: f64,
    pub w_const: f64,
    pub loss: CfdLoss,
    pub use_ema: bool,
    pub gd_warmup: bool,
    pub phase1_finetune: bool,
    pub cfd_teacher: CfdTeacher,
    pub lr_schedule: LrSchedule,
    pub eval_samples: usize,
    pub eval_nfe: usize,
    pub teacher_eval_steps: usize,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dist: ToyDist::Gmm8,
            model: ModelConfig::default(),
            batch: 256,
            label_dropout: 0.1,
            teacher_steps: 20_000,
            teacher_lr: 1e-3,
            gd_steps: 2_000,
            gd_lr: 3e-3,
            w_range: [2.0, 8.0],
            cfd_steps: 4_000,
            cfd_lr: 1e-3,
            phase1_steps: 1_600,
            phase1_lr: 1e-4,
            adv_steps: 1_000,
            disc_lr: 1e-3,
            gen_lr: 1e-4,
            disc_hidden: 32,
            disc_taps: vec![0, 1],
            lambda_adv: 0.1,
            k_skip: 10,
            n_timesteps: 200,
            phases: 5,
            ema_decay: 0.999,
            huber_c: 1e-3,
            w_const: 5.0,
            loss: CfdLoss::Huber,
            use_ema: true,
            gd_warmup: true,
            phase1_finetune: true,
            cfd_teacher: CfdTeacher::Guided,
            lr_schedule: LrSchedule::Cosine,
            eval_samples: 2048,
            eval_nfe: 5,
            teacher_eval_steps: 50,
            log_every: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.phases == 0 {
            return bad("phases must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if !(self.huber_c > 0.0) {
            return bad(format!("huber_c must be positive, got {}", self.huber_c));
        }
        if !(self.lambda_adv >= 0.0) {
            return bad(format!("lambda_adv must be non-negative, got {}", self.lambda_adv));
        }
        if self.batch == 0 || self.k_skip == 0 || self.eval_samples < 2 || self.eval_nfe == 0 {
            return bad("batch, k_skip, eval_nfe must be positive and eval_samples at least 2".into());
        }
        if self.n_timesteps == 0 || self.n_timesteps % self.phases != 0 {
            return bad(format!(
                "n_timesteps ({}) must be a positive multiple of phases ({})",
                self.n_timesteps, self.phases
            ));
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return bad(format!("label_dropout must be in [0, 1), got {}", self.label_dropout));
        }
        if !(self.w_range[0] <= self.w_range[1]) {
            return bad(format!("w_range must be ordered, got {:?}", self.w_range));
        }
        if self.disc_taps.is_empty() || self.disc_taps.iter().any(|&t| t >= self.model.layers) {
            return bad(format!("disc_taps {:?} must name hidden layers below {}", self.disc_taps, self.model.layers));
        }
        Ok(())
    }

    /// Returns a copy with every step count multiplied by `f` (at least one
    /// step each where the original was positive).
    pub fn scaled_steps(&self, f: f64) -> Self {
        let s = |n: usize| if n == 0 { 0 } else { ((n as f64 * f).round() as usize).max(1) };
        Self {
            teacher_steps: s(self.teacher_steps),
            gd_steps: s(self.gd_steps),
            cfd_steps: s(self.cfd_steps),
            phase1_steps: s(self.phase1_steps),
            adv_steps: s(self.adv_steps),
            ..self.clone()
        }
    }
}

/// Equal split of `[0, 1]` into `phases` sub-trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: usize,
}

impl PhaseSchedule {
    pub fn new(phases: usize) -> Result<Self> {
        if phases == 0 {
            return Err(Error::Config("phases must be at least 1".into()));
        }
        Ok(Self { phases })
    }

    /// `1 = b_0 > b_1 > ... > b_P = 0`.
    pub fn boundaries(&self) -> Vec<f64> {
        (0..=self.phases).map(|j| (self.phases - j) as f64 / self.phases as f64).collect()
    }

    /// Lower boundary of the phase `(b_{j+1}, b_j]` containing `t`; 0 for
    /// `t <= 0`.
    pub fn t_end(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let p = self.phases as f64;
        // snap values within rounding of a boundary onto it
        let u = t * p;
        let k = if (u - u.round()).abs() < 1e-9 { u.round() - 1.0 } else { u.floor() };
        (k.max(0.0)) / p
    }

    /// Grid version: index of the phase start below grid index `n >= 1` on a
    /// grid of `n_grid` steps.
    pub fn end_index(&self, n: usize, n_grid: usize) -> usize {
        let w = n_grid / self.phases;
        (n - 1) / w * w
    }
}

/// `sqrt(|a - b|^2 + c^2) - c` per row.
pub fn pseudo_huber(a: &Tensor, b: &Tensor, c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("pseudo-Huber constant must be positive, got {c}")));
    }
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((0..a.rows())
        .map(|i| {
            let d2: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum();
            (d2 + c * c).sqrt() - c
        })
        .collect())
}

fn pseudo_huber_on(tape: &mut Tape, pred: Var, target: Var, c: f64) -> Var {
    let d = tape.sub(pred, target);
    let s = tape.sum_sq_rows(d);
    let s = tape.add_scalar(s, c * c);
    let r = tape.sqrt(s);
    let r = tape.add_scalar(r, -c);
    tape.mean(r)
}

fn l2_on(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let d = tape.sub(pred, target);
    let s = tape.sum_sq_rows(d);
    tape.mean(s)
}

/// One JSON-lines training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub records: Vec<LogRecord>,
    /// Loss on a fixed held-out batch before and after the stage, where the
    /// stage defines one.
    pub initial_eval: Option<f64>,
    pub final_eval: Option<f64>,
}

const STREAM_TEACHER: u64 = 1;
const STREAM_GD: u64 = 2;
const STREAM_CFD: u64 = 3;
const STREAM_PHASE1: u64 = 4;
const STREAM_ADV: u64 = 5;
const STREAM_EVAL: u64 = 6;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal_tensor<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample(StandardNormal)).collect())
}

/// `(1 - t) x0 + t e` row by row.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: &[f64]) -> Tensor {
    let mut d = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        for (a, b) in x0.row(i).iter().zip(eps.row(i)) {
            d.push((1.0 - ti) * a + ti * b);
        }
    }
    Tensor::matrix(x0.rows(), 2, d)
}

/// Replaces each label by [`NULL_CLASS`] with probability `rate`.
pub fn apply_label_dropout<R: Rng>(labels: &mut [usize], rate: f64, rng: &mut R) {
    for l in labels {
        if rng.random::<f64>() < rate {
            *l = NULL_CLASS;
        }
    }
}

fn divergence(stage: &str, step: usize) -> Error {
    Error::Divergence {
        stage: stage.to_string(),
        step,
    }
}

fn apply(opt: &mut Adam, params: &mut [Tensor], tape: &Tape, bound: &Bound, stage: &str, step: usize) -> Result<()> {
    let grads: Vec<Tensor> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(divergence(stage, step));
    }
    opt.step(params, &grads)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(divergence(stage, step));
    }
    Ok(())
}

fn should_log(cfg: &DistillConfig, step: usize, total: usize) -> bool {
    cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total)
}

/// Flow-matching batch: `(x_t, t, labels, target velocity)`.
struct FmBatch {
    xt: Tensor,
    t: Vec<f64>,
    labels: Vec<usize>,
    target: Tensor,
}

fn fm_batch<R: Rng>(dist: ToyDist, n: usize, dropout: f64, rng: &mut R) -> FmBatch {
    let data = sample_with(dist, n, rng);
    let eps = normal_tensor(n, rng);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut labels = data.labels;
    apply_label_dropout(&mut labels, dropout, rng);
    let xt = interpolate(&data.points, &eps, &t);
    let target = eps.zip_map(&data.points, |e, x| e - x);
    FmBatch { xt, t, labels, target }
}

fn fm_loss(model: &FlowModel, tape: &mut Tape, b: &Bound, batch: &FmBatch) -> Result<Var> {
    let x = tape.constant(batch.xt.clone());
    let f = model.forward(tape, b, x, &batch.t, &batch.labels, None)?;
    let target = tape.constant(batch.target.clone());
    Ok(l2_on(tape, f.out, target))
}

/// Flow-matching loss of `model` on a fixed batch drawn from `seed`.
pub fn teacher_eval_loss(model: &FlowModel, cfg: &DistillConfig, n: usize) -> Result<f64> {
    let mut rng = stage_rng(cfg.seed, STREAM_EVAL);
    let batch = fm_batch(cfg.dist, n, cfg.label_dropout, &mut rng);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let l = fm_loss(model, &mut tape, &b, &batch)?;
    Ok(tape.value(l).item())
}

/// Seed of the initial teacher parameters.
pub fn teacher_init_seed(cfg: &DistillConfig) -> u64 {
    cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(17)
}

/// Flow matching `|v(x_t, t, c) - (e - x_0)|^2` with label dropout for
/// classifier-free guidance.
pub fn train_teacher(cfg: &DistillConfig) -> Result<(FlowModel, StageLog)> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        w_embed: false,
        ..cfg.model
    };
    let mut model = FlowModel::new(model_cfg, teacher_init_seed(cfg))?;
    let mut log = StageLog {
        initial_eval: Some(teacher_eval_loss(&model, cfg, 4096)?),
        ..Default::default()
    };
    let mut rng = stage_rng(cfg.seed, STREAM_TEACHER);
    let mut opt = Adam::new(cfg.teacher_lr);
    for step in 0..cfg.teacher_steps {
        opt.lr = cfg.lr_schedule.lr(cfg.teacher_lr, step, cfg.teacher_steps);
        let batch = fm_batch(cfg.dist, cfg.batch, cfg.label_dropout, &mut rng);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let loss = fm_loss(&model, &mut tape, &b, &batch)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(divergence("teacher", step));
        }
        tape.backward(loss)?;
        apply(&mut opt, model.params_mut(), &tape, &b, "teacher", step)?;
        if should_log(cfg, step, cfg.teacher_steps) {
            log.records.push(LogRecord {
                stage: "teacher".into(),
                step,
                loss: lv,
                phases: None,
                disc_loss: None,
            });
        }
    }
    log.final_eval = Some(teacher_eval_loss(&model, cfg, 4096)?);
    Ok((model, log))
}

/// Batch for guidance distillation: noisy points, labels and per-row `w`.
pub struct GdBatch {
    pub xt: Tensor,
    pub t: Vec<f64>,
    pub labels: Vec<usize>,
    pub w: Vec<f64>,
}

fn gd_batch<R: Rng>(cfg: &DistillConfig, n: usize, rng: &mut R) -> GdBatch {
    let data = sample_with(cfg.dist, n, rng);
    let eps = normal_tensor(n, rng);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.w_range[0]..=cfg.w_range[1])).collect();
    GdBatch {
        xt: interpolate(&data.points, &eps, &t),
        t,
        labels: data.labels,
        w,
    }
}

/// Guidance distillation loss `mean |v_s(x_t, t, c, w) - v_cfg(x_t, t, c, w)|^2`
/// on the tape.
pub fn gd_loss_on(tape: &mut Tape, student: &FlowModel, b: &Bound, teacher: &FlowModel, batch: &GdBatch) -> Result<Var> {
    let target = cfg_velocity_rows(teacher, &batch.xt, &batch.t, &batch.labels, &batch.w)?;
    let x = tape.constant(batch.xt.clone());
    let f = student.forward(tape, b, x, &batch.t, &batch.labels, Some(&batch.w))?;
    let tv = tape.constant(target);
    Ok(l2_on(tape, f.out, tv))
}

/// Mean squared velocity gap to the guided teacher at a fixed `w` on a
/// held-out batch.
pub fn guidance_gap(student: &FlowModel, teacher: &FlowModel, cfg: &DistillConfig, w: f64, n: usize) -> Result<f64> {
    let mut rng = stage_rng(cfg.seed ^ 0x5eed, STREAM_EVAL);
    let mut batch = gd_batch(cfg, n, &mut rng);
    batch.w = vec![w; n];
    let mut tape = Tape::new();
    let b = student.bind(&mut tape, false);
    let l = gd_loss_on(&mut tape, student, &b, teacher, &batch)?;
    Ok(tape.value(l).item())
}

/// Trains a `w`-conditioned student, initialised from the teacher with a
/// zero guidance embedding, to match the teacher's guided velocity for
/// `w ~ U[w_range]`.
pub fn guidance_distill(teacher: &FlowModel, cfg: &DistillConfig) -> Result<(FlowModel, StageLog)> {
    cfg.validate()?;
    let mut student = teacher.with_w_embedding();
    let mut log = StageLog {
        initial_eval: Some(guidance_gap(&student, teacher, cfg, cfg.w_const, 2048)?),
        ..Default::default()
    };
    let mut rng = stage_rng(cfg.seed, STREAM_GD);
    let mut opt = Adam::new(cfg.gd_lr);
    for step in 0..cfg.gd_steps {
        opt.lr = cfg.lr_schedule.lr(cfg.gd_lr, step, cfg.gd_steps);
        let batch = gd_batch(cfg, cfg.batch, &mut rng);
        let mut tape = Tape::new();
        let b = student.bind(&mut tape, true);
        let loss = gd_loss_on(&mut tape, &student, &b, teacher, &batch)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(divergence("gd", step));
        }
        tape.backward(loss)?;
        apply(&mut opt, student.params_mut(), &tape, &b, "gd", step)?;
        if should_log(cfg, step, cfg.gd_steps) {
            log.records.push(LogRecord {
                stage: "gd".into(),
                step,
                loss: lv,
                phases: None,
                disc_loss: None,
            });
        }
    }
    log.final_eval = Some(guidance_gap(&student, teacher, cfg, cfg.w_const, 2048)?);
    Ok((student, log))
}

/// Online student and its target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct CfdState {
    pub student: FlowModel,
    pub target: FlowModel,
}

impl CfdState {
    pub fn new(student: FlowModel) -> Self {
        Self {
            target: student.clone(),
            student,
        }
    }
}

/// Networks that supply the one-step solver step.
pub struct SolverTeacher<'a> {
    pub teacher: &'a FlowModel,
    pub guidance_student: Option<&'a FlowModel>,
    pub kind: CfdTeacher,
}

impl SolverTeacher<'_> {
    fn velocity(&self, x: &Tensor, t: &[f64], c: &[usize], w: f64) -> Result<Tensor> {
        match self.kind {
            CfdTeacher::Guided => cfg_velocity(self.teacher, x, t, c, w),
            CfdTeacher::GuidanceStudent => {
                let g = self
                    .guidance_student
                    .ok_or_else(|| Error::MissingStage("gd".into()))?;
                g.velocity(x, t, c, Some(&vec![w; c.len()]))
            }
        }
    }
}

/// Consistency batch on the time grid.
pub struct CfdBatch {
    pub x0: Tensor,
    pub labels: Vec<usize>,
    pub xt: Tensor,
    pub t: Vec<f64>,
    pub t_next: Vec<f64>,
    pub t_end: Vec<f64>,
}

pub fn cfd_batch<R: Rng>(cfg: &DistillConfig, schedule: &PhaseSchedule, n: usize, rng: &mut R) -> CfdBatch {
    let data = sample_with(cfg.dist, n, rng);
    let eps = normal_tensor(n, rng);
    let ng = cfg.n_timesteps;
    let mut t = Vec::with_capacity(n);
    let mut t_next = Vec::with_capacity(n);
    let mut t_end = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(1..=ng);
        let e = schedule.end_index(k, ng);
        let kn = k.saturating_sub(cfg.k_skip).max(e);
        t.push(k as f64 / ng as f64);
        t_next.push(kn as f64 / ng as f64);
        t_end.push(e as f64 / ng as f64);
    }
    CfdBatch {
        xt: interpolate(&data.points, &eps, &t),
        x0: data.points,
        labels: data.labels,
        t,
        t_next,
        t_end,
    }
}

/// Consistency loss `d(f_theta(x_t, t), sg[f_target(x_hat, t_next)])`, both
/// mapped to the phase end, where `x_hat` is one solver step of size
/// `t - t_next` from `x_t`.
pub fn cfd_loss_on(
    tape: &mut Tape,
    state: &CfdState,
    b: &Bound,
    solver: &SolverTeacher<'_>,
    batch: &CfdBatch,
    cfg: &DistillConfig,
) -> Result<Var> {
    let n = batch.t.len();
    let w = vec![cfg.w_const; n];
    let v = solver.velocity(&batch.xt, &batch.t, &batch.labels, cfg.w_const)?;
    let mut xhat = batch.xt.clone();
    for (i, row) in xhat.data_mut().chunks_exact_mut(2).enumerate() {
        let h = batch.t_next[i] - batch.t[i];
        row[0] += h * v.data()[2 * i];
        row[1] += h * v.data()[2 * i + 1];
    }
    let target = student_predict(&state.target, &xhat, &batch.t_next, &batch.t_end, &batch.labels, Some(&w))?;
    let x = tape.constant(batch.xt.clone());
    let pred = student_predict_on(tape, &state.student, b, x, &batch.t, &batch.t_end, &batch.labels, Some(&w))?;
    let tv = tape.constant(target);
    Ok(match cfg.loss {
        CfdLoss::Huber => pseudo_huber_on(tape, pred, tv, cfg.huber_c),
        CfdLoss::L2 => l2_on(tape, pred, tv),
    })
}

fn update_target(state: &mut CfdState, cfg: &DistillConfig) -> Result<()> {
    let decay = if cfg.use_ema { cfg.ema_decay } else { 0.0 };
    ema_update(state.target.params_mut(), state.student.params(), decay)
}

/// Multi-phase consistency distillation followed, when enabled, by a
/// single-phase finetune at the lower learning rate.
pub fn cfd_train(
    init: FlowModel,
    solver: &SolverTeacher<'_>,
    cfg: &DistillConfig,
) -> Result<(CfdState, StageLog)> {
    cfg.validate()?;
    if !init.cfg.w_embed {
        return Err(Error::Config("consistency student needs a guidance embedding".into()));
    }
    let mut state = CfdState::new(init);
    let mut log = StageLog::default();
    cfd_run(&mut state, solver, cfg, cfg.phases, cfg.cfd_steps, cfg.cfd_lr, STREAM_CFD, "cfd", &mut log)?;
    if cfg.phase1_finetune {
        let (s, l) = phase1_finetune(state, solver, cfg)?;
        state = s;
        log.records.extend(l.records);
    }
    Ok((state, log))
}

/// Single-phase continuation of a multi-phase run; the target network
/// carries over.
pub fn phase1_finetune(mut state: CfdState, solver: &SolverTeacher<'_>, cfg: &DistillConfig) -> Result<(CfdState, StageLog)> {
    cfg.validate()?;
    let mut log = StageLog::default();
    cfd_run(&mut state, solver, cfg, 1, cfg.phase1_steps, cfg.phase1_lr, STREAM_PHASE1, "cfd_phase1", &mut log)?;
    Ok((state, log))
}

#[allow(clippy::too_many_arguments)]
fn cfd_run(
    state: &mut CfdState,
    solver: &SolverTeacher<'_>,
    cfg: &DistillConfig,
    phases: usize,
    steps: usize,
    lr: f64,
    stream: u64,
    stage: &str,
    log: &mut StageLog,
) -> Result<()> {
    let schedule = PhaseSchedule::new(phases)?;
    let run_cfg = DistillConfig {
        phases,
        ..cfg.clone()
    };
    let mut rng = stage_rng(cfg.seed, stream);
    let mut opt = Adam::new(lr);
    for step in 0..steps {
        opt.lr = cfg.lr_schedule.lr(lr, step, steps);
        let batch = cfd_batch(&run_cfg, &schedule, cfg.batch, &mut rng);
        let mut tape = Tape::new();
        let b = state.student.bind(&mut tape, true);
        let loss = cfd_loss_on(&mut tape, state, &b, solver, &batch, &run_cfg)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(divergence(stage, step));
        }
        tape.backward(loss)?;
        apply(&mut opt, state.student.params_mut(), &tape, &b, stage, step)?;
        update_target(state, cfg)?;
        if should_log(cfg, step, steps) {
            log.records.push(LogRecord {
                stage: stage.into(),
                step,
                loss: lv,
                phases: Some(phases),
                disc_loss: None,
            });
        }
    }
    Ok(())
}

/// Hinge loss `sum_h mean ReLU(1 + D_h(real)) + mean ReLU(1 - D_h(fake))`.
pub fn hinge_disc_loss(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let a = tape.add_scalar(r, 1.0);
        let a = tape.relu(a);
        let a = tape.mean(a);
        let nf = tape.scale(f, -1.0);
        let bb = tape.add_scalar(nf, 1.0);
        let bb = tape.relu(bb);
        let bb = tape.mean(bb);
        let s = tape.add(a, bb);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    total.expect("at least one head")
}

/// Generator adversarial term `sum_h mean D_h(fake)`: real samples are pushed
/// towards negative scores by the hinge loss, so the generator lowers the
/// score of its own samples.
pub fn generator_adv_term(tape: &mut Tape, fake: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for &f in fake {
        let m = tape.mean(f);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
    }
    total.expect("at least one head")
}

/// Teacher hidden features at clean samples (`t = 0`).
fn teacher_features(tape: &mut Tape, teacher: &FlowModel, tb: &Bound, x: Var, labels: &[usize]) -> Result<Vec<Var>> {
    let n = labels.len();
    Ok(teacher.forward(tape, tb, x, &vec![0.0; n], labels, None)?.hidden)
}

/// Hinge loss of the discriminator on teacher features of `real` and `fake`
/// clean samples.
pub fn disc_loss_on(
    tape: &mut Tape,
    disc: &DiscriminatorHeads,
    db: &Bound,
    teacher: &FlowModel,
    real: &ToyBatch,
    fake: &Tensor,
    fake_labels: &[usize],
) -> Result<Var> {
    let tb = teacher.bind(tape, false);
    let xr = tape.constant(real.points.clone());
    let fr = teacher_features(tape, teacher, &tb, xr, &real.labels)?;
    let xf = tape.constant(fake.clone());
    let ff = teacher_features(tape, teacher, &tb, xf, fake_labels)?;
    let sr = disc.scores(tape, db, &fr)?;
    let sf = disc.scores(tape, db, &ff)?;
    Ok(hinge_disc_loss(tape, &sr, &sf))
}

/// `L_cfd + lambda_adv * adv` with the one-step prediction to t = 0 as the
/// generated sample.
pub fn generator_loss_on(
    tape: &mut Tape,
    state: &CfdState,
    gb: &Bound,
    solver: &SolverTeacher<'_>,
    disc: &DiscriminatorHeads,
    batch: &CfdBatch,
    cfg: &DistillConfig,
) -> Result<Var> {
    let n = batch.t.len();
    let w = vec![cfg.w_const; n];
    let lc = cfd_loss_on(tape, state, gb, solver, batch, cfg)?;
    let x = tape.constant(batch.xt.clone());
    let fake = student_predict_on(tape, &state.student, gb, x, &batch.t, &vec![0.0; n], &batch.labels, Some(&w))?;
    let tb = solver.teacher.bind(tape, false);
    let db = disc.bind(tape, false);
    let ff = teacher_features(tape, solver.teacher, &tb, fake, &batch.labels)?;
    let sf = disc.scores(tape, &db, &ff)?;
    let adv = generator_adv_term(tape, &sf);
    let adv = tape.scale(adv, cfg.lambda_adv);
    Ok(tape.add(lc, adv))
}

/// Alternating discriminator and generator updates. The generator keeps the
/// single-phase consistency loss and adds `lambda_adv` times the adversarial
/// term; the discriminator sees teacher features of real data and of
/// one-step student samples.
pub fn adversarial_finetune(
    mut state: CfdState,
    solver: &SolverTeacher<'_>,
    cfg: &DistillConfig,
) -> Result<(CfdState, DiscriminatorHeads, StageLog)> {
    cfg.validate()?;
    let teacher = solver.teacher;
    let mut disc = DiscriminatorHeads::new(
        cfg.disc_taps.clone(),
        teacher.cfg.hidden,
        cfg.disc_hidden,
        teacher_init_seed(cfg) ^ 0xd15c,
    )?;
    let run_cfg = DistillConfig {
        phases: 1,
        ..cfg.clone()
    };
    let schedule = PhaseSchedule::new(1)?;
    let mut rng = stage_rng(cfg.seed, STREAM_ADV);
    let mut opt_d = Adam::new(cfg.disc_lr);
    let mut opt_g = Adam::new(cfg.gen_lr);
    let mut log = StageLog::default();
    for step in 0..cfg.adv_steps {
        opt_d.lr = cfg.lr_schedule.lr(cfg.disc_lr, step, cfg.adv_steps);
        opt_g.lr = cfg.lr_schedule.lr(cfg.gen_lr, step, cfg.adv_steps);
        let real = sample_with(cfg.dist, cfg.batch, &mut rng);
        let batch = cfd_batch(&run_cfg, &schedule, cfg.batch, &mut rng);
        let n = batch.t.len();
        let w = vec![cfg.w_const; n];
        let zeros = vec![0.0; n];

        // discriminator
        let fake = student_predict(&state.student, &batch.xt, &batch.t, &zeros, &batch.labels, Some(&w))?;
        let mut tape = Tape::new();
        let db = disc.bind(&mut tape, true);
        let ld = disc_loss_on(&mut tape, &disc, &db, teacher, &real, &fake, &batch.labels)?;
        let dl = tape.value(ld).item();
        if !dl.is_finite() {
            return Err(divergence("adv_disc", step));
        }
        tape.backward(ld)?;
        apply(&mut opt_d, disc.params_mut(), &tape, &db, "adv_disc", step)?;

        // generator
        let mut tape = Tape::new();
        let gb = state.student.bind(&mut tape, true);
        let lg = generator_loss_on(&mut tape, &state, &gb, solver, &disc, &batch, &run_cfg)?;
        let gl = tape.value(lg).item();
        if !gl.is_finite() {
            return Err(divergence("adv_gen", step));
        }
        tape.backward(lg)?;
        apply(&mut opt_g, state.student.params_mut(), &tape, &gb, "adv_gen", step)?;
        update_target(&mut state, cfg)?;
        if should_log(cfg, step, cfg.adv_steps) {
            log.records.push(LogRecord {
                stage: "adv".into(),
                step,
                loss: gl,
                phases: Some(1),
                disc_loss: Some(dl),
            });
        }
    }
    Ok((state, disc, log))
}

/// Worst relative finite-difference error of each training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub teacher: f64,
    pub gd: f64,
    pub cfd: f64,
    pub adv_disc: f64,
    pub adv_gen: f64,
}

impl GradCheckReport {
    pub fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("teacher", self.teacher),
            ("gd", self.gd),
            ("cfd", self.cfd),
            ("adv_disc", self.adv_disc),
            ("adv_gen", self.adv_gen),
        ]
    }

    pub fn max(&self) -> f64 {
        self.entries().iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Checks every loss gradient against central differences on a small seeded
/// model and batch.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = DistillConfig {
        seed,
        model: ModelConfig {
            hidden: 16,
            layers: 3,
            n_freq: 4,
            w_embed: false,
        },
        disc_hidden: 8,
        ..Default::default()
    };
    let teacher = FlowModel::new(cfg.model, teacher_init_seed(&cfg))?;
    let student = teacher.with_w_embedding();
    let mut perturbed = student.clone();
    for p in perturbed.params_mut() {
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 1.3).sin();
        }
    }
    let (eps, per) = (1e-6, 8);
    let mut rng = stage_rng(seed, 7);
    let fm = fm_batch(cfg.dist, 16, cfg.label_dropout, &mut rng);
    let teacher_e = crate::tape::grad_check(teacher.params(), eps, per, |tape, v| {
        fm_loss(&teacher, tape, &Bound { vars: v.to_vec() }, &fm)
    })?;
    let gb = gd_batch(&cfg, 16, &mut rng);
    let gd = crate::tape::grad_check(perturbed.params(), eps, per, |tape, v| {
        gd_loss_on(tape, &perturbed, &Bound { vars: v.to_vec() }, &teacher, &gb)
    })?;
    let state = CfdState {
        student: perturbed.clone(),
        target: student,
    };
    let solver = SolverTeacher {
        teacher: &teacher,
        guidance_student: None,
        kind: CfdTeacher::Guided,
    };
    let cb = cfd_batch(&cfg, &PhaseSchedule::new(cfg.phases)?, 16, &mut rng);
    let cfd = crate::tape::grad_check(state.student.params(), eps, per, |tape, v| {
        cfd_loss_on(tape, &state, &Bound { vars: v.to_vec() }, &solver, &cb, &cfg)
    })?;

    let mut disc = DiscriminatorHeads::new(cfg.disc_taps.clone(), cfg.model.hidden, cfg.disc_hidden, seed ^ 0xd15c)?;
    // spread the scores past the hinge so the bias gradients are not
    // identically zero
    for head in disc.params_mut().chunks_mut(4) {
        head[2].data_mut().iter_mut().for_each(|v| *v *= 8.0);
        head[3].data_mut()[0] = 0.3;
    }
    let real = sample_with(cfg.dist, 16, &mut rng);
    let w = vec![cfg.w_const; 16];
    let fake = student_predict(&state.student, &cb.xt, &cb.t, &[0.0; 16], &cb.labels, Some(&w))?;
    let adv_disc = crate::tape::grad_check(disc.params(), eps, per, |tape, v| {
        disc_loss_on(tape, &disc, &Bound { vars: v.to_vec() }, &teacher, &real, &fake, &cb.labels)
    })?;
    let one = DistillConfig { phases: 1, ..cfg.clone() };
    let cb1 = cfd_batch(&one, &PhaseSchedule::new(1)?, 16, &mut rng);
    let adv_gen = crate::tape::grad_check(state.student.params(), eps, per, |tape, v| {
        generator_loss_on(tape, &state, &Bound { vars: v.to_vec() }, &solver, &disc, &cb1, &one)
    })?;
    Ok(GradCheckReport {
        teacher: teacher_e,
        gd,
        cfd,
        adv_disc,
        adv_gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> DistillConfig {
        DistillConfig {
            model: ModelConfig {
                hidden: 16,
                layers: 3,
                n_freq: 4,
                w_embed: false,
            },
            batch: 32,
            teacher_steps: 0,
            gd_steps: 0,
            cfd_steps: 0,
            phase1_steps: 0,
            adv_steps: 0,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig { phases: 0, ..Default::default() },
            DistillConfig { ema_decay: 1.5, ..Default::default() },
            DistillConfig { huber_c: 0.0, ..Default::default() },
            DistillConfig { lambda_adv: -1.0, ..Default::default() },
            DistillConfig { n_timesteps: 201, ..Default::default() },
            DistillConfig { disc_taps: vec![3], ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let json = r#"{"seed": 3, "phases": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<DistillConfig>(json).is_err());
        let ok: DistillConfig = serde_json::from_str(r#"{"seed": 3, "phases": 2}"#).unwrap();
        assert_eq!(ok.phases, 2);
        assert_eq!(ok.ema_decay, 0.999);
    }

    #[test]
    fn phase_schedule_examples() {
        let s = PhaseSchedule::new(5).unwrap();
        assert_eq!(s.boundaries(), vec![1.0, 0.8, 0.6, 0.4, 0.2, 0.0]);
        assert_eq!(s.t_end(1.0), 0.8);
        assert_eq!(s.t_end(0.6), 0.4);
        assert_eq!(s.t_end(0.59), 0.4);
        assert_eq!(s.t_end(0.05), 0.0);
        assert_eq!(s.t_end(0.0), 0.0);
        assert_eq!(s.end_index(200, 200), 160);
        assert_eq!(s.end_index(161, 200), 160);
        assert_eq!(s.end_index(160, 200), 120);
        assert_eq!(s.end_index(1, 200), 0);
        assert!(PhaseSchedule::new(0).is_err());
        assert_eq!(PhaseSchedule::new(1).unwrap().t_end(1.0), 0.0);
    }

    proptest! {
        #[test]
        fn t_end_is_low_boundary_of_its_phase(p in 1usize..10, t in 0.0f64..=1.0) {
            let s = PhaseSchedule::new(p).unwrap();
            let e = s.t_end(t);
            let b = s.boundaries();
            prop_assert!(b.contains(&e));
            prop_assert!(e <= t);
            if t > 0.0 {
                prop_assert!(e < t);
                prop_assert!(t - e <= 1.0 / p as f64 + 1e-12);
            }
            prop_assert!(b.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn grid_end_index_matches_t_end(p in 1usize..6, mult in 1usize..8, k in 1usize..1000) {
            let ng = p * mult * 4;
            let k = 1 + k % ng;
            let s = PhaseSchedule::new(p).unwrap();
            let e = s.end_index(k, ng);
            prop_assert!((e as f64 / ng as f64 - s.t_end(k as f64 / ng as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_huber_examples() {
        let a = Tensor::matrix(1, 2, vec![0.3, -0.2]);
        assert_eq!(pseudo_huber(&a, &a, 1e-3).unwrap(), vec![0.0]);
        let c = 0.01;
        let b = Tensor::matrix(1, 2, vec![0.3 + c, -0.2]);
        let v = pseudo_huber(&a, &b, c).unwrap()[0];
        assert!((v - c * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        let far = Tensor::matrix(1, 2, vec![3.3, -0.2]);
        let v = pseudo_huber(&a, &far, 1e-3).unwrap()[0];
        assert!((v - 3.0).abs() / 3.0 <= 1e-3 / 3.0);
        assert!(pseudo_huber(&a, &a, 0.0).is_err());
    }

    #[test]
    fn label_dropout_rate() {
        let mut rng = stage_rng(4, 9);
        let mut labels = vec![0usize; 20_000];
        apply_label_dropout(&mut labels, 0.1, &mut rng);
        let rate = labels.iter().filter(|&&l| l == NULL_CLASS).count() as f64 / labels.len() as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn zero_steps_return_initial_teacher() {
        let cfg = tiny();
        let (m, log) = train_teacher(&cfg).unwrap();
        assert_eq!(m, FlowModel::new(cfg.model, teacher_init_seed(&cfg)).unwrap());
        assert_eq!(log.initial_eval, log.final_eval);
    }

    #[test]
    fn cfd_loss_vanishes_at_phase_end_with_identical_networks() {
        let cfg = tiny();
        let (teacher, _) = train_teacher(&cfg).unwrap();
        let student = teacher.with_w_embedding();
        let state = CfdState::new(student);
        let solver = SolverTeacher {
            teacher: &teacher,
            guidance_student: None,
            kind: CfdTeacher::Guided,
        };
        let mut rng = stage_rng(1, 1);
        let s = PhaseSchedule::new(5).unwrap();
        let mut batch = cfd_batch(&cfg, &s, 16, &mut rng);
        batch.t_end = batch.t.clone();
        batch.t_next = batch.t.clone();
        let mut tape = Tape::new();
        let b = state.student.bind(&mut tape, true);
        let l = cfd_loss_on(&mut tape, &state, &b, &solver, &batch, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn single_phase_target_at_t1_is_one_euler_step_mapped_by_target() {
        let cfg = DistillConfig {
            k_skip: 200,
            ..tiny()
        };
        let (teacher, _) = train_teacher(&cfg).unwrap();
        let target = FlowModel::new(cfg.model, 99).unwrap().with_w_embedding();
        let state = CfdState {
            student: teacher.with_w_embedding(),
            target: target.clone(),
        };
        let solver = SolverTeacher {
            teacher: &teacher,
            guidance_student: None,
            kind: CfdTeacher::Guided,
        };
        let s = PhaseSchedule::new(1).unwrap();
        let mut batch = cfd_batch(&cfg, &s, 8, &mut stage_rng(2, 2));
        batch.t = vec![1.0; 8];
        batch.t_next = vec![0.0; 8];
        batch.t_end = vec![0.0; 8];
        // k_skip covers the interval, so the target is the teacher's one-step
        // output passed through the target network at its own end time
        let v = cfg_velocity(&teacher, &batch.xt, &batch.t, &batch.labels, cfg.w_const).unwrap();
        let xhat = batch.xt.zip_map(&v, |x, v| x - v);
        let w = vec![cfg.w_const; 8];
        let expect = student_predict(&target, &xhat, &batch.t_next, &batch.t_end, &batch.labels, Some(&w)).unwrap();
        assert_eq!(expect, xhat);
        let mut tape = Tape::new();
        let b = state.student.bind(&mut tape, true);
        let l = cfd_loss_on(&mut tape, &state, &b, &solver, &batch, &cfg).unwrap();
        let pred = student_predict(&state.student, &batch.xt, &batch.t, &batch.t_end, &batch.labels, Some(&w)).unwrap();
        let want: f64 = pseudo_huber(&pred, &xhat, cfg.huber_c).unwrap().iter().sum::<f64>() / 8.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let mut tape = Tape::new();
        let real = tape.constant(Tensor::filled(4, 1, -1.5));
        let fake = tape.constant(Tensor::filled(4, 1, 1.0));
        let l = hinge_disc_loss(&mut tape, &[real], &[fake]);
        assert_eq!(tape.value(l).item(), 0.0);
        let z = tape.constant(Tensor::zeros(4, 1));
        let l = hinge_disc_loss(&mut tape, &[z, z], &[z, z]);
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn stage_gradients_pass_finite_differences() {
        let r = gradient_check(3).unwrap();
        for (name, e) in r.entries() {
            assert!(e <= 1e-5, "{name} {e}");
        }
    }
}
