//! Sample-quality evaluation against held-out toy data.

use serde::{Deserialize, Serialize};

use crate::data::{energy_distance, sample_toy_data, ToyBatch};
use crate::flow::{gaussian_noise, ode_solve, student_sample, TeacherField};
use crate::nn::FlowModel;
use crate::tensor::Tensor;
use crate::train::DistillConfig;
use crate::Result;

const HELD_OUT_SALT: u64 = 0x4e1d_0u64;
const NOISE_SALT: u64 = 0x0015_e000;

/// Held-out data and the sampling noise shared by every model under test.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub data: ToyBatch,
    pub noise: Tensor,
}

impl EvalSet {
    pub fn new(cfg: &DistillConfig) -> Result<Self> {
        let n = cfg.eval_samples;
        Ok(Self {
            data: sample_toy_data(cfg.dist, n, true, cfg.seed ^ HELD_OUT_SALT)?,
            noise: gaussian_noise(n, cfg.seed ^ NOISE_SALT),
        })
    }

    /// Labels the generated samples are conditioned on: those of the
    /// held-out points, so class proportions match.
    pub fn labels(&self) -> &[usize] {
        &self.data.labels
    }

    pub fn distance(&self, samples: &Tensor) -> Result<f64> {
        energy_distance(samples, &self.data.points)
    }
}

/// Teacher samples by Euler integration from noise, conditional when `w` is
/// `None` and guided otherwise.
pub fn teacher_samples(teacher: &FlowModel, set: &EvalSet, w: Option<f64>, steps: usize) -> Result<Tensor> {
    let field = TeacherField {
        model: teacher,
        labels: set.labels(),
        w,
    };
    ode_solve(&field, &set.noise, 1.0, 0.0, steps)
}

pub fn student_samples(student: &FlowModel, set: &EvalSet, w: f64, nfe: usize) -> Result<Tensor> {
    student_sample(student, &set.noise, set.labels(), w, nfe)
}

/// Energy distances of the teacher references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherReference {
    pub steps: usize,
    /// Plain conditional sampling.
    pub conditional: f64,
    /// Guided sampling at the student's `w`, which is the distribution the
    /// student is distilled towards.
    pub guided: f64,
    pub w: f64,
}

pub fn teacher_reference(teacher: &FlowModel, set: &EvalSet, cfg: &DistillConfig) -> Result<TeacherReference> {
    let steps = cfg.teacher_eval_steps;
    Ok(TeacherReference {
        steps,
        conditional: set.distance(&teacher_samples(teacher, set, None, steps)?)?,
        guided: set.distance(&teacher_samples(teacher, set, Some(cfg.w_const), steps)?)?,
        w: cfg.w_const,
    })
}

pub fn student_distance(student: &FlowModel, set: &EvalSet, cfg: &DistillConfig) -> Result<f64> {
    set.distance(&student_samples(student, set, cfg.w_const, cfg.eval_nfe)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn eval_set_is_seeded() {
        let cfg = DistillConfig {
            eval_samples: 64,
            ..Default::default()
        };
        let a = EvalSet::new(&cfg).unwrap();
        let b = EvalSet::new(&cfg).unwrap();
        assert_eq!(a.data.points, b.data.points);
        assert_eq!(a.noise, b.noise);
        let c = EvalSet::new(&DistillConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.noise, c.noise);
    }

    #[test]
    fn held_out_data_is_close_to_itself() {
        let cfg = DistillConfig {
            eval_samples: 512,
            ..Default::default()
        };
        let set = EvalSet::new(&cfg).unwrap();
        assert_eq!(set.distance(&set.data.points).unwrap(), 0.0);
        let d = set.distance(&set.noise).unwrap();
        assert!(d > 0.02, "{d}");
    }

    #[test]
    fn untrained_student_with_one_step_matches_teacher_euler() {
        let cfg = DistillConfig {
            eval_samples: 32,
            eval_nfe: 1,
            teacher_eval_steps: 1,
            ..Default::default()
        };
        let set = EvalSet::new(&cfg).unwrap();
        let teacher = FlowModel::new(ModelConfig::default(), 3).unwrap();
        let student = teacher.with_w_embedding();
        // zero guidance embedding: the student at any w is the conditional
        // teacher
        let s = student_samples(&student, &set, 5.0, 1).unwrap();
        let t = teacher_samples(&teacher, &set, None, 1).unwrap();
        for (a, b) in s.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
