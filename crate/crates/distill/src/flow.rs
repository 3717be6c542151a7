//! Guidance, Euler integration and the one-step student map.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data); `x_t = (1 - t) x_0 + t e`
//! and the model predicts `dx/dt = e - x_0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Bound, FlowModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `v_u + w (v_c - v_u)`; `w = 1` returns the conditional velocity itself.
pub fn cfg_velocity(model: &FlowModel, x: &Tensor, t: &[f64], c: &[usize], w: f64) -> Result<Tensor> {
    if !w.is_finite() {
        return Err(Error::Config(format!("guidance strength must be finite, got {w}")));
    }
    let vc = model.velocity(x, t, c, None)?;
    if w == 1.0 {
        return Ok(vc);
    }
    let null = vec![crate::data::NULL_CLASS; c.len()];
    let vu = model.velocity(x, t, &null, None)?;
    Ok(vu.zip_map(&vc, |u, c| u + w * (c - u)))
}

/// Per-row guidance strengths.
pub fn cfg_velocity_rows(model: &FlowModel, x: &Tensor, t: &[f64], c: &[usize], w: &[f64]) -> Result<Tensor> {
    let vc = model.velocity(x, t, c, None)?;
    let null = vec![crate::data::NULL_CLASS; c.len()];
    let vu = model.velocity(x, t, &null, None)?;
    let cols = vc.cols();
    let mut d = vu.into_data();
    for (i, row) in d.chunks_exact_mut(cols).enumerate() {
        for (j, u) in row.iter_mut().enumerate() {
            let c = vc.data()[i * cols + j];
            *u = if w[i] == 1.0 { c } else { *u + w[i] * (c - *u) };
        }
    }
    Ok(Tensor::matrix(x.rows(), cols, d))
}

/// A velocity field over a batch at a shared time.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Teacher velocity, conditional (`w = None`) or with classifier-free guidance.
pub struct TeacherField<'a> {
    pub model: &'a FlowModel,
    pub labels: &'a [usize],
    pub w: Option<f64>,
}

impl VelocityField for TeacherField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let ts = vec![t; x.rows()];
        match self.w {
            Some(w) => cfg_velocity(self.model, x, &ts, self.labels, w),
            None => self.model.velocity(x, &ts, self.labels, None),
        }
    }
}

/// Guidance-conditioned student queried at a fixed `w`.
pub struct StudentField<'a> {
    pub model: &'a FlowModel,
    pub labels: &'a [usize],
    pub w: f64,
}

impl VelocityField for StudentField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let n = x.rows();
        self.model.velocity(x, &vec![t; n], self.labels, Some(&vec![self.w; n]))
    }
}

/// Explicit Euler from `t_from` down to `t_to` in `steps` uniform steps.
pub fn ode_solve(field: &dyn VelocityField, x_start: &Tensor, t_from: f64, t_to: f64, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("ode_solve needs at least one step".into()));
    }
    if !(0.0 <= t_to && t_to < t_from && t_from <= 1.0) {
        return Err(Error::Config(format!("need 0 <= t_to < t_from <= 1, got {t_from} -> {t_to}")));
    }
    let mut x = x_start.clone();
    let time = |k: usize| t_from + (t_to - t_from) * k as f64 / steps as f64;
    for k in 0..steps {
        let (t, tn) = (time(k), time(k + 1));
        let v = field.velocity(&x, t)?;
        x = x.zip_map(&v, |a, b| a + (tn - t) * b);
    }
    Ok(x)
}

/// One big Euler step `x + (t_end - t) v(x, t)`; returns `x` when
/// `t_end == t`.
pub fn student_predict(
    model: &FlowModel,
    x: &Tensor,
    t: &[f64],
    t_end: &[f64],
    c: &[usize],
    w: Option<&[f64]>,
) -> Result<Tensor> {
    check_ends(t, t_end)?;
    let v = model.velocity(x, t, c, w)?;
    let cols = x.cols();
    let mut d = x.data().to_vec();
    for (i, row) in d.chunks_exact_mut(cols).enumerate() {
        let h = t_end[i] - t[i];
        for (j, a) in row.iter_mut().enumerate() {
            *a += h * v.data()[i * cols + j];
        }
    }
    Ok(Tensor::matrix(x.rows(), cols, d))
}

/// Tape version of [`student_predict`] for training.
#[allow(clippy::too_many_arguments)]
pub fn student_predict_on(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &Bound,
    x: Var,
    t: &[f64],
    t_end: &[f64],
    c: &[usize],
    w: Option<&[f64]>,
) -> Result<Var> {
    check_ends(t, t_end)?;
    let f = model.forward(tape, bound, x, t, c, w)?;
    let h: Vec<f64> = t_end.iter().zip(t).map(|(e, s)| e - s).collect();
    let step = tape.mul_col(f.out, &h);
    Ok(tape.add(x, step))
}

fn check_ends(t: &[f64], t_end: &[f64]) -> Result<()> {
    if t.len() != t_end.len() {
        return Err(Error::Shape(format!("{} times vs {} end times", t.len(), t_end.len())));
    }
    if let Some(i) = t.iter().zip(t_end).position(|(s, e)| e > s) {
        return Err(Error::Config(format!("t_end {} after t {} at row {i}", t_end[i], t[i])));
    }
    Ok(())
}

/// Standard normal `[n, 2]` noise from `seed`.
pub fn gaussian_noise(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, 2, (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// `nfe` uniform student steps from `t = 1` to `t = 0`.
pub fn student_sample(model: &FlowModel, noise: &Tensor, labels: &[usize], w: f64, nfe: usize) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::Config("at least one function evaluation is required".into()));
    }
    let n = noise.rows();
    let mut x = noise.clone();
    let ws = vec![w; n];
    for k in 0..nfe {
        let t = 1.0 - k as f64 / nfe as f64;
        let te = 1.0 - (k + 1) as f64 / nfe as f64;
        x = student_predict(model, &x, &vec![t; n], &vec![te; n], labels, Some(&ws))?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NULL_CLASS;
    use crate::nn::ModelConfig;

    fn model() -> FlowModel {
        FlowModel::new(ModelConfig::default(), 9).unwrap()
    }

    fn batch() -> (Tensor, Vec<f64>, Vec<usize>) {
        (
            Tensor::matrix(3, 2, vec![0.2, -0.1, 0.7, 0.4, -1.2, 0.3]),
            vec![0.2, 0.6, 1.0],
            vec![0, 1, 0],
        )
    }

    #[test]
    fn guidance_endpoints() {
        let m = model();
        let (x, t, c) = batch();
        assert_eq!(cfg_velocity(&m, &x, &t, &c, 1.0).unwrap(), m.velocity(&x, &t, &c, None).unwrap());
        let null = vec![NULL_CLASS; 3];
        assert_eq!(cfg_velocity(&m, &x, &t, &c, 0.0).unwrap(), m.velocity(&x, &t, &null, None).unwrap());
        // unconditional labels make v_c == v_u, so w has no effect
        let a = cfg_velocity(&m, &x, &t, &null, 0.0).unwrap();
        for w in [2.0, 5.0, -3.0] {
            assert_eq!(cfg_velocity(&m, &x, &t, &null, w).unwrap(), a);
        }
        assert!(cfg_velocity(&m, &x, &t, &c, f64::NAN).is_err());
        let rows = cfg_velocity_rows(&m, &x, &t, &c, &[5.0; 3]).unwrap();
        assert_eq!(rows, cfg_velocity(&m, &x, &t, &c, 5.0).unwrap());
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let x0 = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let zero = |x: &Tensor, _t: f64| Ok(Tensor::zeros(x.rows(), 2));
        assert_eq!(ode_solve(&zero, &x0, 1.0, 0.0, 7).unwrap(), x0);
        let c = |x: &Tensor, _t: f64| Ok(Tensor::matrix(x.rows(), 2, vec![0.5, -1.0].repeat(x.rows())));
        for steps in [1, 3, 50] {
            let x = ode_solve(&c, &x0, 0.9, 0.1, steps).unwrap();
            let want = [1.0 - 0.4, 2.0 + 0.8, 3.0 - 0.4, 4.0 + 0.8];
            for (a, b) in x.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(ode_solve(&c, &x0, 0.5, 0.5, 1).is_err());
        assert!(ode_solve(&c, &x0, 0.5, 0.1, 0).is_err());
    }

    #[test]
    fn student_boundary_and_linear_flow() {
        let m = model().with_w_embedding();
        let (x, t, c) = batch();
        let w = [5.0; 3];
        assert_eq!(student_predict(&m, &x, &t, &t, &c, Some(&w)).unwrap(), x);
        assert!(student_predict(&m, &x, &t, &[1.0, 1.0, 1.0], &c, Some(&w)).is_err());
        // a constant field makes the one-step map agree with any Euler solve
        let v = [0.3, -0.2];
        let field = |x: &Tensor, _t: f64| Ok(Tensor::matrix(x.rows(), 2, v.repeat(x.rows())));
        let one = x.zip_map(&Tensor::matrix(3, 2, v.repeat(3)), |a, b| a + (0.0 - 1.0) * b);
        let many = ode_solve(&field, &x, 1.0, 0.0, 40).unwrap();
        for (a, b) in one.data().iter().zip(many.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_predict_matches_inference() {
        let m = model().with_w_embedding();
        let (x, t, c) = batch();
        let te = [0.0, 0.4, 0.8];
        let w = [2.0, 5.0, 8.0];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let p = student_predict_on(&mut tape, &m, &b, xv, &t, &te, &c, Some(&w)).unwrap();
        assert_eq!(tape.value(p), &student_predict(&m, &x, &t, &te, &c, Some(&w)).unwrap());
    }
}
