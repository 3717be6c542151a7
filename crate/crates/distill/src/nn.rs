//! Small conditional MLP velocity model, Adam and EMA.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{N_CLASSES, NULL_CLASS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Inputs to `w` features are divided by this so `w` in `[0, 8]` maps to
/// `[0, 1]`.
pub const W_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Hidden `hidden x hidden` layers after the input embedding.
    pub layers: usize,
    /// Sinusoidal frequencies per scalar input; features are `2 * n_freq`.
    pub n_freq: usize,
    /// Adds a guidance-strength embedding.
    pub w_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            n_freq: 8,
            w_embed: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.n_freq == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `[sin(k_j s), cos(k_j s)]` for log-spaced `k_j` in `[1, 100]`.
pub fn sinusoidal(values: &[f64], n_freq: usize) -> Tensor {
    let freqs: Vec<f64> = (0..n_freq)
        .map(|j| {
            let u = if n_freq == 1 { 0.0 } else { j as f64 / (n_freq - 1) as f64 };
            (u * 100f64.ln()).exp()
        })
        .collect();
    let mut d = Vec::with_capacity(values.len() * 2 * n_freq);
    for &v in values {
        for &k in &freqs {
            d.push((k * v).sin());
        }
        for &k in &freqs {
            d.push((k * v).cos());
        }
    }
    Tensor::matrix(values.len(), 2 * n_freq, d)
}

fn one_hot(labels: &[usize]) -> Tensor {
    let mut d = vec![0.0; labels.len() * (N_CLASSES + 1)];
    for (i, &l) in labels.iter().enumerate() {
        d[i * (N_CLASSES + 1) + l.min(NULL_CLASS)] = 1.0;
    }
    Tensor::matrix(labels.len(), N_CLASSES + 1, d)
}

/// Velocity network `v(x, t, c[, w])`.
///
/// The input layer maps `x`; every layer, input included, adds linear maps
/// of the sinusoidal features of `t` (and `w`) and of the one-hot class.
/// `layers` SiLU layers are followed by a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub cfg: ModelConfig,
    params: Vec<Tensor>,
}

/// Parameter leaves of a model bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

pub struct Forward {
    pub out: Var,
    /// Post-activation output of each hidden layer.
    pub hidden: Vec<Var>,
}

/// Names and shapes of the parameters of `cfg`, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let h = cfg.hidden;
    let f = 2 * cfg.n_freq;
    let mut out = Vec::new();
    let cond = |out: &mut Vec<(String, [usize; 2])>, prefix: &str| {
        out.push((format!("{prefix}.t_embed"), [f, h]));
        out.push((format!("{prefix}.class_embed"), [N_CLASSES + 1, h]));
        if cfg.w_embed {
            out.push((format!("{prefix}.w_embed"), [f, h]));
        }
    };
    out.push(("in.weight".to_string(), [2, h]));
    out.push(("in.bias".to_string(), [1, h]));
    cond(&mut out, "in");
    for l in 0..cfg.layers {
        out.push((format!("hidden{l}.weight"), [h, h]));
        out.push((format!("hidden{l}.bias"), [1, h]));
        cond(&mut out, &format!("hidden{l}"));
    }
    out.push(("out.weight".to_string(), [h, 2]));
    out.push(("out.bias".to_string(), [1, 2]));
    out
}

impl FlowModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&cfg)
            .into_iter()
            .map(|(name, [rows, cols])| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(rows, cols);
                }
                let sd = 1.0 / (rows as f64).sqrt();
                let d = (0..rows * cols).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::matrix(rows, cols, d)
            })
            .collect();
        Ok(Self { cfg, params })
    }

    /// Rebuilds a model from tensors in [`names`](Self::names) order.
    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let lay = layout(&cfg);
        if lay.len() != params.len() || lay.iter().zip(&params).any(|((_, s), p)| p.shape() != s) {
            return Err(Error::Shape(format!("parameters do not match model config {cfg:?}")));
        }
        Ok(Self { cfg, params })
    }

    /// Copy with guidance embeddings added, initialised to zero so the
    /// output is unchanged for every `w`.
    pub fn with_w_embedding(&self) -> Self {
        if self.cfg.w_embed {
            return self.clone();
        }
        let cfg = ModelConfig {
            w_embed: true,
            ..self.cfg
        };
        let old: Vec<String> = self.names();
        let params = layout(&cfg)
            .into_iter()
            .map(|(name, [r, c])| match old.iter().position(|n| *n == name) {
                Some(i) => self.params[i].clone(),
                None => Tensor::zeros(r, c),
            })
            .collect();
        Self { cfg, params }
    }

    pub fn names(&self) -> Vec<String> {
        layout(&self.cfg).into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Binds parameters as tracked leaves (`trainable`) or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// `w` is required exactly when the model has a guidance embedding.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var, t: &[f64], c: &[usize], w: Option<&[f64]>) -> Result<Forward> {
        let n = tape.value(x).rows();
        if t.len() != n || c.len() != n {
            return Err(Error::Shape(format!("batch {n}, t {}, labels {}", t.len(), c.len())));
        }
        let wf = match (self.cfg.w_embed, w) {
            (true, Some(w)) => {
                if w.len() != n {
                    return Err(Error::Shape(format!("batch {n}, w {}", w.len())));
                }
                let ws: Vec<f64> = w.iter().map(|x| x / W_SCALE).collect();
                Some(tape.constant(sinusoidal(&ws, self.cfg.n_freq)))
            }
            (false, None) => None,
            (true, None) => return Err(Error::Config("guidance-conditioned model needs w".into())),
            (false, Some(_)) => return Err(Error::Config("model has no guidance embedding".into())),
        };
        let tf = tape.constant(sinusoidal(t, self.cfg.n_freq));
        let oh = tape.constant(one_hot(c));
        let mut vars = b.vars.iter().copied();
        let mut next = || vars.next().expect("bound parameters match the layout");
        let affine = |tape: &mut Tape, input: Var, next: &mut dyn FnMut() -> Var| {
            let z = tape.matmul(input, next());
            let z = tape.add_row(z, next());
            let te = tape.matmul(tf, next());
            let z = tape.add(z, te);
            let ce = tape.matmul(oh, next());
            let mut z = tape.add(z, ce);
            if let Some(wf) = wf {
                let we = tape.matmul(wf, next());
                z = tape.add(z, we);
            }
            z
        };
        let mut h = affine(tape, x, &mut next);
        let mut hidden = Vec::with_capacity(self.cfg.layers);
        for _ in 0..self.cfg.layers {
            let z = affine(tape, h, &mut next);
            h = tape.silu(z);
            hidden.push(h);
        }
        let out = tape.matmul(h, next());
        let out = tape.add_row(out, next());
        Ok(Forward { out, hidden })
    }

    /// Inference-only velocity.
    pub fn velocity(&self, x: &Tensor, t: &[f64], c: &[usize], w: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &b, xv, t, c, w)?;
        Ok(tape.value(f.out).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| !p.same_shape(g)) {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `target <- decay * target + (1 - decay) * online`, elementwise.
pub fn ema_update(target: &mut [Tensor], online: &[Tensor], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay must be in [0, 1], got {decay}")));
    }
    if target.len() != online.len() || target.iter().zip(online).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Shape("EMA target and online parameters differ in shape".into()));
    }
    for (t, o) in target.iter_mut().zip(online) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Per-head discriminator on teacher hidden features: `feature -> hidden ->
/// SiLU -> 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorHeads {
    /// Indices into the teacher's hidden layers.
    pub taps: Vec<usize>,
    params: Vec<Tensor>,
}

impl DiscriminatorHeads {
    pub fn new(taps: Vec<usize>, feature_width: usize, hidden: usize, seed: u64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Config("at least one discriminator head is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let sd = 1.0 / (rows as f64).sqrt();
            let d = (0..rows * cols).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(rows, cols, d)
        };
        let mut params = Vec::new();
        for _ in &taps {
            params.push(init(feature_width, hidden));
            params.push(Tensor::zeros(1, hidden));
            params.push(init(hidden, 1));
            params.push(Tensor::zeros(1, 1));
        }
        Ok(Self { taps, params })
    }

    pub fn from_params(taps: Vec<usize>, params: Vec<Tensor>) -> Result<Self> {
        if taps.is_empty() || params.len() != 4 * taps.len() {
            return Err(Error::Shape(format!("{} tensors for {} heads", params.len(), taps.len())));
        }
        for head in params.chunks(4) {
            let (fw, h) = (head[0].rows(), head[0].cols());
            let want = [[fw, h], [1, h], [h, 1], [1, 1]];
            if head.iter().zip(want).any(|(p, w)| p.shape() != w) {
                return Err(Error::Shape("malformed discriminator head".into()));
            }
        }
        Ok(Self { taps, params })
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = Vec::new();
        for k in 0..self.taps.len() {
            for s in ["fc.weight", "fc.bias", "out.weight", "out.bias"] {
                n.push(format!("head{k}.{s}"));
            }
        }
        n
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// One `[n, 1]` score per head from the tapped hidden features.
    pub fn scores(&self, tape: &mut Tape, b: &Bound, hidden: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.taps.len());
        for (k, &tap) in self.taps.iter().enumerate() {
            let f = *hidden
                .get(tap)
                .ok_or_else(|| Error::Config(format!("tap {tap} beyond {} hidden layers", hidden.len())))?;
            let v = &b.vars[4 * k..4 * k + 4];
            let z = tape.matmul(f, v[0]);
            let z = tape.add_row(z, v[1]);
            let z = tape.silu(z);
            let s = tape.matmul(z, v[2]);
            out.push(tape.add_row(s, v[3]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn zero_w_embedding_keeps_outputs() {
        let m = FlowModel::new(ModelConfig::default(), 3).unwrap();
        let s = m.with_w_embedding();
        assert_eq!(s.names().len(), s.params().len());
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.5, 0.3, 1.0, -1.0]);
        let t = [0.1, 0.5, 0.9];
        let c = [0, 1, NULL_CLASS];
        let a = m.velocity(&x, &t, &c, None).unwrap();
        for w in [2.0, 5.0, 8.0] {
            assert_eq!(s.velocity(&x, &t, &c, Some(&[w; 3])).unwrap(), a);
        }
        assert!(m.velocity(&x, &t, &c, Some(&[1.0; 3])).is_err());
        assert!(s.velocity(&x, &t, &c, None).is_err());
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            hidden: 8,
            layers: 2,
            n_freq: 3,
            w_embed: true,
        };
        let m = FlowModel::new(cfg, 1).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.4, 0.0, 1.0]);
        let err = grad_check(m.params(), 1e-6, 6, |tape, vars| {
            let b = Bound { vars: vars.to_vec() };
            let xv = tape.constant(x.clone());
            let f = m.forward(tape, &b, xv, &[0.1, 0.4, 0.7, 1.0], &[0, 1, 2, 0], Some(&[2.0, 3.0, 5.0, 8.0]))?;
            let sq = tape.sum_sq_rows(f.out);
            Ok(tape.mean(sq))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-9);
        assert!(opt.step(&mut p, &[Tensor::zeros(1, 2)]).is_err());
    }

    #[test]
    fn ema_examples() {
        let o = vec![Tensor::scalar(3.0)];
        let mut t = vec![Tensor::scalar(1.0)];
        ema_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t[0].item(), 1.0);
        ema_update(&mut t, &o, 0.0).unwrap();
        assert_eq!(t[0].item(), 3.0);
        let d: f64 = 0.9;
        let mut t = vec![Tensor::scalar(1.0)];
        ema_update(&mut t, &o, d).unwrap();
        ema_update(&mut t, &o, d).unwrap();
        assert!((t[0].item() - (d * d * 1.0 + (1.0 - d * d) * 3.0)).abs() < 1e-12);
        assert!(ema_update(&mut t, &[Tensor::zeros(2, 1)], 0.5).is_err());
        assert!(ema_update(&mut t, &o, 1.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ema_contracts_toward_online(a in -10.0f64..10.0, b in -10.0f64..10.0, d in 0.0f64..=1.0) {
            let mut t = vec![Tensor::scalar(a)];
            ema_update(&mut t, &[Tensor::scalar(b)], d).unwrap();
            proptest::prop_assert!(((t[0].item() - b).abs() - d * (a - b).abs()).abs() <= 1e-12);
        }
    }
}
