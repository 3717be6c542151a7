use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Mode standard deviation of `gmm8`.
pub const GMM_SIGMA: f64 = 0.05;
/// Both toy distributions carry two classes.
pub const N_CLASSES: usize = 2;
/// Label index meaning "no class", used for classifier-free guidance.
pub const NULL_CLASS: usize = N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDist {
    /// Eight Gaussians on the unit circle; class = mode index mod 2.
    Gmm8,
    /// Alternating unit squares on `[-2, 2]^2`; class = `x >= 0`.
    Checkerboard,
}

impl fmt::Display for ToyDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyDist::Gmm8 => "gmm8",
            ToyDist::Checkerboard => "checkerboard",
        })
    }
}

impl FromStr for ToyDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm8" => Ok(ToyDist::Gmm8),
            "checkerboard" => Ok(ToyDist::Checkerboard),
            other => Err(Error::Config(format!("unknown distribution `{other}` (gmm8, checkerboard)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    /// `[n, 2]`.
    pub points: Tensor,
    pub labels: Vec<usize>,
    /// `gmm8` mode of each point; empty for other distributions.
    pub modes: Vec<usize>,
}

/// Seeded batch. With `conditional` false every label is [`NULL_CLASS`].
pub fn sample_toy_data(dist: ToyDist, n: usize, conditional: bool, seed: u64) -> Result<ToyBatch> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = sample_with(dist, n, &mut rng);
    if !conditional {
        b.labels.iter_mut().for_each(|l| *l = NULL_CLASS);
    }
    Ok(b)
}

pub fn sample_with<R: Rng>(dist: ToyDist, n: usize, rng: &mut R) -> ToyBatch {
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut modes = Vec::new();
    match dist {
        ToyDist::Gmm8 => {
            modes.reserve(n);
            for _ in 0..n {
                let k = rng.random_range(0..8usize);
                let a = std::f64::consts::TAU * k as f64 / 8.0;
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                pts.push(a.cos() + GMM_SIGMA * ex);
                pts.push(a.sin() + GMM_SIGMA * ey);
                labels.push(k % 2);
                modes.push(k);
            }
        }
        ToyDist::Checkerboard => {
            for _ in 0..n {
                let x: f64 = rng.random_range(-2.0..2.0);
                let col = rng.random_range(0..2usize) as f64;
                let y = rng.random::<f64>() - 2.0 * col + (x.floor().rem_euclid(2.0));
                pts.push(x);
                pts.push(y);
                labels.push((x >= 0.0) as usize);
            }
        }
    }
    ToyBatch {
        points: Tensor::matrix(n, 2, pts),
        labels,
        modes,
    }
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all ordered pairs (diagonal
/// included), so identical multisets give 0.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Config("energy distance needs at least two samples per set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("dimension {} vs {}", a.cols(), b.cols())));
    }
    let mean_dist = |x: &Tensor, y: &Tensor| -> f64 {
        let mut total = 0.0;
        for i in 0..x.rows() {
            let xi = x.row(i);
            let mut row = 0.0;
            for j in 0..y.rows() {
                row += xi.iter().zip(y.row(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            }
            total += row;
        }
        total / (x.rows() * y.rows()) as f64
    };
    Ok((2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gmm8_mode_counts_are_balanced() {
        let n = 8000;
        let b = sample_toy_data(ToyDist::Gmm8, n, true, 11).unwrap();
        let mut counts = [0usize; 8];
        for &m in &b.modes {
            counts[m] += 1;
        }
        // multinomial sd of one cell: sqrt(n p (1 - p))
        let p = 1.0 / 8.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
        for i in 0..n {
            let r = b.points.row(i);
            assert!((r[0] * r[0] + r[1] * r[1]).sqrt() <= 1.0 + 5.0 * GMM_SIGMA);
            assert_eq!(b.labels[i], b.modes[i] % 2);
        }
    }

    #[test]
    fn seeded_batches_repeat() {
        for d in [ToyDist::Gmm8, ToyDist::Checkerboard] {
            assert_eq!(sample_toy_data(d, 100, true, 5).unwrap(), sample_toy_data(d, 100, true, 5).unwrap());
        }
        let u = sample_toy_data(ToyDist::Gmm8, 10, false, 5).unwrap();
        assert!(u.labels.iter().all(|&l| l == NULL_CLASS));
        assert!(sample_toy_data(ToyDist::Gmm8, 0, true, 5).is_err());
    }

    #[test]
    fn checkerboard_occupies_alternating_cells() {
        let b = sample_toy_data(ToyDist::Checkerboard, 2000, true, 3).unwrap();
        for i in 0..2000 {
            let r = b.points.row(i);
            assert!((-2.0..2.0).contains(&r[0]) && (-2.0..2.0).contains(&r[1]));
            assert_eq!((r[0].floor() + r[1].floor()).rem_euclid(2.0), 0.0);
        }
    }

    #[test]
    fn energy_distance_examples() {
        let a = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let b = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert!((energy_distance(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        let x = sample_toy_data(ToyDist::Gmm8, 300, true, 1).unwrap().points;
        assert!(energy_distance(&x, &x).unwrap().abs() <= 1e-12);
        assert!(energy_distance(&Tensor::zeros(1, 2), &x).is_err());
    }

    proptest! {
        #[test]
        fn energy_distance_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 4..40),
            b in proptest::collection::vec(-3.0f64..3.0, 4..40),
        ) {
            let ta = Tensor::matrix(a.len() / 2, 2, a[..a.len() / 2 * 2].to_vec());
            let tb = Tensor::matrix(b.len() / 2, 2, b[..b.len() / 2 * 2].to_vec());
            let ab = energy_distance(&ta, &tb).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - energy_distance(&tb, &ta).unwrap()).abs() <= 1e-12);
            let mut rev: Vec<f64> = Vec::new();
            for i in (0..ta.rows()).rev() {
                rev.extend_from_slice(ta.row(i));
            }
            let tr = Tensor::matrix(ta.rows(), 2, rev);
            prop_assert!(energy_distance(&ta, &tr).unwrap() <= 1e-12);
        }
    }
}
