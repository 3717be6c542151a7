//! Lane-parallel f32 evaluation of the softmax tangent-plane field.
//!
//! Tokens are stored structure-of-arrays in chunks of [`LANES`]. Chunks are
//! padded with anchors at `+inf` and zero planes, whose scores are `-inf` and
//! whose weights are exactly zero, so a block gathered from every token is
//! bitwise interchangeable with the full block.

use super::latents::Token;

pub const LANES: usize = 16;

#[derive(Debug, Clone, Copy)]
#[repr(C, align(64))]
struct Chunk {
    ax: [f32; LANES],
    ay: [f32; LANES],
    az: [f32; LANES],
    nx: [f32; LANES],
    ny: [f32; LANES],
    nz: [f32; LANES],
    off: [f32; LANES],
}

impl Chunk {
    const PAD: Chunk = Chunk {
        ax: [f32::INFINITY; LANES],
        ay: [f32::INFINITY; LANES],
        az: [f32::INFINITY; LANES],
        nx: [0.0; LANES],
        ny: [0.0; LANES],
        nz: [0.0; LANES],
        off: [0.0; LANES],
    };
}

/// A gathered subset of tokens ready for evaluation.
#[derive(Debug, Clone)]
pub struct TokenBlock {
    chunks: Vec<Chunk>,
    len: usize,
}

impl TokenBlock {
    pub fn from_tokens(tokens: &[Token], indices: impl IntoIterator<Item = usize>) -> Self {
        let mut chunks = Vec::new();
        let mut len = 0usize;
        for i in indices {
            let lane = len % LANES;
            if lane == 0 {
                chunks.push(Chunk::PAD);
            }
            let c = chunks.last_mut().unwrap();
            let t = &tokens[i];
            c.ax[lane] = t.anchor[0] as f32;
            c.ay[lane] = t.anchor[1] as f32;
            c.az[lane] = t.anchor[2] as f32;
            c.nx[lane] = t.normal[0] as f32;
            c.ny[lane] = t.normal[1] as f32;
            c.nz[lane] = t.normal[2] as f32;
            c.off[lane] = t.offset as f32;
            len += 1;
        }
        Self { chunks, len }
    }

    /// Number of real (unpadded) tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Softmax-weighted tangent-plane distance at `q`, before truncation.
    /// `neg_inv_tau` is `-1 / tau`.
    pub fn raw_value(&self, q: [f32; 3], neg_inv_tau: f32) -> f32 {
        SCRATCH.with(|cell| {
            let mut scores = cell.borrow_mut();
            scores.resize(self.chunks.len(), [0.0; LANES]);
            self.raw_value_with(q, neg_inv_tau, &mut scores)
        })
    }

    fn raw_value_with(&self, q: [f32; 3], neg_inv_tau: f32, scores: &mut [[f32; LANES]]) -> f32 {
        let mut mx = [f32::NEG_INFINITY; LANES];
        for (c, out) in self.chunks.iter().zip(scores.iter_mut()) {
            for l in 0..LANES {
                let s = score(c, l, q, neg_inv_tau);
                out[l] = s;
                mx[l] = if s > mx[l] { s } else { mx[l] };
            }
        }
        let m = mx.iter().fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let mut sw = [0.0f32; LANES];
        let mut sv = [0.0f32; LANES];
        for (c, s) in self.chunks.iter().zip(scores.iter()) {
            for l in 0..LANES {
                let e = exp_f32(s[l] - m);
                let plane = c.nx[l] * q[0] + c.ny[l] * q[1] + c.nz[l] * q[2] + c.off[l];
                sw[l] += e;
                sv[l] += e * plane;
            }
        }
        hsum(&sv) / hsum(&sw)
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<[f32; LANES]>> = const { std::cell::RefCell::new(Vec::new()) };
}

#[inline(always)]
fn score(c: &Chunk, l: usize, q: [f32; 3], neg_inv_tau: f32) -> f32 {
    let dx = q[0] - c.ax[l];
    let dy = q[1] - c.ay[l];
    let dz = q[2] - c.az[l];
    (dx * dx + dy * dy + dz * dz) * neg_inv_tau
}

#[inline(always)]
fn hsum(v: &[f32; LANES]) -> f32 {
    let mut acc = [0.0f32; 4];
    for (i, x) in v.iter().enumerate() {
        acc[i % 4] += x;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Branch-free `exp` for non-positive arguments; results below `e^-87` are
/// flushed to zero so no denormals enter the accumulators.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0;
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_751_953_125;
    const LN2_LO: f32 = 1.428_606_765_330_187e-6;
    let flush = !(x >= -87.0);
    let x = x.max(-87.0);
    let kf = x * LOG2E + SHIFTER;
    let kb = kf.to_bits();
    let k = kf - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let v = p * f32::from_bits(kb.wrapping_add(127) << 23);
    if flush {
        0.0
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x <= 0.0 {
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            worst = worst.max((got - want).abs() / want);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "max rel err {worst}");
    }

    #[test]
    fn exp_flushes_tail_and_infinity() {
        assert_eq!(exp_f32(-88.0), 0.0);
        assert_eq!(exp_f32(f32::NEG_INFINITY), 0.0);
        assert_eq!(exp_f32(f32::NAN), 0.0);
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn padding_contributes_nothing() {
        let tokens: Vec<Token> = (0..5)
            .map(|i| Token::new([0.1 * i as f64, 0.0, 0.0], [0.0, 0.0, 1.0]))
            .collect();
        let block = TokenBlock::from_tokens(&tokens, 0..5);
        assert_eq!(block.len(), 5);
        assert_eq!(block.chunks.len(), 1);
        let v = block.raw_value([0.2, 0.0, 0.3], -100.0);
        assert!((v - 0.3).abs() < 1e-6);
    }
}
