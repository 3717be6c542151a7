//! Per-query FLOPs of a cross-attention decoder head.
//!
//! Multiply-adds count as 2 FLOPs and each layer norm as 5 FLOPs per channel.

use serde::{Deserialize, Serialize};

/// Width of the positional encoding concatenated to the xyz query.
pub const POS_ENC_WIDTH: u64 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub width: u64,
    pub kv_width: u64,
    pub mlp_ratio: u64,
    pub num_layernorms: u64,
    pub m_kv: u64,
}

impl HeadConfig {
    /// Wide head with a 4x MLP.
    pub fn baseline(m_kv: u64) -> Self {
        Self {
            width: 1024,
            kv_width: 1024,
            mlp_ratio: 4,
            num_layernorms: 4,
            m_kv,
        }
    }

    /// Half-width head with a 1x MLP and a single layer norm.
    pub fn efficient(m_kv: u64) -> Self {
        Self {
            width: 512,
            kv_width: 512,
            mlp_ratio: 1,
            num_layernorms: 1,
            m_kv,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.width == 0 || self.kv_width == 0 || self.mlp_ratio == 0 || self.m_kv == 0 {
            return Err(crate::Error::Config(format!("head config fields must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

pub fn attention_flops(m_kv: u64, kv_width: u64) -> u64 {
    m_kv * 4 * kv_width
}

pub fn flops_per_query(cfg: &HeadConfig) -> u64 {
    let d = cfg.width;
    let d_in = 3 + POS_ENC_WIDTH;
    2 * d_in * d + attention_flops(cfg.m_kv, cfg.kv_width) + 2 * d * d + 4 * cfg.mlp_ratio * d * d + 5 * d * cfg.num_layernorms
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn attention_term_is_linear_in_m_kv() {
        let a = HeadConfig::baseline(3072);
        let b = HeadConfig::baseline(1536);
        assert_eq!(flops_per_query(&a) - flops_per_query(&b), attention_flops(1536, 1024));
        assert_eq!(attention_flops(1536, 1024) * 2, attention_flops(3072, 1024));
    }

    #[test]
    fn efficient_head_reduction() {
        let base = flops_per_query(&HeadConfig::baseline(3072)) as f64;
        let eff = flops_per_query(&HeadConfig::efficient(3072)) as f64;
        let reduction = 1.0 - eff / base;
        // 2*51*1024 + 3072*4096 + 2*1024^2 + 16*1024^2 + 20480 = 31_582_208
        assert_eq!(base, 31_582_208.0);
        assert!(reduction >= 0.70, "{reduction}");
    }

    #[test]
    fn no_layernorm_term() {
        let mut c = HeadConfig::efficient(10);
        c.num_layernorms = 0;
        let with = HeadConfig { num_layernorms: 1, ..c };
        assert_eq!(flops_per_query(&with) - flops_per_query(&c), 5 * 512);
    }

    proptest! {
        #[test]
        fn strictly_monotone(w in 1u64..4096, kv in 1u64..4096, r in 1u64..8, ln in 0u64..8, m in 1u64..8192) {
            let c = HeadConfig { width: w, kv_width: kv, mlp_ratio: r, num_layernorms: ln, m_kv: m };
            let f = flops_per_query(&c);
            let wider = HeadConfig { width: w + 1, ..c };
            let bigger_mlp = HeadConfig { mlp_ratio: r + 1, ..c };
            let more_ln = HeadConfig { num_layernorms: ln + 1, ..c };
            let more_kv = HeadConfig { m_kv: m + 1, ..c };
            prop_assert!(flops_per_query(&wider) > f);
            prop_assert!(flops_per_query(&bigger_mlp) > f);
            prop_assert!(flops_per_query(&more_ln) > f);
            prop_assert!(flops_per_query(&more_kv) > f);
        }
    }
}
