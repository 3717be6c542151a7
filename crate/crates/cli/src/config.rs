//! TOML configuration shared by every subcommand.
//!
//! ```toml
//! [field]
//! m_tokens = 1024
//! tau = 1e-3
//! # trunc = 0.125      # default: 4 base voxels
//!
//! [decode]             # DecodeConfig
//! target_res = 256
//! base_res = 64
//!
//! [akvs]               # AkvsConfig, used by hier+akvs
//! r = 16
//! k = 512
//!
//! [bench]              # a full BenchSuite; replaces the named suite
//!
//! [distill]            # DistillConfig
//! teacher_steps = 20000
//! ```
//!
//! Unknown keys are rejected. Command-line flags override file values.

use std::path::Path;

use fvdm_core::akvs::AkvsConfig;
use fvdm_core::field::DEFAULT_TAU;
use fvdm_core::hierdec::DecodeConfig;
use fvdm_core::metrics::BenchSuite;
use fvdm_distill::DistillConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub m_tokens: usize,
    pub tau: f64,
    pub trunc: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            m_tokens: 1024,
            tau: DEFAULT_TAU,
            trunc: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub field: FieldConfig,
    pub decode: DecodeConfig,
    pub akvs: AkvsConfig,
    pub bench: Option<BenchSuite>,
    pub distill: DistillConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_defaults() {
        let c: CliConfig = toml::from_str("[decode]\nbase_res = 32\n[distill]\nseed = 4\n").unwrap();
        assert_eq!(c.decode.base_res, 32);
        assert_eq!(c.decode.target_res, 256);
        assert_eq!(c.distill.seed, 4);
        assert_eq!(c.field, FieldConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("[decode]\nbase = 32\n").is_err());
        assert!(toml::from_str::<CliConfig>("[nope]\n").is_err());
        assert!(toml::from_str::<CliConfig>("[distill]\nlearning_rate = 1\n").is_err());
    }
}
