//! Run configuration and named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::bench::DEFAULT_BUDGET_BYTES;
use crate::decoders::Vocab;
use crate::encoders::{EncoderConfig, Family, HeadSpec};
use crate::error::{Error, Result};
use crate::pipeline::DecoderKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub scale: Scale,
    pub encoder: EncoderConfig,
    pub heads: HeadSpec,
    pub decoder: DecoderKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget_bytes: u64,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET_BYTES
}

pub const PRESETS: [&str; 10] = [
    "toy-quartznet2",
    "toy-contextnet",
    "toy-citrinet",
    "toy-conformer",
    "toy-fastconformer",
    "toy-fastconformer-gt",
    "table2-quartznet2",
    "table2-contextnet",
    "table2-conformer",
    "table2-fastconformer",
];

fn large_conformer(family: Family, num_blocks: usize) -> EncoderConfig {
    EncoderConfig {
        family,
        num_blocks,
        stem_channels: 256,
        model_dim: 512,
        attention: AttentionConfig {
            num_heads: 8,
            head_dim: 64,
            left_context: 128,
            right_context: 128,
            use_global_token: family == Family::ConformerLCAGT,
        },
        ..EncoderConfig::toy(family)
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (scale, encoder) = match name {
            "toy-quartznet2" => (Scale::Toy, EncoderConfig::toy(Family::ConvOnly)),
            "toy-contextnet" => (Scale::Toy, EncoderConfig::toy(Family::ConvSE)),
            "toy-citrinet" => (Scale::Toy, EncoderConfig::toy(Family::ConvSECitrinet)),
            "toy-conformer" => (Scale::Toy, EncoderConfig::toy(Family::ConformerFull)),
            "toy-fastconformer" => (Scale::Toy, EncoderConfig::toy(Family::ConformerLCA)),
            "toy-fastconformer-gt" => (Scale::Toy, EncoderConfig::toy(Family::ConformerLCAGT)),
            "table2-quartznet2" => (
                Scale::Paper,
                EncoderConfig {
                    num_blocks: 112,
                    channels: 1024,
                    stem_channels: 256,
                    ..EncoderConfig::toy(Family::ConvOnly)
                },
            ),
            "table2-contextnet" => (
                Scale::Paper,
                EncoderConfig {
                    num_blocks: 22,
                    channels: 480,
                    se_reduction: 8,
                    ..EncoderConfig::toy(Family::ConvSE)
                },
            ),
            "table2-conformer" => (Scale::Paper, large_conformer(Family::ConformerFull, 20)),
            "table2-fastconformer" => (Scale::Paper, large_conformer(Family::ConformerLCA, 18)),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        let vocab = Vocab::characters().len();
        let heads = match scale {
            Scale::Toy => HeadSpec::both(vocab),
            Scale::Paper => HeadSpec {
                pred_dim: 640,
                joint_dim: 640,
                ..HeadSpec::both(vocab)
            },
        };
        let cfg = RunConfig {
            name: name.to_string(),
            scale,
            encoder,
            heads,
            decoder: DecoderKind::Rnnt,
            seed: 0,
            budget_bytes: DEFAULT_BUDGET_BYTES,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name, or a path to a JSON run configuration.
    pub fn resolve(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::Config(format!(
                "`{spec}` is neither a preset ({}) nor an existing file",
                PRESETS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let vocab = Vocab::characters().len();
        if self.heads.vocab_size != vocab {
            return Err(Error::Config(format!(
                "heads.vocab_size must be {vocab} for the character vocabulary, got {}",
                self.heads.vocab_size
            )));
        }
        if !self.heads.ctc && !self.heads.rnnt {
            return Err(Error::Config("at least one decoder head must be enabled".into()));
        }
        let enabled = match self.decoder {
            DecoderKind::Ctc => self.heads.ctc,
            DecoderKind::Rnnt => self.heads.rnnt,
        };
        if !enabled {
            return Err(Error::Config(format!("decoder {} has no head", self.decoder)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{analytic_parameter_count, head_param_specs};

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(matches!(RunConfig::preset("huge"), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::preset("toy-fastconformer-gt").unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn large_preset_sizes_within_fifteen_percent() {
        for (name, target_m) in [
            ("table2-quartznet2", 120.0),
            ("table2-contextnet", 140.0),
            ("table2-conformer", 120.0),
            ("table2-fastconformer", 114.0),
        ] {
            let cfg = RunConfig::preset(name).unwrap();
            let body = analytic_parameter_count(&cfg.encoder).unwrap();
            let heads: usize = head_param_specs(cfg.encoder.output_dim(), &cfg.heads)
                .unwrap()
                .iter()
                .map(|p| p.numel())
                .sum();
            let millions = (body + heads) as f64 / 1e6;
            assert!((millions / target_m - 1.0).abs() <= 0.15, "{name}: {millions:.1} M");
        }
    }

    #[test]
    fn invalid_json_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"name\": 3}").unwrap();
        assert!(matches!(
            RunConfig::resolve(path.to_str().unwrap()),
            Err(Error::Config(_))
        ));
        let mut cfg = RunConfig::preset("toy-quartznet2").unwrap();
        cfg.encoder.kernel_size = 3;
        std::fs::write(&path, cfg.to_json()).unwrap();
        assert!(matches!(
            RunConfig::resolve(path.to_str().unwrap()),
            Err(Error::Config(_))
        ));
    }
}
