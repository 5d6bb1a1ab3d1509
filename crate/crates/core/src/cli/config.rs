use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocking::AnchorSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenId};
use crate::numerics::Prng;
use crate::sim::StarConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "star")]
    Star,
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "ring-model")]
    RingModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub sequence_len: usize,
    pub block_size: usize,
    pub hosts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// One experiment. Every field has a default; see the README for the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sequence_len: usize,
    /// Defaults to `sequence_len / 4`.
    pub block_size: Option<usize>,
    pub anchor: AnchorSpec,
    /// Defaults to the number of blocks.
    pub hosts: Option<usize>,
    pub allow_idle_hosts: bool,
    /// Context text; its bytes are cycled to `sequence_len`. Absent means
    /// seeded random bytes.
    pub context: Option<String>,
    pub query: String,
    pub n_generate: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Max-abs logit tolerance for `compare` in the exact regime (n ≤ 2).
    pub tolerance: f64,
    /// Strategies for `ablate`, `content/position[@anchor_len]`.
    pub strategies: Option<Vec<String>>,
    /// Points for `bench`; defaults to the single configured point.
    pub sweep: Option<Vec<SweepPoint>>,
    /// Logit bonus on the first key of each attention window for `profile`.
    pub sink_bias: f64,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sequence_len: 64,
            block_size: None,
            anchor: AnchorSpec::default(),
            hosts: None,
            allow_idle_hosts: false,
            context: None,
            query: "Where is the needle?".into(),
            n_generate: 8,
            mode: Mode::Star,
            seed: 0,
            tolerance: 1e-5,
            strategies: None,
            sweep: None,
            sink_bias: 8.0,
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("config field `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.sequence_len == 0 {
            return Err(Error::config("sequence_len must be at least 1"));
        }
        let b = self.block_size();
        if b == 0 || b > self.sequence_len {
            return Err(Error::config(format!(
                "block_size {b} must be in 1..={}",
                self.sequence_len
            )));
        }
        self.anchor
            .validate(b, self.model.vocab)
            .map_err(|e| Error::config(format!("anchor: {e}")))?;
        if self.query.is_empty() {
            return Err(Error::config("query must not be empty"));
        }
        if self.hosts == Some(0) {
            return Err(Error::config("hosts must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::config("tolerance must be a nonnegative number"));
        }
        self.query_tokens()?;
        if let Some(c) = &self.context {
            if c.is_empty() {
                return Err(Error::config("context must not be empty when given"));
            }
            self.bytes_to_tokens("context", c.as_bytes())?;
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.block_size.unwrap_or((self.sequence_len / 4).max(1))
    }

    pub fn num_blocks(&self) -> usize {
        self.sequence_len.div_ceil(self.block_size())
    }

    pub fn hosts(&self) -> usize {
        self.hosts.unwrap_or_else(|| self.num_blocks())
    }

    pub fn star(&self) -> StarConfig {
        self.star_with(self.anchor)
    }

    pub fn star_with(&self, anchor: AnchorSpec) -> StarConfig {
        StarConfig {
            block_size: self.block_size(),
            anchor,
            hosts: self.hosts(),
            allow_idle_hosts: self.allow_idle_hosts,
            seed: self.seed,
        }
    }

    fn bytes_to_tokens(&self, field: &str, bytes: &[u8]) -> Result<Vec<TokenId>> {
        bytes
            .iter()
            .map(|&b| {
                if (b as usize) < self.model.vocab {
                    Ok(b as TokenId)
                } else {
                    Err(Error::config(format!(
                        "{field} byte {b} is outside vocab {}",
                        self.model.vocab
                    )))
                }
            })
            .collect()
    }

    pub fn query_tokens(&self) -> Result<Vec<TokenId>> {
        self.bytes_to_tokens("query", self.query.as_bytes())
    }

    pub fn context_tokens(&self) -> Result<Vec<TokenId>> {
        match &self.context {
            Some(text) => {
                let t = self.bytes_to_tokens("context", text.as_bytes())?;
                Ok(t.iter().cycle().take(self.sequence_len).copied().collect())
            }
            None => {
                let mut prng = Prng::new(self.seed ^ 0xC0_47E7);
                Ok((0..self.sequence_len)
                    .map(|_| prng.next_below(self.model.vocab as u64) as TokenId)
                    .collect())
            }
        }
    }

    pub fn strategies(&self) -> Result<Vec<AnchorSpec>> {
        match &self.strategies {
            None => Ok(AnchorSpec::ablation_suite()),
            Some(list) if list.is_empty() => Err(Error::config("strategies must not be empty")),
            Some(list) => list
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::config(format!("strategies: {e}")))
                })
                .collect(),
        }
    }

    pub fn sweep(&self) -> Vec<SweepPoint> {
        self.sweep.clone().unwrap_or_else(|| {
            vec![SweepPoint {
                sequence_len: self.sequence_len,
                block_size: self.block_size(),
                hosts: self.hosts(),
            }]
        })
    }
}
