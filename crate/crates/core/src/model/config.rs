use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorKind, Nonlinearity};
use crate::error::{Error, Result};
use crate::graph::GraphPolicy;

/// Grapher layers per stage. Two cascaded SVGA hops reach every patch.
pub const GRAPHERS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub irb_count: usize,
    #[serde(default = "default_graphers")]
    pub grapher_count: usize,
}

fn default_graphers() -> usize {
    GRAPHERS_PER_STAGE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub heads: usize,
    /// Hidden width of the classifier MLP.
    pub head_hidden: usize,
    #[serde(default = "default_aggregator")]
    pub aggregator: AggregatorKind,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_graph")]
    pub graph: GraphPolicy,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_aggregator() -> AggregatorKind {
    AggregatorKind::CrossAttention
}

fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::ExpAffinity
}

fn default_graph() -> GraphPolicy {
    GraphPolicy::Svga
}

fn default_in_channels() -> usize {
    3
}

impl ModelConfig {
    fn preset(name: &str, irbs: [usize; 4], channels: [usize; 4]) -> Self {
        ModelConfig {
            name: name.to_string(),
            stages: irbs
                .iter()
                .zip(channels)
                .map(|(&irb_count, channels)| StageConfig {
                    channels,
                    irb_count,
                    grapher_count: GRAPHERS_PER_STAGE,
                })
                .collect(),
            num_classes: 1000,
            heads: 8,
            head_hidden: 1024,
            aggregator: default_aggregator(),
            nonlinearity: default_nonlinearity(),
            graph: default_graph(),
            in_channels: 3,
        }
    }

    pub fn small() -> Self {
        Self::preset("S", [2, 2, 6, 2], [48, 96, 192, 384])
    }

    pub fn medium() -> Self {
        Self::preset("M", [4, 4, 12, 4], [56, 112, 224, 448])
    }

    pub fn base() -> Self {
        Self::preset("B", [5, 5, 15, 5], [64, 128, 256, 512])
    }

    /// Two-stage toy model for desk-scale runs: 32×32 input, 8×8 first grid.
    pub fn micro() -> Self {
        ModelConfig {
            name: "Micro".to_string(),
            stages: vec![
                StageConfig {
                    channels: 16,
                    irb_count: 1,
                    grapher_count: GRAPHERS_PER_STAGE,
                },
                StageConfig {
                    channels: 32,
                    irb_count: 1,
                    grapher_count: GRAPHERS_PER_STAGE,
                },
            ],
            num_classes: 4,
            heads: 2,
            head_hidden: 64,
            aggregator: default_aggregator(),
            nonlinearity: default_nonlinearity(),
            graph: default_graph(),
            in_channels: 3,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["S", "M", "B", "Micro"];

    pub fn from_preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Self::small()),
            "m" | "medium" => Ok(Self::medium()),
            "b" | "base" => Ok(Self::base()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::config(format!(
                "unknown preset `{name}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_aggregator(mut self, kind: AggregatorKind) -> Self {
        self.aggregator = kind;
        self
    }

    pub fn with_nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }

    /// Input height and width must be multiples of this.
    pub fn input_divisor(&self) -> usize {
        4 << self.stages.len().saturating_sub(1)
    }

    /// Grid extent `(h, w)` of every stage for an `h × w` input.
    pub fn stage_grids(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        (0..self.stages.len())
            .map(|i| (height / (4 << i), width / (4 << i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("model `{}`: {msg}", self.name)));
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be positive".into());
        }
        if self.stages[0].channels % 2 != 0 {
            return fail("first-stage channels must be even; the stem halves them".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.grapher_count != GRAPHERS_PER_STAGE {
                return fail(format!(
                    "stage {i} has {} Grapher layers; every stage has exactly {GRAPHERS_PER_STAGE}",
                    s.grapher_count
                ));
            }
            if s.channels == 0 {
                return fail(format!("stage {i} has zero channels"));
            }
            if i > 0 && s.channels <= self.stages[i - 1].channels {
                return fail(format!(
                    "channels must strictly increase, but stage {i} has {} after {}",
                    s.channels,
                    self.stages[i - 1].channels
                ));
            }
            if self.aggregator == AggregatorKind::CrossAttention && (self.heads == 0 || s.channels % self.heads != 0)
            {
                return fail(format!(
                    "stage {i} has {} channels, not divisible into {} heads",
                    s.channels, self.heads
                ));
            }
        }
        if let GraphPolicy::Knn { k } = self.graph {
            if k == 0 {
                return fail("kNN graphs need k ≥ 1".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
