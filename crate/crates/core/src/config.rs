//! Model and training configuration, serialized as TOML.
//!
//! The default configuration is the three-stage setup the acceptance run
//! uses: stage resolutions 1/4, 1/2 and 1/1 of the input, coarsest first.
//! `ModelConfig::default_toml` prints the schema with its defaults filled in,
//! and a file parsed back from that text equals the in-memory defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window-transformer settings of the cost aggregation stack at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdactConfig {
    /// Number of (regular, shifted) transformer layer pairs.
    pub layer_pairs: usize,
    /// Token embedding width E.
    pub embed: usize,
    /// Spatial patch extents (height, width); depth is never patched.
    pub patch: [usize; 2],
    /// Attention window extents (height, width, depth).
    pub window: [usize; 3],
}

/// Regression-transformer settings for one iteration of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrtConfig {
    /// Embedding width E_r the depth channel axis is projected to.
    pub embed: usize,
    /// Square spatial window extent.
    pub window: usize,
    /// Square spatial patch extent (1 = per-pixel tokens).
    pub patch: usize,
    /// Number of (regular, shifted) layer pairs.
    pub layer_pairs: usize,
}

/// One resolution stage of the coarse-to-fine loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Hypothesis refinement iterations run at this stage.
    pub iterations: usize,
    /// Depth hypotheses D per pixel.
    pub hypotheses: usize,
    /// Correlation groups G.
    pub groups: usize,
    pub rdact: RdactConfig,
    /// One entry per iteration.
    pub rrt: Vec<RrtConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Source views consumed per scene.
    pub views: usize,
    /// Attention heads in every transformer layer.
    pub heads: usize,
    /// Stages, coarsest first; stage `k` runs at 1/2^(stages−1−k) resolution.
    pub stages: Vec<StageConfig>,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let rdact = |layer_pairs, embed| RdactConfig {
            layer_pairs,
            embed,
            patch: [4, 4],
            window: [7, 7, 2],
        };
        let rrt = |embed| RrtConfig {
            embed,
            window: 8,
            patch: 1,
            layer_pairs: 1,
        };
        ModelConfig {
            views: 2,
            heads: 2,
            stages: vec![
                StageConfig {
                    iterations: 2,
                    hypotheses: 16,
                    groups: 8,
                    rdact: rdact(4, 8),
                    rrt: vec![rrt(32), rrt(64)],
                },
                StageConfig {
                    iterations: 2,
                    hypotheses: 8,
                    groups: 8,
                    rdact: rdact(2, 8),
                    rrt: vec![rrt(16), rrt(16)],
                },
                StageConfig {
                    iterations: 1,
                    hypotheses: 4,
                    groups: 4,
                    rdact: rdact(2, 4),
                    rrt: vec![rrt(8)],
                },
            ],
            train: TrainConfig {
                learning_rate: 1e-3,
                steps: 500,
            },
        }
    }
}

impl ModelConfig {
    /// Structural sanity checks that do not depend on input extents.
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("views must be ≥ 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be ≥ 1".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let ctx = |msg: String| Error::Config(format!("stage {i}: {msg}"));
            if stage.iterations == 0 {
                return Err(ctx("iterations must be ≥ 1".into()));
            }
            if stage.hypotheses == 0 {
                return Err(ctx("at least one depth hypothesis is needed".into()));
            }
            if stage.groups == 0 {
                return Err(ctx("groups must be ≥ 1".into()));
            }
            if stage.rrt.len() != stage.iterations {
                return Err(ctx(format!(
                    "{} regression-transformer configs for {} iterations",
                    stage.rrt.len(),
                    stage.iterations
                )));
            }
            let r = &stage.rdact;
            if r.embed == 0 || r.embed % self.heads != 0 {
                return Err(ctx(format!(
                    "aggregation embed {} must be a positive multiple of heads {}",
                    r.embed, self.heads
                )));
            }
            if r.patch.contains(&0) || r.window.contains(&0) {
                return Err(ctx("patch and window extents must be positive".into()));
            }
            for (j, rr) in stage.rrt.iter().enumerate() {
                if rr.embed == 0 || rr.embed % self.heads != 0 {
                    return Err(ctx(format!(
                        "iteration {j}: regression embed {} must be a positive multiple of heads {}",
                        rr.embed, self.heads
                    )));
                }
                if rr.window == 0 || rr.patch == 0 || rr.layer_pairs == 0 {
                    return Err(ctx(format!("iteration {j}: zero-sized regression setting")));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The schema with defaults, as printed by `--print-config`.
    pub fn default_toml() -> String {
        ModelConfig::default()
            .to_toml()
            .expect("defaults always serialize")
    }

    /// Total iteration count across stages — the number of regression
    /// transformer stacks the model owns.
    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}
