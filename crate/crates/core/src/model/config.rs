//! Architecture description of the four-stage backbone.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, HeadAllocation};
use crate::error::{config_err, Result};

/// One stage: an MSPE downsampler followed by `depth` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Spatial reduction of the stage's MSPE (`P_i`).
    pub reduction: usize,
    pub channels: usize,
    pub heads: usize,
    /// Window edge and axial group size (`S_i`).
    pub split_size: usize,
    /// ICFFN hidden width multiplier (`R_i`).
    pub expand_ratio: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub stem_channels: usize,
    pub stages: [StageConfig; 4],
    pub num_classes: usize,
    #[serde(default)]
    pub attention: AttentionMode,
}

/// Number of MSPE branches per stage.
pub const MSPE_BRANCHES: [usize; 4] = [4, 3, 2, 1];

pub const VARIANTS: [&str; 4] = ["tiny", "small", "base", "micro"];

fn preset(
    name: &str,
    stem: usize,
    channels: [usize; 4],
    heads: [usize; 4],
    split: usize,
    ratio: usize,
    depths: [usize; 4],
) -> VariantConfig {
    let stage = |i: usize| StageConfig {
        reduction: 2,
        channels: channels[i],
        heads: heads[i],
        split_size: split,
        expand_ratio: ratio,
        depth: depths[i],
    };
    VariantConfig {
        name: name.to_string(),
        stem_channels: stem,
        stages: [stage(0), stage(1), stage(2), stage(3)],
        num_classes: 1000,
        attention: AttentionMode::Axwin,
    }
}

impl VariantConfig {
    pub fn tiny() -> Self {
        preset("tiny", 32, [64, 128, 256, 512], [2, 4, 8, 16], 7, 4, [2, 2, 17, 2])
    }

    pub fn small() -> Self {
        preset("small", 48, [96, 192, 384, 768], [2, 4, 8, 16], 7, 4, [2, 2, 17, 2])
    }

    pub fn base() -> Self {
        preset("base", 56, [112, 224, 448, 896], [4, 8, 16, 32], 12, 4, [2, 2, 17, 2])
    }

    /// Desk-scale variant for tests and the training smoke run.
    pub fn micro() -> Self {
        preset("micro", 8, [16, 32, 64, 128], [1, 2, 4, 8], 4, 2, [1, 1, 2, 1])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "micro" => Ok(Self::micro()),
            other => {
                config_err(format!("unknown variant `{other}` (expected one of {})", VARIANTS.join(", ")))
            }
        }
    }

    pub fn with_split_sizes(mut self, sizes: [usize; 4]) -> Self {
        for (st, s) in self.stages.iter_mut().zip(sizes) {
            st.split_size = s;
        }
        self
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.attention = mode;
        self
    }

    pub fn with_num_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn channels(&self) -> [usize; 4] {
        self.stages.map(|s| s.channels)
    }

    pub fn depths(&self) -> [usize; 4] {
        self.stages.map(|s| s.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return config_err("stem_channels must be >= 1");
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be >= 1");
        }
        let mut prev = self.stem_channels;
        for (i, st) in self.stages.iter().enumerate() {
            let id = i + 1;
            if st.reduction != 2 {
                return config_err(format!("stage {id}: reduction must be 2, got {}", st.reduction));
            }
            if st.channels != 2 * prev {
                return config_err(format!(
                    "stage {id}: MSPE doubles channels, expected {} got {}",
                    2 * prev,
                    st.channels
                ));
            }
            if st.channels % 4 != 0 {
                return config_err(format!("stage {id}: channels {} not divisible by 4", st.channels));
            }
            if st.split_size == 0 || st.expand_ratio == 0 || st.depth == 0 {
                return config_err(format!("stage {id}: split_size, expand_ratio and depth must be >= 1"));
            }
            HeadAllocation::new(st.channels, st.heads, self.attention)
                .map_err(|e| crate::Error::Config(format!("stage {id}: {e}")))?;
            prev = st.channels;
        }
        Ok(())
    }
}
