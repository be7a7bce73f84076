use crate::attention::AxWinParams;
use crate::error::{config_err, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

use super::config::{VariantConfig, MSPE_BRANCHES};
use super::layers::{Block, Head, Mspe, Stem};
use super::params::{ParamLayout, ParamStore};

/// Input image channels.
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub mspe: Mspe,
    pub blocks: Vec<Block>,
}

/// The full network: stem, four stages and the classifier head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxWin {
    pub config: VariantConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Head,
    layout: ParamLayout,
}

/// Recorded outputs of [`AxWin::record`].
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// Stage outputs at strides 4, 8, 16 and 32.
    pub stages: [Var; 4],
    /// `(n, 1, 1, num_classes)`.
    pub logits: Var,
}

/// Plain-tensor outputs of [`AxWin::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Output<T> {
    pub stages: [Tensor<T>; 4],
    pub logits: Tensor<T>,
}

impl AxWin {
    pub fn new(config: VariantConfig) -> Result<Self> {
        config.validate()?;
        let mut l = ParamLayout::new();
        let stem = Stem::new(&mut l, "stem", IN_CHANNELS, config.stem_channels);
        let mut prev = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, st) in config.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let mspe = Mspe::new(&mut l, &format!("{name}.mspe"), prev, MSPE_BRANCHES[i])?;
            let attn =
                AxWinParams::new(st.channels, st.heads, st.split_size, st.split_size, config.attention)?;
            let blocks = (0..st.depth)
                .map(|j| Block::new(&mut l, &format!("{name}.block{j}"), attn, st.expand_ratio))
                .collect();
            stages.push(Stage { mspe, blocks });
            prev = st.channels;
        }
        let head = Head::new(&mut l, "head", prev, config.num_classes);
        Ok(AxWin { config, stem, stages, head, layout: l })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init<T: Element>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(seed)
    }

    /// Smallest input edge accepted: the stem halves it and the stage-1 MSPE
    /// needs `2^4` pixels.
    pub fn min_input(&self) -> usize {
        2 << MSPE_BRANCHES[0]
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Features> {
        if p.len() != self.layout.len() {
            return config_err(format!(
                "{} bound parameters for a model with {}",
                p.len(),
                self.layout.len()
            ));
        }
        let s = g.shape(x);
        if s.c() != IN_CHANNELS {
            return config_err(format!("expected {IN_CHANNELS} input channels, got {}", s.c()));
        }
        let min = self.min_input();
        if s.h() < min || s.w() < min {
            return config_err(format!("input {}x{} smaller than {min}x{min}", s.h(), s.w()));
        }
        let mut y = self.stem.record(g, p, x)?;
        let mut feats = [y; 4];
        for (slot, stage) in feats.iter_mut().zip(&self.stages) {
            y = stage.mspe.record(g, p, y)?;
            for block in &stage.blocks {
                y = block.record(g, p, y)?;
            }
            *slot = y;
        }
        let logits = self.head.record(g, p, y)?;
        Ok(Features { stages: feats, logits })
    }

    pub fn forward<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Output<T>> {
        if params.layout() != &self.layout {
            return config_err("parameter store does not match the model layout");
        }
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let p = params.bind(&mut g);
        let f = self.record(&mut g, &p, xv)?;
        Ok(Output { stages: f.stages.map(|v| g.value(v).clone()), logits: g.value(f.logits).clone() })
    }
}

/// Builds a preset variant with the given number of classes.
pub fn build_variant(name: &str, num_classes: usize) -> Result<AxWin> {
    AxWin::new(VariantConfig::by_name(name)?.with_num_classes(num_classes))
}
