//! The backbone and its parts: stem, MSPE downsamplers, AxWin blocks (CPE,
//! attention, ICFFN) and the classifier head, plus variant presets,
//! parameter storage and a small training loop.

mod backbone;
pub mod config;
pub mod layers;
pub mod params;
pub mod train;

pub use backbone::{build_variant, AxWin, Features, Output, Stage, IN_CHANNELS};
pub use config::{StageConfig, VariantConfig, MSPE_BRANCHES, VARIANTS};
pub use layers::{Attention, Block, Conv, Cpe, Fuse, Head, Icffn, Linear, Mspe, Norm, Stem, LN_EPS};
pub use params::{load_checkpoint, save_checkpoint, Init, Manifest, ParamId, ParamLayout, ParamStore};
