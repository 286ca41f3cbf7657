//! The spatio-temporal segmentation network and its parameter partition.
//!
//! A clip of `frames` consecutive frames is encoded frame by frame with a
//! windowed self-attention encoder, past frames are pooled into coarser
//! token grids, every current-frame window cross-attends to its co-located
//! context tokens, a site indicator rescales channels, and a per-token head
//! decodes full-resolution class logits.

mod clip;
mod config;
mod indicator;
mod layers;
mod loss;
mod params;

pub use clip::VideoClip;
pub use config::{ModelConfig, ModuleFlags};
pub use indicator::{Indicator, IndicatorKind};
pub use layers::{window_merge, window_split, ForwardOutput, RscOutput, StModel};
pub use loss::seg_loss;
pub use params::{Binder, Param, ParamTree, Partition};
