//! Procedural surgical-style video clips: moving three-part instruments
//! drawn from one shared distribution over site-specific static
//! backgrounds, plus a flat-shaded single-frame simulator set.

mod dataset;
mod scene;

pub use dataset::{
    clip_scene, gen_clip, gen_out_of_fed_site, gen_site_dataset, gen_synth_dataset, iterate_batches, BatchSampler, Dataset,
    DatasetKind, DatasetMeta,
};
pub use scene::{
    background_gradient_energy, BackgroundFamily, Clutter, Instrument, Scene, SceneSpec, Wave, BACKGROUND, CHANNELS,
    CLASSES, JAW, SHAFT, WRIST,
};
