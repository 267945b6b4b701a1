//! Synthetic scenes of flat-colored shapes with instance masks and captions.

mod generate;
pub mod io;
mod raster;
mod vocab;

pub use generate::{
    caption_order, caption_words, generate_scene, make_splits, render_scene, sample_spec, split_seeds, Instance,
    InstanceSpec, SceneConfig, SceneGroundTruth, SceneSpec, Splits,
};
pub use raster::{extent, rasterize_mask, triangle_vertices, Position, MIN_AREA};
pub use vocab::{Category, Color, PosTag, Vocabulary, BOS, EOS, IMG};
