//! Scene coordinate regression with focus-guided training-buffer sampling.

pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod localizer;
pub mod observation;
pub mod sampler;
pub mod scene_map;
pub mod scr_head;
