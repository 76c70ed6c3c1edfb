//! Scene-graph conditioned diffusion for indoor layouts of labeled 3D boxes.
//!
//! A [`denoiser::Denoiser`] is trained with [`objectives::Trainer`] on pairs of
//! [`scene::SceneMatrix`] and [`graph::SceneGraph`], sampled with
//! [`pipeline::sample_scenes`] and scored with [`relations::ras_corpus`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ddpm;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod objectives;
pub mod pipeline;
pub mod relations;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};

/// Code blocks of the guide in `book/`, compiled and run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/relations.md")]
    mod relations {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
