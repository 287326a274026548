//! Facial appearance editing on a synthetic portrait world.

pub mod config;
pub mod container;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod flame;
pub mod identity;
pub mod imaging;
pub mod latent_ae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod rsc;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/head-model.md")]
    mod head_model {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/latent-autoencoder.md")]
    mod latent_autoencoder {}
    #[doc = include_str!("../../../book/src/semantic-tokens.md")]
    mod semantic_tokens {}
    #[doc = include_str!("../../../book/src/identity.md")]
    mod identity {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/editing.md")]
    mod editing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
