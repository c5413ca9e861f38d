//! Capsule-network detector for manipulated face images and computer
//! generated imagery.
//!
//! A frozen VGG-19 prefix feeds `N` primary capsules whose outputs are
//! routed to one output capsule per class. Everything, including the
//! reverse-mode differentiation used for training, is implemented here on a
//! small dense tensor type.

pub mod capsule;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod vgg;
pub mod weights;

pub use capsule::{CapsuleNet, CapsuleNetConfig, Mode, RoutingConfig};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
pub use vgg::VggPrefix;
