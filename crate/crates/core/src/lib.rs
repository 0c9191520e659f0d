//! Self-supervised pretraining and label-efficient segmentation finetuning for
//! a small 2D UNet.
//!
//! Two pretext tasks are provided: masked-pixel regression ([`regression`])
//! and global/local contrastive learning ([`contrastive`]). Both train the
//! backbone in [`model`] through a detachable projection head; [`finetune`]
//! swaps in a segmentation head and trains on Dice loss. Everything runs on
//! the reverse-mode tape in [`tensor`].

pub mod augment;
pub mod contrastive;
pub mod data;
pub mod finetune;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod regression;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Real, Tape, Tensor, TensorError, Var};
