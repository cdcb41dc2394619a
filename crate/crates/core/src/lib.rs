//! Saliency-guided natural-makeup dodging attacks against embedding-based
//! face recognition, together with the surveillance pipeline they target.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] - tensors and a small layer graph with reverse-mode gradients.
//! * [`embedder`] - surrogate/target embedding models, triplet training and
//!   the attack loss with its input gradient.
//! * [`synthface`] - procedural faces, landmarks, region masks and camera streams.
//! * [`makeup`] - palette, layer compositing, colorfulness and random makeup.
//! * [`attack`] - heatmaps, region ranking and the greedy makeup search.
//! * [`frpipeline`] - detection stub, alignment, gallery, identification and
//!   persistency alarms.
//! * [`harness`] - the end-to-end experiment and its reports.

pub mod attack;
pub mod autodiff;
pub mod embedder;
pub mod frpipeline;
pub mod harness;
pub mod image;
pub mod makeup;
pub mod seeds;
pub mod synthface;
