//! Crowd counting under noisy point annotations with cross-head supervision.
//!
//! The model pairs one convolution head and one transformer head on a shared
//! encoder. During training each head builds a selection mask over the cells
//! where its own prediction deviates most from the (possibly mislabeled)
//! ground-truth density map, and inside that mask its regression target is
//! blended toward the *other* head's prediction. The mask fraction and the
//! blend weight ramp linearly over training.
//!
//! Crate layout:
//!
//! - [`density`] — point annotations and Gaussian-kernel density maps
//! - [`noise`] — controlled annotation corruption (missing points, shifts)
//! - [`synth`] — synthetic crowd-scene dataset generator
//! - [`nn`] — the small neural-network layer library (explicit backward passes)
//! - [`model`] — shared encoder + convolution head + transformer head
//! - [`supervision`] — deviation maps, selection masks, refined targets, loss, schedules
//! - [`optim`] — Adam with decoupled weight decay, cosine learning rate
//! - [`train`] / [`eval`] — training loop, counting metrics, easy/hard split
//! - [`checkpoint`] — versioned parameter container
//! - [`ablate`] — sweep runner producing per-head report tables
//! - [`config`] — declarative run configuration with `key=value` overrides
//! - [`viz`] — density-map panels rendered to PNG

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod density;
pub mod elem;
pub mod eval;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod viz;

pub use elem::Elem;
