//! Color-coded-aperture (CCA) depth toolkit.
//!
//! A lens with complementary color filters in its aperture encodes signed
//! defocus in the color channels of a single shot: the blur of the R and B
//! channels leans to opposite sides, and the lean flips at the focus
//! distance. This crate simulates such images, recovers depth from them
//! analytically, and trains a small attention CNN that regresses signed blur
//! together with a per-patch reliability estimate.
//!
//! Modules follow the processing chain:
//!
//! * [`optics`] — thin-lens signed-blur model and per-channel PSF generation,
//!   including a parametric shift-variant aberration field.
//! * [`render`] — synthetic CCA image rendering, patch extraction, and
//!   dataset serialization.
//! * [`dfad`] — the analytical baseline: ZNCC cost over blur hypotheses and
//!   sliding-window depth maps.
//! * [`autograd`] — a minimal reverse-mode tape over dense tensors with the
//!   operator set the network needs.
//! * [`ddn`] — the deaberration network: gradient main branch, positional and
//!   color attention branches, blur and reliability heads, and the training
//!   loop.
//! * [`eval`] — metrics, ablation harness, and loss-stability reports.

pub mod autograd;
pub mod config;
pub mod ddn;
pub mod dfad;
pub mod eval;
pub mod image;
pub mod optics;
pub mod render;
