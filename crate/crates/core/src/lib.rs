//! Interaction-gated attention intervention for a toy vision-language decoder.
//!
//! Each decode step asks whether the next token depends on the image *jointly*
//! with the text. Four masked forwards (image+text, image only, text only,
//! neither) give a Harsanyi interaction per top-k candidate; when the
//! variance of those interactions exceeds a threshold, the step is re-run
//! with a boost on the visual-column attention scores of the newest query in
//! a middle band of layers.
//!
//! Module map:
//!
//! * [`numerics`]: softmax, variance, KL, nucleus sampling.
//! * [`decoder`]: the toy decoder, its KV cache and forward capture.
//! * [`weights_file`]: flat binary weight format.
//! * [`coalitions`]: the four masked decoder states of an episode.
//! * [`sensor`]: interactions, interaction variance and the gate.
//! * [`intervention`]: the visual-column consensus boost.
//! * [`telemetry`]: head divergence, visual attention ratio, Distinct-2,
//!   step traces.
//! * [`decode`]: the per-step control loop, sampling and beam search.
//! * [`harness`]: planted scenarios, paired comparisons and sweeps.
//! * [`config`]: flat key-value run configuration.
//! * [`runner`]: run, compare and sweep artifacts.
//! * [`verify`]: end-to-end checks used by the `verify` subcommand.

pub mod coalitions;
pub mod config;
pub mod decode;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod numerics;
pub mod runner;
pub mod sensor;
pub mod telemetry;
pub mod verify;
pub mod weights_file;

pub use error::{Error, Result};
