//! Federated averaging with lossless model masking.
//!
//! A coordinating server never has to reveal its current model to take a
//! training step: it broadcasts a masked copy of the weights, clients run
//! forward/backward passes on the masked copy and upload masked gradients
//! together with two families of correction terms, and the server combines
//! the aggregate with its private mask record to recover *exactly* the
//! gradient that plain federated averaging would have produced. Training is
//! numerically indistinguishable from the unmasked baseline while clients
//! only ever observe masked weights, masked activations, and masked
//! gradients.
//!
//! Module map:
//! - [`tensor`]: dense `f64` matrix/vector primitives.
//! - [`model`]: the unmasked bias-free ReLU MLP (the ground-truth path).
//! - [`perturb`]: round secrets, masking, and exact gradient recovery.
//! - [`client`]: masked-side training and correction-term uploads.
//! - [`server`]: round state machines and the federated training loop.
//! - [`data`]: dataset loading, synthesis, splitting, and sharding.
//! - [`net`]: frame codec, wire messages, and TCP/in-process transports.
//! - [`attack`]: what-can-a-client-learn probes (ambiguity, argmax guessing).
//! - [`config`]: the JSON run configuration and its deterministic pipeline.
//! - [`report`]: metrics CSV, parameter digests, and the run manifest.
//! - [`gradcheck`]: finite-difference oracle for gradient code.
//! - [`numeric`]: shared scale-aware comparison helpers.
//! - [`cli`]: the `fedmask` command-line front end.

pub mod attack;
pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod net;
pub mod numeric;
pub mod perturb;
pub mod report;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
