// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only transformer written against plain buffers.

mod backward;
mod checkpoint;
mod config;
mod decode;
mod forward;
mod optim;
mod params;
mod real;
mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::ModelConfig;
pub use decode::argmax;
pub use forward::{ForwardOutput, LogitRows, ResidualTrace};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Layout, Model, TensorId};
pub use real::{gemm, Real};
pub use train::{train, train_step, training_sequences, Probe, TrainConfig, TrainOutcome};
