//! Dense float64 tensors, a reverse-mode tape, and the Adam optimizer.

pub mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{softmax_values, AttnLayout, AttnSegment, Graph, RotaryTable, Var};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Init, Initializer, ParamId, ParamSink, ParamStore, ShapeRecorder};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
