//! Minimal dense tensor ops with explicit forward/backward passes.
//!
//! Ops are generic over the element type so gradient implementations can be
//! verified against f64 finite differences; training instantiates f32.
//! Every parallel loop writes each output element from exactly one task and
//! accumulates in a fixed order, so results are bit-reproducible regardless
//! of thread count.

pub mod adamw;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adamw::AdamW;
pub use params::{GradSet, ParamId, ParamSet};
pub use tensor::{Real, Tensor};
