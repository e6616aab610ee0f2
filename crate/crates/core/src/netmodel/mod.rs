//! Message-passing surrogate networks: an equivariant vector field and an
//! invariant energy, both built on the autodiff tape.

mod features;
mod net;
mod params;

pub use features::{FeaturizerConfig, GraphFeatures, EDGE_ATTRS};
pub use net::{
    energy, energy_and_grad_with, energy_grad, forward, forward_on_tape, time_embedding,
    vector_field, vector_field_with, NetOutput, TapeOutput,
};
pub use params::{layout, BoundParams, Checkpoint, ModelParams, NetConfig, NetKind, CHECKPOINT_HEADER};
