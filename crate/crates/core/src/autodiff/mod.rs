//! Reverse-mode automatic differentiation over dense tensors, limited to
//! the operators the DOA models use, plus Adam and checkpoint I/O.
//!
//! A [`Graph`] records every forward op with its inputs; [`Graph::backward`]
//! walks the record in reverse. Layout conventions: images are NCHW with
//! `H` = time and `W` = frequency, sequences are channels-last `[N, T, C]`.

mod check;
mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, max_relative_error, DEFAULT_STEP};
pub use checkpoint::{
    index_path, load_checkpoint, read_checkpoint_index, save_checkpoint, AdamState, Checkpoint, CheckpointIndex,
    IndexEntry, TensorRole,
};
pub use graph::{BnMode, BnStats, Gradients, Graph, Var, BN_EPS};
pub use optim::{Adam, AdamConfig, ParamStore};
pub use tensor::{gemm, Real, Tensor};

/// Running-statistics momentum of batch norm.
pub const BN_MOMENTUM: f64 = 0.1;
