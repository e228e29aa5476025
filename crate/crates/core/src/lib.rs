//! Local-parallelism training of dense networks.
//!
//! A network is cut into blocks, each trained against its own auxiliary
//! classifier with no gradient crossing block boundaries. The crate trains
//! such networks single-threaded or as a pipeline of block workers, prices
//! every scheme in FLOPs, finds cost-versus-time Pareto frontiers over
//! hyperparameter sweeps and simulates pipelined hardware.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod executor;
pub mod flops;
pub mod model;
pub mod optim;
pub mod pareto;
pub mod pipesim;
pub mod probes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{NetworkSpec, Params, Scheme};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
