//! Learned evolutionary optimization on a population lattice.
//!
//! The crate trains a stack of evolution modules — depthwise-convolution
//! offspring generation followed by mask-based survivor selection — by
//! gradient descent on sets of cheap surrogate functions, then runs the
//! trained stack as a black-box optimizer. It also ships the benchmark
//! function zoo, a planar-arm task, DE and random-search baselines under
//! identical evaluation accounting, and reproducible run records.

pub mod baselines;
pub mod error;
pub mod evolution;
pub mod functions;
pub mod population;
pub mod record;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use baselines::{de_rand_1_bin, random_search, DeConfig, RunOutcome};
pub use error::{Error, Result};
pub use evolution::{DecnModel, EmParams, KernelSet, TrainedOn};
pub use functions::{ArmCase, Fidelity, FunctionId, FunctionSet, ObjectiveInstance};
pub use population::PopulationGrid;
pub use record::{RunEntry, RunMeta, RunRecord};
pub use tape::{depthwise_conv2d, finite_diff_check, grad, Tape, Var};
pub use tensor::Tensor;
pub use training::{ModelConfig, TrainConfig, TrainLog};
