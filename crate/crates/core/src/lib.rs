//! Training and evaluation of pre-specified structured-sparse multilayer
//! networks on a simulated edge-processing accelerator: clash-free
//! interleavers, z-wide banked memories, a junction pipeline running
//! feedforward, backpropagation and update concurrently, and configurable
//! fixed-point arithmetic. Also includes an analytical throughput model.

pub mod arith;
pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod fixedpoint;
pub mod interleaver;
pub mod memory_bank;
pub mod perfmodel;
pub mod rng;
pub mod topology;
pub mod training;

pub use arith::{Arith, Fixed, Real};
pub use engine::{build_maps, EngineError, NetOptions, Network, Pipeline};
pub use fixedpoint::{FxFormat, FxValue};
pub use interleaver::{InterleaverMap, InterleaverMode, VerificationReport};
pub use perfmodel::{estimate, PerfReport, PerfScenario};
pub use topology::{validate_hardware, HardwareConfig, TopologySpec};
pub use training::{train, Dataset, TrainConfig};
