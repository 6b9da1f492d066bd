//! Partitioned multi-dataset bundles with lazy transformations, lineage
//! recomputation and two persistence models, executed on in-process or TCP
//! workers; plus the two iterative solvers built on top of them.

pub mod cluster;
pub mod datagen;
pub mod deconv;
pub mod dstack;
pub mod engine;
pub mod error;
pub mod optim;
pub mod scdl;
pub mod starlet;
pub mod telemetry;
pub mod tensor;

pub use dstack::Record;
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Builtin kernels plus every solver kernel. Drivers and workers must build
/// their registries with this function so the hashes agree.
pub fn solver_registry() -> engine::KernelRegistry {
    let mut reg = engine::KernelRegistry::with_builtins();
    deconv::register_kernels(&mut reg);
    scdl::register_kernels(&mut reg);
    reg
}
