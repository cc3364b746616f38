//! A define-by-run deep learning engine.
//!
//! The computational graph is recorded while ordinary Rust code executes the
//! forward pass; gradients are obtained by backtracking the recorded graph.
//! The crate is organized around that engine:
//!
//! - [`tensor`]: dense n-dimensional arrays with broadcasting and an
//!   instrumented buffer registry used by memory-liveness tests.
//! - [`kernel`]: a small DSL for user-defined elementwise and reduction
//!   kernels, parsed and interpreted on CPU.
//! - [`autograd`]: variables, graph nodes, and the backward driver with
//!   explicit retention and release semantics.
//! - [`ops`]: the catalog of differentiable operations plus a numerical
//!   gradient checker.
//! - [`links`]: parameter-owning model fragments composed into trees.
//! - [`optim`]: SGD, momentum SGD, and Adam update rules.
//! - [`training`]: datasets, minibatch iteration, and the train/eval loop.
//! - [`dist`]: rank/size communicators, ring all-reduce, and the gradient
//!   averaging optimizer wrapper for synchronous data parallelism.

pub mod autograd;
pub mod dist;
pub mod kernel;
pub mod links;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod util;

pub use autograd::{grad, BackwardOptions, BackwardStats, Variable};
pub use links::{Chain, InitCtx, Initializer, Link, LinkBody, Linear, Mlp, Parameter};
pub use optim::{setup, Optimizer, ParamUpdater, Rule};
pub use tensor::{registry, DType, Shape, Tensor};

// Tests that assert exact buffer-registry deltas must not interleave with
// other allocating tests; they serialize on this lock.
#[cfg(test)]
pub(crate) mod testlock {
    use std::sync::{Mutex, MutexGuard};

    static LOCK: Mutex<()> = Mutex::new(());

    pub fn serial() -> MutexGuard<'static, ()> {
        LOCK.lock().unwrap_or_else(|e| e.into_inner())
    }
}
