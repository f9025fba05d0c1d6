//! Crowd scenario graphs and the dual conditional variational graph
//! auto-encoder that learns them.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. All IO lives in the `crowdgraph` companion crate; everything
//! here is a pure function of its inputs and an explicit random generator.

#![cfg_attr(not(feature = "std"), no_std)]
// index loops mirror the math in the numeric kernels; `!(x > 0.0)` rejects NaN on purpose
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod config;
pub mod dataset;
pub mod generation;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod simulator;
pub mod tensor;
pub mod textenc;
pub mod vgae;
pub mod vocab;

pub use vocab::{ActionLabel, LocationCategory};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[allow(unused_imports)]
pub(crate) mod prelude {
    pub use alloc::boxed::Box;
    pub use alloc::collections::{BTreeMap, BTreeSet};
    pub use alloc::format;
    pub use alloc::rc::Rc;
    pub use alloc::string::{String, ToString};
    pub use alloc::vec;
    pub use alloc::vec::Vec;
}
