//! Robust model predictive control for plants identified by a δISS gated
//! recurrent unit (GRU) network.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the pipeline: the GRU model and its stability certificate, the
//! state observer and its gain synthesis, the constraint-tightening
//! schedule, the finite-horizon optimal control problem and its solver, the
//! four-tank benchmark plant, training, the closed-loop harness, and the
//! sampling-based verification suite. File formats and the command-line
//! front end live in the `grumpc` crate.

#![no_std]

extern crate alloc;

pub mod closed_loop;
pub mod error;
pub mod fhocp;
pub mod gru;
pub mod linalg;
pub mod lp;
pub mod observer;
pub mod plant;
pub mod tightening;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
