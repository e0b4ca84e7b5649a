//! Harness internals behind the `pmtrain` binary: the training workflow,
//! experiment drivers, and their support pieces. The acceptance suite
//! drives these directly; the binary is a thin argument layer on top.

pub mod bench;
pub mod gen;
pub mod keyfile;
pub mod losslog;
pub mod report;
pub mod supervise;
pub mod trainer;
