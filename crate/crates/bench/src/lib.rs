//! Library surface of the benchmark crate, used by the binary and by the
//! acceptance suite.

pub mod workload;
