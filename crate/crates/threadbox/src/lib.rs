//! Live enforcement, control channel client, benchmarks and the
//! `threadbox` command line.

pub mod bench;
pub mod live;
