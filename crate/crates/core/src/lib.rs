//! Hierarchical classification of encrypted packets.
//!
//! A fast service-level CNN runs on reduced-size byte matrices and routes each
//! packet to an application-level CNN that runs on full-size matrices. The
//! crate covers the whole path: capture ingestion ([`pcap`]), matrix encoding
//! ([`encoder`]), the network ([`cnn`]), SGD training ([`train`]), the
//! two-level pipeline ([`hierarchy`]) and the evaluation harness ([`eval`]).

pub mod cli;
pub mod cnn;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod hierarchy;
pub mod model_io;
pub mod pcap;
pub mod synthetic;
pub mod train;
mod wire;

pub use wire::WireError;
