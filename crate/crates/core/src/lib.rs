//! Segmented, homomorphically aggregated federated learning.
//!
//! Clients send only a server-chosen subset of their parameter matrices,
//! encrypted under a per-round key; the server averages ciphertexts and a
//! key distributor releases the private key once aggregation is done.
pub mod attack;
mod bytes;
pub mod cli;
pub mod fhe;
pub mod kd;
pub mod model;
pub mod runtime;
pub mod segmentation;
pub mod training;
