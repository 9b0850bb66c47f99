//! Private set intersection over replicated, non-colluding databases,
//! built on two symmetric private information retrieval schemes: a
//! table-based multi-message scheme and a one-round block-linear scheme.

pub mod audit;
pub mod block;
pub mod field;
pub mod params;
pub mod psi;
pub mod rng;
pub mod scheme;
pub mod store;
pub mod table;
pub mod transport;
