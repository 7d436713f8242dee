//! Dual short/long-term rehearsal memory for online continual learning.
//!
//! A reservoir-sampled short-term buffer absorbs the stream while, at every
//! task boundary, each class contributes K-means prototypes plus their
//! nearest neighbours (under a pluggable distance, Sinkhorn by default) to a
//! long-term store that grows at the short-term buffer's expense. An optional
//! divide-and-conquer reduction shrinks the candidate set before prototyping.
//!
//! ```
//! use odedm::memory::fk;
//! assert_eq!(fk(0.5, 200, 5, 2).unwrap(), 13);
//! ```

pub mod bench;
pub mod cli;
pub mod clustering;
pub mod error;
pub mod manager;
pub mod memory;
pub mod ot;
pub mod rng;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
pub use manager::MemoryManager;
pub use memory::{DualMemory, MemoryConfig};
pub use ot::{sinkhorn_distance, MetricKind, SinkhornConfig};
pub use stream::{Sample, TaskStream};
