//! Persistent-memory training primitives: a file-backed heap emulating
//! byte-addressable persistent memory with an explicit flush/fence model,
//! Romulus-style durable transactions over twin regions, AES-128-GCM
//! envelopes for everything confidential that enters the heap, a small
//! CNN trainer, and the encrypted mirror/data structures that tie them
//! together into a crash-resilient training pipeline.

pub mod data;
pub mod envelope;
pub mod heap;
pub mod mirror;
pub mod nn;
pub mod rng;
pub mod txn;

pub use envelope::{Envelope, Key128};
pub use heap::{Adversary, Heap, HeapError, HeapState, PmRef};
pub use rng::SplitMix64;
