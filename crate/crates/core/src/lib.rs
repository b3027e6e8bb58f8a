//! Distillation of LLM-generated user profiles into transformer sequential
//! recommenders.
//!
//! The crate is organised along the pipeline:
//!
//! - [`data`]: interaction logs, k-core filtering, global temporal split and
//!   per-user sequences.
//! - [`profile`]: metadata aggregation, prompt rendering, profile generation
//!   (HTTP or mock), text encoding and projection into the recommender's
//!   hidden space, plus the frozen target store.
//! - [`model`]: causal (next-item) and masked-item transformer recommenders
//!   with per-layer hidden states and the two pooling strategies.
//! - [`distill`]: distillation loss, dynamic loss balancing and the
//!   two-phase training schedule.
//! - [`eval`]: NDCG@k / Recall@k, multi-seed aggregation and uplift.
//!
//! Numerics run on a small reverse-mode tape ([`autograd`]) in `f64`.

pub mod autograd;
pub mod data;
pub mod digest;
pub mod distill;
pub mod eval;
pub mod model;
pub mod profile;
pub mod toy;
