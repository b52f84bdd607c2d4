//! Multimodal multiple-instance survival modeling with task-guided prototype
//! experts: spatial contextualization of per-instance embeddings, sparse
//! prototype routing with EMA bank updates, gated cross-modal fusion, a
//! discrete-time hazard head, and the post-hoc interpretation statistics,
//! all trainable end-to-end on synthetic cohorts.

pub mod data;
pub mod encoder;
pub mod fusion;
pub mod gradcheck;
pub mod matio;
pub mod model;
pub mod prototypes;
pub mod rng;
pub mod survival;
pub mod trainer;
pub mod tape;
pub mod tensor;
