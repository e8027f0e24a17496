//! Hypernetwork prior over instance NeRFs.
//!
//! A hypernetwork maps per-instance shape and color codes to the complete
//! parameters of a hash-grid NeRF (hash tables and MLP weights). The crate
//! covers prior training, test-time code inversion, denoise-and-finetune,
//! embedding-based retrieval and the metrics used to evaluate all of them.

pub mod tensor;
pub mod hash_encoding;
pub mod field;
pub mod scene;
pub mod hypernet;
pub mod seed;
pub mod training;
pub mod evaluation;
pub mod denoise;
pub mod diagnostics;
pub mod desk;
