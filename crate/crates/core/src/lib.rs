//! Email visual-similarity engine.
//!
//! Emails are parsed, cleaned of gateway banners, rendered to screenshots,
//! preprocessed, embedded into unit vectors, indexed, and grouped into
//! clusters of visually similar messages. New messages are convicted when they
//! resemble a cluster labeled as spam.

pub mod cluster;
pub mod codec;
pub mod embed;
pub mod imgproc;
pub mod mailparse;
pub mod process;
pub mod render;
pub mod screenshot;
pub mod synthcorpus;
pub mod vindex;

pub use cluster::{ClusterStore, Decision, Label, Verdict};
pub use embed::{cosine, embed_reference, EmbeddingVector};
pub use screenshot::{ImageError, Screenshot};
pub use vindex::{Hit, IndexKind, IndexMeta, VectorIndex};
