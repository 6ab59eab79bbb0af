//! Hierarchy-aware label-sequence generation with path-adaptive attention
//! regularization.
//!
//! Label sets drawn from a taxonomy are flattened breadth-first into token
//! sequences, a small encoder-decoder transformer learns to generate them
//! from text, and an auxiliary loss pushes the decoder's causal
//! self-attention onto each label's own ancestor path.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod labelseq;
pub mod model;
pub mod pamm;
pub mod train;

pub use error::{Error, Result};
pub use hierarchy::{LabelHierarchy, LabelId, LabelSet};
pub use labelseq::{bfs_flatten, parse_sequence, MultiLevelSequence, SeqToken, TargetFormat, Vocabulary};
pub use pamm::{build_mask, off_path_mass, PammRows, PathAdaptiveMask};
pub use checkpoint::Checkpoint;
pub use corpus::{Example, Record};
pub use datagen::{generate, SynthSpec};
pub use eval::{evaluate, EvalReport};
pub use model::{Model, ModelConfig};
pub use train::{train, TrainConfig};
