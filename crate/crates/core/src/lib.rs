//! Code-generating data wrangling: instead of asking a language model for
//! every cell, ask it for a small row-level function, check that function
//! against cells whose answer is known, and apply the survivors to the rest
//! of the table by majority vote.
//!
//! The pipeline, in order: [`relevance`] narrows the table to the columns
//! that predict the target, [`kb`] looks for a reference table in a
//! knowledge base, [`prompt`] and [`gateway`] obtain snippets, [`safety`] and
//! [`sandbox`] screen and run them, and [`consensus`] merges their outputs.
//! [`wrangle`] ties these together.

pub mod consensus;
pub mod gateway;
pub mod kb;
pub mod prompt;
pub mod relevance;
pub mod safety;
pub mod sampling;
pub mod sandbox;
pub mod synth;
pub mod table;
pub mod task;
pub mod wrangle;

pub use consensus::{consensus, ConsensusResult, SnippetOutputs, UNKNOWN};
pub use gateway::ModelGateway;
pub use kb::{HashingEmbedder, KbEntry};
pub use sandbox::{ProcessExecutor, SnippetExecutor, StubExecutor};
pub use table::Table;
pub use task::{Method, TaskKind, TaskSpec};
pub use wrangle::{Engine, EngineOptions, TaskError, TaskOutput, WrangleReport};
