//! Semantic-consensus federated co-training at desk scale.
//!
//! Clients answer a shared set of public prompts, the server clusters the
//! answers in embedding space and broadcasts one representative answer per
//! prompt, and every client then trains on its private data plus those
//! pseudo-labels. Alongside the protocol the crate carries calculators for
//! communication cost, the convergence bound, and privacy composition.

pub mod clients;
pub mod config;
pub mod consensus;
pub mod costmodel;
pub mod encoder;
pub mod error;
mod jsonl;
pub mod privacy;
pub mod protocol;
pub mod theory;

pub use clients::{Client, ClientId, Example, MarkovToyClient, PrivateDataset, ScriptedClient, TrainingWeights};
pub use config::{simulate, SessionConfig, SessionSummary};
pub use consensus::{consensus_for_prompt, dbscan, ClusterParams, Clustering, ConsensusResult, SelectionStrategy};
pub use encoder::{
    cosine_distance, encode, normalize, EmbeddingSource, Embedding, EncoderConfig, ExternalEmbeddings, HashingEncoder,
    RawEmbedding,
};
pub use error::{Error, Result};
pub use jsonl::{parse_jsonl, read_jsonl};
pub use privacy::{PrivacyLedger, RoundBudget};
pub use protocol::{
    run_round, run_session, Participant, ProtocolParams, PublicPrompt, PublicPromptSet, ResponseRecord, RoundTranscript,
    SessionReport,
};
