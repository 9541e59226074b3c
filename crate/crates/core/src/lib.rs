//! Conversational question answering over mixed evidence: question
//! rewriting, BM25 retrieval with LLM evidence filtering, answer
//! generation, and mining of preference data for fine-tuning each stage.

pub mod ag;
pub mod datamodel;
pub mod demo;
pub mod erf;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod mining;
pub mod orchestrator;
pub mod qu;
pub mod retrieval;
pub mod server;

pub use datamodel::{
    normalize_answer, Conversation, Evidence, EvidenceKind, GoldAnswer, RankedAnswerList, Turn,
};
pub use error::{Error, Result, Stage};
pub use gateway::{ChatModel, DecodingParams, Gateway, GatewayError, ScriptedChatModel};
pub use metrics::{EvalReport, TurnScore};
pub use mining::{PreferenceRecord, SampleTrace};
pub use retrieval::{Bm25Params, CorpusIndex};
