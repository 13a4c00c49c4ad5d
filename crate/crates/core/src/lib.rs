//! Core of the agora orchestration runtime: wire protocol, replicated agent
//! ledger, capability matching, planning, chain execution, voting, and the
//! engine boundary.

pub mod config;
pub mod engine;
pub mod events;
pub mod execution;
pub mod ledger;
pub mod matching;
pub mod planning;
pub mod prompts;
pub mod protocol;
pub mod voting;
pub mod sim;
