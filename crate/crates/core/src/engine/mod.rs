//! Persona polling: backends, prompt rendering, answer parsing and run loops.

pub mod backend;
pub mod parse;
pub mod prompt;
pub mod run;

pub use backend::{BackendClient, BackendConfig, BackendError, ChatBackend, ChatMessage, MockBackend};
pub use parse::{parse_answer, ParsedAnswer};
pub use prompt::{render_preamble, render_prompt, Persona, PromptConfig, RenderedPrompt, Section};
pub use run::{ask, read_run, run_state_wise, run_voter_wise, write_run, ResponseRecord, RunManifest, RunOutput, StateTally, Winner};
