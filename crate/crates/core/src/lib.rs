//! Checklist compliance judging for transcribed communication sessions.
//!
//! For each checklist item of a session the pipeline selects the relevant
//! transcript context (event window, then embedding similarity), renders a
//! prompt, asks a language model backend for a JSON verdict, validates or
//! repairs that verdict, and finally scores predictions against expert
//! labels with priority-weighted accuracy.

pub mod cli;
pub mod context;
pub mod corpus;
pub mod evaluate;
pub mod llm_client;
pub mod pipeline;
pub mod prompting;
pub mod schema_parse;
