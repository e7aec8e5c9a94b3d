//! Core library for a tool-using business agent over a relational CRM snapshot.

pub mod llm;
pub mod protocol;
pub mod env;
pub mod scoring;
pub mod prompts;
pub mod agent;
pub mod synthesis;
pub mod memory;
pub mod bench;
