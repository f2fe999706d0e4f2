//! Wayfinding instruction synthesis for embodied agents, and the zero-shot
//! navigation harness used to evaluate the synthesized instructions.
//!
//! The pipeline runs in stages:
//!
//! 1. [`env_model`] loads navigation graphs and samples episodes.
//! 2. [`vqa_chat`] captions each frame through an LLM/VQA conversation.
//! 3. [`synthesis`] turns ordered captions into a styled instruction.
//! 4. [`navigation`] follows instructions with grounding-driven policies.
//! 5. [`metrics`] scores the resulting traces.
//!
//! Model access goes through [`backends`], whose record/replay cache makes
//! every stage reproducible offline. [`datasets`] handles persistence.

pub mod backends;
pub mod datasets;
pub mod env_model;
pub mod metrics;
pub mod navigation;
pub mod prompts;
pub mod synthesis;
pub mod vqa_chat;
