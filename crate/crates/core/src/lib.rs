//! Dialog-graph chatbot runtime.
//!
//! A bot's content is a [`graph::DialogGraph`] of typed nodes. The
//! [`engine`] interprets it one turn at a time, [`scheduler`] fires daily
//! check-ins, [`store`] keeps versions, per-user state and the usage log,
//! and [`host`] ties them together for a multi-bot server or a simulation.

pub mod engine;
pub mod expr;
pub mod graph;
pub mod host;
pub mod intent;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod synth;
pub mod value;
