//! HTTP server and command-line front end for the dialog runtime.

pub mod api;
pub mod config;
pub mod delivery;
