//! Command-line front end and HTTP demo service for the `semlink` library.

pub mod args;
pub mod commands;
pub mod service;

pub use commands::run;
