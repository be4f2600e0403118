//! Command-line front end: file formats (AMX activations, JSON masks, toy
//! checkpoints), configuration and the subcommands.

pub mod amx;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod demo;
pub mod error;
pub mod fsio;
pub mod maskfile;
