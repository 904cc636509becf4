//! Command-line front end and the audit HTTP service.

pub mod commands;
pub mod judge;
pub mod server;
