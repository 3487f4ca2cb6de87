//! File formats, data pipelines, training runs and the chat service around
//! `nglm-core`.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod formats;
pub mod library;
pub mod runner;
pub mod service;
pub mod translate;
