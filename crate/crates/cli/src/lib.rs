//! Command-line workflows and the HTTP chat service for the multi-goal
//! conversational recommender.

pub mod chat;
pub mod cli;
pub mod commands;
pub mod config;
pub mod server;
pub mod service;
