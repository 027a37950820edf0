//! Event-sourced reactive agent runtime.
//!
//! An append-only [`log::EventLog`] is the single source of truth. The
//! [`graph::Graph`] is a pure projection of it. Behaviors react to events,
//! and every model or tool effect is recorded so that runs can be replayed
//! exactly, forked at any point and diffed against each other.

pub mod behavior;
pub mod budget;
pub mod canonical;
pub mod effects;
pub mod event;
pub mod graph;
pub mod log;
pub mod pack;
pub mod pattern;
pub mod replay;
pub mod runtime;
