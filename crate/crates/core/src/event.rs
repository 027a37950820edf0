//! Event records and the closed vocabulary of event types.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

/// Opaque identifier of a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(String);

impl RunId {
    pub fn new(id: impl Into<String>) -> RunId {
        RunId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RunId {
    fn from(s: &str) -> Self {
        RunId(s.to_string())
    }
}

/// `(run, seq)`; seq starts at 1 and is dense within a log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId {
    pub run: RunId,
    pub seq: u64,
}

impl EventId {
    pub fn new(run: impl Into<RunId>, seq: u64) -> EventId {
        EventId { run: run.into(), seq }
    }
}

impl From<String> for RunId {
    fn from(s: String) -> Self {
        RunId(s)
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.run, self.seq)
    }
}

/// UTC instant with microsecond precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_micros(micros: i64) -> Timestamp {
        Timestamp(micros)
    }

    pub fn as_micros(self) -> i64 {
        self.0
    }

    pub fn now() -> Timestamp {
        Timestamp(Utc::now().timestamp_micros())
    }

    pub fn to_rfc3339(self) -> String {
        DateTime::<Utc>::from_timestamp_micros(self.0)
            .expect("timestamp in chrono range")
            .to_rfc3339_opts(SecondsFormat::Micros, true)
    }

    pub fn parse(s: &str) -> Option<Timestamp> {
        let dt = DateTime::parse_from_rfc3339(s).ok()?;
        Some(Timestamp(dt.with_timezone(&Utc).timestamp_micros()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

/// One immutable record of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: EventId,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
    pub actor: String,
    pub caused_by: Option<EventId>,
    pub timestamp: Timestamp,
}

impl Event {
    pub fn seq(&self) -> u64 {
        self.id.seq
    }

    /// Actors that append outside any behavior fire.
    pub fn is_external(&self) -> bool {
        self.actor == actors::USER || self.actor == actors::SYSTEM
    }
}

pub mod actors {
    pub const USER: &str = "user";
    pub const SYSTEM: &str = "system";
    /// Budget enforcement and other runtime-internal records.
    pub const RUNTIME: &str = "runtime";
}

/// Event types understood by the runtime itself.
pub mod types {
    pub const RUN_STARTED: &str = "run.started";
    pub const RUN_FINISHED: &str = "run.finished";
    pub const PACK_LOADED: &str = "pack.loaded";
    pub const OBJECT_CREATED: &str = "object.created";
    pub const OBJECT_PATCHED: &str = "object.patched";
    pub const RELATION_CREATED: &str = "relation.created";
    pub const BEHAVIOR_STARTED: &str = "behavior.started";
    pub const BEHAVIOR_FINISHED: &str = "behavior.finished";
    pub const BEHAVIOR_FAILED: &str = "behavior.failed";
    pub const LLM_REQUESTED: &str = "llm.requested";
    pub const LLM_RESPONDED: &str = "llm.responded";
    pub const LLM_FAILED: &str = "llm.failed";
    pub const TOOL_REQUESTED: &str = "tool.requested";
    pub const TOOL_RESPONDED: &str = "tool.responded";
    pub const TOOL_FAILED: &str = "tool.failed";
    pub const BUDGET_EXCEEDED: &str = "budget.exceeded";

    pub const CORE: &[&str] = &[
        RUN_STARTED,
        RUN_FINISHED,
        PACK_LOADED,
        OBJECT_CREATED,
        OBJECT_PATCHED,
        RELATION_CREATED,
        BEHAVIOR_STARTED,
        BEHAVIOR_FINISHED,
        BEHAVIOR_FAILED,
        LLM_REQUESTED,
        LLM_RESPONDED,
        LLM_FAILED,
        TOOL_REQUESTED,
        TOOL_RESPONDED,
        TOOL_FAILED,
        BUDGET_EXCEEDED,
    ];

    /// Event types that change the graph.
    pub fn is_graph_effecting(kind: &str) -> bool {
        matches!(kind, OBJECT_CREATED | OBJECT_PATCHED | RELATION_CREATED)
    }
}

/// The closed set of event types a log accepts: the core vocabulary plus
/// whatever the loaded pack declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTypes(BTreeSet<String>);

impl Default for EventTypes {
    fn default() -> Self {
        EventTypes(types::CORE.iter().map(|s| s.to_string()).collect())
    }
}

impl EventTypes {
    pub fn declare(&mut self, kind: impl Into<String>) {
        self.0.insert(kind.into());
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.0.contains(kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}
