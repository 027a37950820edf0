//! Registration, dispatch and the context handle.
//!
//! A run is driven by a short script of external steps (start, load the
//! pack, user inputs, finish). Each external event is dispatched to every
//! matching behavior in registration order. Events appended while handling
//! an event are dispatched next, in append order, before anything that was
//! already queued, so a cascade runs to completion before its siblings.

mod context;
mod engine;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::behavior::{Behavior, SubscriptionError};
use crate::budget::{Budget, BudgetError, BudgetExceeded};
use crate::effects::{Provider, Tool};
use crate::event::{actors, types, Event, RunId};
use crate::graph::Graph;
use crate::log::{EventLog, LogError, SimulatedClock};
use crate::replay::DivergenceError;

pub use context::Context;
pub(crate) use engine::{Engine, Mode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegisterError {
    #[error("a behavior named {0:?} is already registered")]
    DuplicateBehaviorName(String),
    #[error("behavior {name:?} has an invalid subscription: {source}")]
    InvalidSubscription { name: String, source: SubscriptionError },
}

/// Names and vocabularies announced by `pack.loaded`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackSchema {
    pub name: String,
    pub version: String,
    pub object_types: Vec<String>,
    pub relation_types: Vec<String>,
    #[serde(default)]
    pub event_types: Vec<String>,
}

/// The set of behaviors and tools a run executes against.
#[derive(Clone, Default)]
pub struct Runtime {
    behaviors: Vec<Behavior>,
    tools: BTreeMap<String, Arc<dyn Tool>>,
    schema: Option<PackSchema>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("behaviors", &self.behaviors)
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("schema", &self.schema)
            .finish()
    }
}

impl Runtime {
    pub fn new() -> Runtime {
        Runtime::default()
    }

    pub fn with_schema(schema: PackSchema) -> Runtime {
        Runtime { schema: Some(schema), ..Runtime::default() }
    }

    pub fn schema(&self) -> Option<&PackSchema> {
        self.schema.as_ref()
    }

    pub fn register(&mut self, behavior: Behavior) -> Result<(), RegisterError> {
        if self.behavior(behavior.name()).is_some() {
            return Err(RegisterError::DuplicateBehaviorName(behavior.name().to_string()));
        }
        behavior
            .subscription()
            .validate()
            .map_err(|source| RegisterError::InvalidSubscription { name: behavior.name().to_string(), source })?;
        self.behaviors.push(behavior);
        Ok(())
    }

    pub fn register_tool(&mut self, name: impl Into<String>, tool: impl Tool + 'static) {
        self.tools.insert(name.into(), Arc::new(tool));
    }

    pub fn behaviors(&self) -> &[Behavior] {
        &self.behaviors
    }

    pub fn behavior(&self, name: &str) -> Option<&Behavior> {
        self.behaviors.iter().find(|b| b.name() == name)
    }

    pub(crate) fn behavior_index(&self, name: &str) -> Option<usize> {
        self.behaviors.iter().position(|b| b.name() == name)
    }

    pub(crate) fn tool(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.get(name)
    }

    pub fn tool_names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    /// Payload of the `pack.loaded` event for this runtime.
    pub fn pack_payload(&self) -> Value {
        let schema = self.schema.clone().unwrap_or_default();
        let mut out = match serde_json::to_value(&schema).expect("schema serializes") {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        out.insert("behaviors".into(), json!(self.behaviors.iter().map(|b| b.name()).collect::<Vec<_>>()));
        out.insert("tools".into(), json!(self.tool_names().collect::<Vec<_>>()));
        Value::Object(out)
    }

    /// Executes `script` live as a new run.
    pub fn execute(
        &self,
        run: impl Into<RunId>,
        script: &[Step],
        provider: &mut dyn Provider,
        options: RunOptions,
    ) -> Result<RunOutcome, RunError> {
        options.budget.validate()?;
        let log = EventLog::new(run);
        Engine::new(self, provider, log, options, Mode::Live, None).run(script)
    }
}

/// How live timestamps are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    System,
    /// Starts at 2025-01-01T00:00:00Z (or one step after the last recorded
    /// event) and advances by a fixed step per event.
    Simulated { step_micros: i64 },
}

impl Default for ClockMode {
    fn default() -> Self {
        ClockMode::Simulated { step_micros: SimulatedClock::DEFAULT_STEP }
    }
}

impl ClockMode {
    pub fn to_value(self) -> Value {
        match self {
            ClockMode::System => json!({"mode": "system"}),
            ClockMode::Simulated { step_micros } => json!({"mode": "simulated", "step_micros": step_micros}),
        }
    }

    pub fn from_value(v: &Value) -> Option<ClockMode> {
        match v.get("mode")?.as_str()? {
            "system" => Some(ClockMode::System),
            "simulated" => Some(ClockMode::Simulated { step_micros: v.get("step_micros")?.as_i64()? }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub budget: Budget,
    pub clock: ClockMode,
}

impl RunOptions {
    /// Recovers the options recorded in a log's `run.started` event.
    pub fn from_log(log: &EventLog) -> Option<RunOptions> {
        let first = log.get(1).filter(|e| e.kind == types::RUN_STARTED)?;
        Some(RunOptions {
            budget: Budget::from_value(first.payload.get("budget")?)?,
            clock: ClockMode::from_value(first.payload.get("clock")?)?,
        })
    }
}

/// One external step of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Appends `run.started` with the budget and clock.
    Start,
    /// Appends `pack.loaded` describing the runtime.
    LoadPack,
    /// A user-created object; its id is derived from the event id.
    CreateObject { kind: String, properties: Value, actor: String },
    /// Any other external event. `caused_by` is a seq in this run.
    Event { kind: String, payload: Value, actor: String, caused_by: Option<u64> },
    /// Appends `run.finished`.
    Finish,
}

impl Step {
    pub fn user_object(kind: impl Into<String>, properties: Value) -> Step {
        Step::CreateObject { kind: kind.into(), properties, actor: actors::USER.into() }
    }

    /// The conventional script: start, load the pack, the given inputs,
    /// finish.
    pub fn script(inputs: impl IntoIterator<Item = Step>) -> Vec<Step> {
        let mut out = vec![Step::Start, Step::LoadPack];
        out.extend(inputs);
        out.push(Step::Finish);
        out
    }

    /// Rebuilds the script that produced `log` from its external events.
    /// A final `Finish` is always included, so a run that halted early can
    /// be resumed to completion by a fork with a larger budget.
    pub fn from_log(log: &EventLog) -> Vec<Step> {
        let mut out = Vec::new();
        for e in log.events().iter().filter(|e| e.is_external()) {
            match e.kind.as_str() {
                types::RUN_STARTED => out.push(Step::Start),
                types::PACK_LOADED => out.push(Step::LoadPack),
                types::RUN_FINISHED => {}
                _ => out.push(Step::from_event(e)),
            }
        }
        out.push(Step::Finish);
        out
    }

    fn from_event(e: &Event) -> Step {
        if e.kind == types::OBJECT_CREATED && e.caused_by.is_none() {
            let own = format!("{}:{}.0", e.id.run, e.id.seq);
            let p = &e.payload;
            let self_caused = p.pointer("/provenance/caused_by_event") == serde_json::to_value(&e.id).ok().as_ref();
            if p.get("id").and_then(Value::as_str) == Some(own.as_str()) && self_caused {
                return Step::CreateObject {
                    kind: p.get("type").and_then(Value::as_str).unwrap_or_default().to_string(),
                    properties: p.get("properties").cloned().unwrap_or(json!({})),
                    actor: e.actor.clone(),
                };
            }
        }
        Step::Event {
            kind: e.kind.clone(),
            payload: e.payload.clone(),
            actor: e.actor.clone(),
            caused_by: e.caused_by.as_ref().map(|c| c.seq),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Halted(BudgetExceeded),
}

/// Summary counts of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run: RunId,
    pub status: RunStatus,
    pub events: u64,
    pub objects: u64,
    pub relations: u64,
    /// `llm.requested` events in the log.
    pub model_calls: u64,
    /// `tool.requested` events in the log.
    pub tool_calls: u64,
    /// Calls that reached the provider during this execution.
    pub provider_invocations: u64,
    /// Of those, the ones made while still reproducing a recorded prefix.
    pub prefix_provider_invocations: u64,
    /// Tool bodies actually executed during this execution.
    pub tool_executions: u64,
    pub behavior_failures: u64,
    pub fixture_misses: u64,
    /// Events appended live rather than reproduced from a record.
    pub fresh_events: u64,
    /// First seq at which a permissive replay departed from its record.
    pub diverged_at: Option<u64>,
}

impl RunReport {
    pub fn halted(&self) -> Option<&BudgetExceeded> {
        match &self.status {
            RunStatus::Halted(b) => Some(b),
            RunStatus::Completed => None,
        }
    }

    pub fn to_value(&self) -> Value {
        json!({
            "run": self.run.as_str(),
            "status": match &self.status {
                RunStatus::Completed => json!("completed"),
                RunStatus::Halted(b) => b.to_payload(),
            },
            "events": self.events,
            "objects": self.objects,
            "relations": self.relations,
            "model_calls": self.model_calls,
            "tool_calls": self.tool_calls,
            "provider_invocations": self.provider_invocations,
            "prefix_provider_invocations": self.prefix_provider_invocations,
            "tool_executions": self.tool_executions,
            "behavior_failures": self.behavior_failures,
            "fixture_misses": self.fixture_misses,
            "fresh_events": self.fresh_events,
            "diverged_at": self.diverged_at,
        })
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run          {}", self.run)?;
        match &self.status {
            RunStatus::Completed => writeln!(f, "status       completed")?,
            RunStatus::Halted(b) => writeln!(f, "status       halted ({b})")?,
        }
        writeln!(f, "events       {}", self.events)?;
        writeln!(f, "objects      {}", self.objects)?;
        writeln!(f, "relations    {}", self.relations)?;
        writeln!(f, "model calls  {}", self.model_calls)?;
        write!(f, "tool calls   {}", self.tool_calls)
    }
}

/// A sealed log, its projection and the run summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: EventLog,
    pub graph: Graph,
    pub report: RunReport,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Diverged(Box<DivergenceError>),
    #[error("external step {step} was rejected: {reason}")]
    Rejected { step: String, reason: String },
    #[error("override {key:?} cannot be applied: {reason}")]
    Override { key: String, reason: String },
    #[error("cutoff {cutoff} is outside 1..={len}")]
    CutoffOutOfRange { cutoff: u64, len: u64 },
    #[error("not a run record: {0}")]
    NotARecord(String),
    #[error("the log names behavior {0:?}, which the pack does not provide")]
    MissingBehavior(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Raised inside a body when the runtime stops the run. Bodies should
/// propagate it with `?`; swallowing it does not resume the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupt(pub(crate) engine::Stop);

impl fmt::Display for Interrupt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            engine::Stop::Halted => f.write_str("budget exceeded"),
            engine::Stop::Diverged => f.write_str("replay diverged"),
            engine::Stop::Fatal => f.write_str("run aborted"),
        }
    }
}
