//! Replay, fork, structural diff and lineage over recorded logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde_json::{json, Value};

use crate::canonical::{self, CanonicalBytes};
use crate::effects::{NoProvider, Provider};
use crate::event::{types, Event, EventId, RunId};
use crate::graph::{project, GraphObject, ObjectId, ProjectError, Relation};
use crate::log::{EventLog, Override};
use crate::runtime::{Engine, Mode, RunError, RunOptions, RunOutcome, Runtime, Step};

/// One field that differs between the recorded and the reproduced event.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDiff {
    pub field: String,
    pub expected: Value,
    pub actual: Value,
}

/// The first event a replay failed to reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceError {
    pub seq: u64,
    pub expected: Option<Event>,
    /// `None` when the replay stopped producing events, or needed a
    /// response the record does not hold.
    pub actual: Option<Event>,
    pub field_diffs: Vec<FieldDiff>,
}

impl DivergenceError {
    pub(crate) fn new(seq: u64, expected: Option<Event>, actual: Option<Event>) -> DivergenceError {
        let field_diffs = match (&expected, &actual) {
            (Some(e), Some(a)) => field_diffs(e, a),
            _ => Vec::new(),
        };
        DivergenceError { seq, expected, actual, field_diffs }
    }

    pub fn to_value(&self) -> Value {
        json!({
            "seq": self.seq,
            "expected": self.expected,
            "actual": self.actual,
            "field_diffs": self.field_diffs.iter()
                .map(|d| json!({"field": d.field, "expected": d.expected, "actual": d.actual}))
                .collect::<Vec<_>>(),
        })
    }
}

fn field_diffs(expected: &Event, actual: &Event) -> Vec<FieldDiff> {
    let mut out = Vec::new();
    let mut push = |field: &str, e: Value, a: Value| {
        if e != a {
            out.push(FieldDiff { field: field.to_string(), expected: e, actual: a });
        }
    };
    push("id", json!(expected.id.to_string()), json!(actual.id.to_string()));
    push("type", json!(expected.kind), json!(actual.kind));
    push("actor", json!(expected.actor), json!(actual.actor));
    push(
        "caused_by",
        json!(expected.caused_by.as_ref().map(ToString::to_string)),
        json!(actual.caused_by.as_ref().map(ToString::to_string)),
    );
    match (expected.payload.as_object(), actual.payload.as_object()) {
        (Some(e), Some(a)) => {
            let keys: BTreeSet<&String> = e.keys().chain(a.keys()).collect();
            for k in keys {
                let ev = e.get(k).cloned().unwrap_or(Value::Null);
                let av = a.get(k).cloned().unwrap_or(Value::Null);
                push(&format!("payload.{k}"), ev, av);
            }
        }
        _ => push("payload", expected.payload.clone(), actual.payload.clone()),
    }
    out
}

impl fmt::Display for DivergenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "replay diverged at seq {}", self.seq)?;
        match (&self.expected, &self.actual) {
            (Some(e), None) => write!(f, ": expected {} but nothing was reproduced", e.kind)?,
            (None, Some(a)) => write!(f, ": produced {} beyond the end of the record", a.kind)?,
            _ => {}
        }
        for d in &self.field_diffs {
            write!(f, "\n  {}: expected {} got {}", d.field, d.expected, d.actual)?;
        }
        Ok(())
    }
}

impl std::error::Error for DivergenceError {}

fn options_of(record: &EventLog) -> Result<RunOptions, RunError> {
    RunOptions::from_log(record).ok_or_else(|| RunError::NotARecord("first event is not a well-formed run.started".into()))
}

/// Every behavior named by a fire in `events` must be registered.
fn check_behaviors(runtime: &Runtime, events: &[Event]) -> Result<(), RunError> {
    for e in events.iter().filter(|e| e.kind == types::BEHAVIOR_STARTED) {
        if runtime.behavior(&e.actor).is_none() {
            return Err(RunError::MissingBehavior(e.actor.clone()));
        }
    }
    Ok(())
}

/// Re-fires every behavior from the recorded external events and requires
/// each produced event to equal the recorded one. No provider is
/// consulted; every response comes from the record.
pub fn replay_strict(runtime: &Runtime, record: &EventLog) -> Result<RunOutcome, RunError> {
    check_behaviors(runtime, record.events())?;
    let options = options_of(record)?;
    let mut provider = NoProvider::default();
    let log = EventLog::blank_like(record);
    let script = Step::from_log(record);
    Engine::new(runtime, &mut provider, log, options, Mode::Strict, Some(record)).run(&script)
}

/// Re-runs the record as a new run. Recorded responses are reused while
/// the run agrees with the record; from the first disagreement on, the new
/// run is a fork of the record and requests that miss every cache go to
/// `provider`.
pub fn replay_permissive(
    runtime: &Runtime,
    record: &EventLog,
    run: impl Into<RunId>,
    provider: &mut dyn Provider,
) -> Result<RunOutcome, RunError> {
    let options = options_of(record)?;
    let log = EventLog::forked_from(record, run, record.len() as u64, Vec::new());
    let script = Step::from_log(record);
    Engine::new(runtime, provider, log, options, Mode::Permissive, Some(record)).run(&script)
}

/// Where and how to branch a recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct ForkSpec {
    pub run: RunId,
    /// Events `1..=cutoff` are copied from the parent.
    pub cutoff: u64,
    /// `(key, value)` edits applied once the prefix is in place. Keys are
    /// `budget.<dimension>`, `behavior.<name>[.<config path>]` or
    /// `fixture.<id>`.
    pub overrides: Vec<(String, Value)>,
}

impl ForkSpec {
    pub fn new(run: impl Into<RunId>, cutoff: u64) -> ForkSpec {
        ForkSpec { run: run.into(), cutoff, overrides: Vec::new() }
    }

    pub fn with_override(mut self, key: impl Into<String>, value: Value) -> ForkSpec {
        self.overrides.push((key.into(), value));
        self
    }
}

/// Branches `parent` after event `cutoff` and runs the fork to completion.
/// The prefix is reproduced from the parent without calling `provider`.
pub fn fork(
    runtime: &Runtime,
    parent: &EventLog,
    spec: &ForkSpec,
    provider: &mut dyn Provider,
) -> Result<RunOutcome, RunError> {
    let len = parent.len() as u64;
    if spec.cutoff < 1 || spec.cutoff > len {
        return Err(RunError::CutoffOutOfRange { cutoff: spec.cutoff, len });
    }
    check_behaviors(runtime, &parent.events()[..spec.cutoff as usize])?;
    let options = options_of(parent)?;
    let overrides =
        spec.overrides.iter().map(|(key, value)| Override { at: spec.cutoff, key: key.clone(), value: value.clone() });
    let log = EventLog::forked_from(parent, spec.run.clone(), spec.cutoff, overrides.collect());
    let script = Step::from_log(parent);
    Engine::new(runtime, provider, log, options, Mode::Fork { cutoff: spec.cutoff }, Some(parent)).run(&script)
}

/// Per-key property differences of one object present in both runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangedObject {
    pub id: ObjectId,
    /// `(key, value in a, value in b)`; an absent key reads as `null`.
    pub properties: Vec<(String, Value, Value)>,
}

/// A patch event that only one run contains.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub event: EventId,
    pub target: ObjectId,
    pub ops: Value,
}

/// Differences between the projections of two related runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructuralDiff {
    /// Number of leading events the two logs share.
    pub shared_prefix: u64,
    pub objects_only_in_a: Vec<GraphObject>,
    pub objects_only_in_b: Vec<GraphObject>,
    pub relations_only_in_a: Vec<Relation>,
    pub relations_only_in_b: Vec<Relation>,
    pub changed_objects: Vec<ChangedObject>,
    pub patches_only_in_a: Vec<PatchRecord>,
    pub patches_only_in_b: Vec<PatchRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("runs {a} and {b} share no recorded prefix")]
    UnrelatedRuns { a: RunId, b: RunId },
    #[error(transparent)]
    Project(#[from] ProjectError),
}

/// Compares the graphs of two runs that share a fork prefix. Objects are
/// matched by id only.
pub fn structural_diff(a: &EventLog, b: &EventLog) -> Result<StructuralDiff, DiffError> {
    let shared = a.events().iter().zip(b.events()).take_while(|(x, y)| x.id == y.id).count() as u64;
    if shared == 0 {
        return Err(DiffError::UnrelatedRuns { a: a.run().clone(), b: b.run().clone() });
    }
    let (ga, gb) = (project(a)?, project(b)?);
    let mut diff = StructuralDiff { shared_prefix: shared, ..Default::default() };

    for o in ga.objects() {
        match gb.object(&o.id) {
            None => diff.objects_only_in_a.push(o.clone()),
            Some(other) => {
                let keys: BTreeSet<&String> = o.properties.keys().chain(other.properties.keys()).collect();
                let mut properties = Vec::new();
                if o.kind != other.kind {
                    properties.push(("@type".to_string(), json!(o.kind), json!(other.kind)));
                }
                for k in keys {
                    let va = o.properties.get(k).cloned().unwrap_or(Value::Null);
                    let vb = other.properties.get(k).cloned().unwrap_or(Value::Null);
                    if va != vb {
                        properties.push((k.clone(), va, vb));
                    }
                }
                if !properties.is_empty() {
                    diff.changed_objects.push(ChangedObject { id: o.id.clone(), properties });
                }
            }
        }
    }
    diff.objects_only_in_b = gb.objects().filter(|o| ga.object(&o.id).is_none()).cloned().collect();
    diff.relations_only_in_a = ga.relations().filter(|r| gb.relation(&r.id).is_none()).cloned().collect();
    diff.relations_only_in_b = gb.relations().filter(|r| ga.relation(&r.id).is_none()).cloned().collect();

    let patches = |log: &EventLog| -> Vec<PatchRecord> {
        log.events()[shared as usize..]
            .iter()
            .filter(|e| e.kind == types::OBJECT_PATCHED)
            .map(|e| PatchRecord {
                event: e.id.clone(),
                target: ObjectId::new(e.payload.get("target").and_then(Value::as_str).unwrap_or_default()),
                ops: e.payload.get("ops").cloned().unwrap_or(Value::Null),
            })
            .collect()
    };
    diff.patches_only_in_a = patches(a);
    diff.patches_only_in_b = patches(b);
    Ok(diff)
}

impl StructuralDiff {
    pub fn is_empty(&self) -> bool {
        self.objects_only_in_a.is_empty()
            && self.objects_only_in_b.is_empty()
            && self.relations_only_in_a.is_empty()
            && self.relations_only_in_b.is_empty()
            && self.changed_objects.is_empty()
            && self.patches_only_in_a.is_empty()
            && self.patches_only_in_b.is_empty()
    }

    pub fn to_value(&self) -> Value {
        let patches = |ps: &[PatchRecord]| {
            ps.iter().map(|p| json!({"event": p.event, "target": p.target, "ops": p.ops})).collect::<Vec<_>>()
        };
        json!({
            "shared_prefix": self.shared_prefix,
            "objects_only_in_a": self.objects_only_in_a,
            "objects_only_in_b": self.objects_only_in_b,
            "relations_only_in_a": self.relations_only_in_a,
            "relations_only_in_b": self.relations_only_in_b,
            "changed_objects": self.changed_objects.iter().map(|c| json!({
                "id": c.id,
                "properties": c.properties.iter()
                    .map(|(k, a, b)| json!({"key": k, "a": a, "b": b}))
                    .collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "patches_only_in_a": patches(&self.patches_only_in_a),
            "patches_only_in_b": patches(&self.patches_only_in_b),
        })
    }

    /// The machine-readable report.
    pub fn to_canonical(&self) -> CanonicalBytes {
        canonical::canonicalize(&self.to_value())
    }
}

impl fmt::Display for StructuralDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shared prefix: {} events", self.shared_prefix)?;
        if self.is_empty() {
            return write!(f, "no differences");
        }
        for (sign, objects) in [("-", &self.objects_only_in_a), ("+", &self.objects_only_in_b)] {
            for o in objects {
                writeln!(f, "{sign} object {} ({})", o.id, o.kind)?;
            }
        }
        for (sign, relations) in [("-", &self.relations_only_in_a), ("+", &self.relations_only_in_b)] {
            for r in relations {
                writeln!(f, "{sign} relation {} ({} -[{}]-> {})", r.id, r.from, r.kind, r.to)?;
            }
        }
        for c in &self.changed_objects {
            writeln!(f, "~ object {}", c.id)?;
            for (k, a, b) in &c.properties {
                writeln!(f, "    {k}: {a} -> {b}")?;
            }
        }
        for (sign, patches) in [("-", &self.patches_only_in_a), ("+", &self.patches_only_in_b)] {
            for p in patches {
                writeln!(f, "{sign} patch {} on {}", p.event, p.target)?;
            }
        }
        Ok(())
    }
}

/// What a lineage query starts from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineageTarget {
    Object(ObjectId),
    Event(EventId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineageLink {
    pub event: EventId,
    pub kind: String,
    pub actor: String,
    /// The model request recorded in the provenance of the object or
    /// relation this event created.
    pub model_request: Option<Box<LineageLink>>,
}

/// The causal chain of an artifact, newest first, ending at a root event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineageChain {
    pub target: LineageTarget,
    pub links: Vec<LineageLink>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LineageError {
    #[error("{0} is not an object, relation or event of this log")]
    UnknownTarget(String),
    #[error("cause {cause} of event {event} is not in the log")]
    BrokenChain { event: EventId, cause: EventId },
}

impl LineageChain {
    pub fn root(&self) -> &LineageLink {
        self.links.last().expect("a chain has at least one link")
    }

    /// Whether any link of the chain, or any model-request branch, has
    /// this type.
    pub fn mentions(&self, kind: &str) -> bool {
        self.links.iter().any(|l| l.kind == kind || l.model_request.as_ref().is_some_and(|m| m.kind == kind))
    }

    pub fn to_value(&self) -> Value {
        fn link(l: &LineageLink) -> Value {
            let mut v = json!({"event": l.event.to_string(), "type": l.kind, "actor": l.actor});
            if let Some(m) = &l.model_request {
                v["model_request"] = link(m);
            }
            v
        }
        json!(self.links.iter().rev().map(link).collect::<Vec<_>>())
    }
}

impl fmt::Display for LineageChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.links.iter().rev().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{:>4}  {:<18} {:<22} {}", l.event.seq, l.kind, l.actor, l.event)?;
            if let Some(m) = &l.model_request {
                write!(f, "\n      via {} {} ({})", m.kind, m.event, m.actor)?;
            }
        }
        Ok(())
    }
}

/// Follows `caused_by` from the target's creating event back to a root.
pub fn lineage(log: &EventLog, target: &LineageTarget) -> Result<LineageChain, LineageError> {
    let start = match target {
        LineageTarget::Event(id) => log.lookup(id).ok_or_else(|| LineageError::UnknownTarget(id.to_string()))?,
        LineageTarget::Object(id) => creating_event(log, id).ok_or_else(|| LineageError::UnknownTarget(id.to_string()))?,
    };
    let mut links = Vec::new();
    let mut current = start;
    loop {
        let model_request = current
            .payload
            .pointer("/provenance/model_request_event")
            .and_then(|v| serde_json::from_value::<EventId>(v.clone()).ok())
            .and_then(|id| log.lookup(&id))
            .filter(|_| matches!(current.kind.as_str(), types::OBJECT_CREATED | types::RELATION_CREATED))
            .map(|e| Box::new(LineageLink { event: e.id.clone(), kind: e.kind.clone(), actor: e.actor.clone(), model_request: None }));
        links.push(LineageLink {
            event: current.id.clone(),
            kind: current.kind.clone(),
            actor: current.actor.clone(),
            model_request,
        });
        match &current.caused_by {
            None => break,
            Some(cause) => {
                // Causes always precede their effects, so this terminates.
                current = log
                    .lookup(cause)
                    .filter(|c| c.id.seq < current.id.seq)
                    .ok_or_else(|| LineageError::BrokenChain { event: current.id.clone(), cause: cause.clone() })?;
            }
        }
    }
    Ok(LineageChain { target: target.clone(), links })
}

fn creating_event<'l>(log: &'l EventLog, id: &ObjectId) -> Option<&'l Event> {
    log.events().iter().find(|e| {
        matches!(e.kind.as_str(), types::OBJECT_CREATED | types::RELATION_CREATED)
            && e.payload.get("id").and_then(Value::as_str) == Some(id.as_str())
    })
}

/// Groups events by the run that owns their ids: a fork's prefix belongs
/// to its ancestors.
pub fn ownership(log: &EventLog) -> BTreeMap<RunId, u64> {
    let mut out = BTreeMap::new();
    for e in log.events() {
        *out.entry(e.id.run.clone()).or_insert(0) += 1;
    }
    out
}
