//! The append-only event log and its line-delimited file format.
//!
//! A log file is one canonical header line followed by one canonical event
//! per line. Because every line is canonical, saving the same log twice
//! produces identical bytes, and the first `k` event lines of a fork are the
//! parent's first `k` event lines verbatim.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical::{self, HASH_FUNCTION};
use crate::event::{types, Event, EventId, EventTypes, RunId, Timestamp};

pub const FORMAT_NAME: &str = "loggraph/event-log";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("log {0} is sealed")]
    Sealed(RunId),
    #[error("event {seq} names cause {cause}, which is not an earlier event of this log")]
    DanglingCause { seq: u64, cause: EventId },
    #[error("event type {0:?} is not declared")]
    UndeclaredEventType(String),
    #[error("expected event id {expected}, got {got}")]
    OutOfOrder { expected: EventId, got: EventId },
    #[error("malformed log at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported log format {found}")]
    VersionMismatch { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a fork branched off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForkOrigin {
    pub run: RunId,
    pub cutoff: u64,
}

/// Events `..=last_seq` not covered by an earlier segment carry `run` in
/// their ids. Seqs past the last segment belong to the log's own run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub run: RunId,
    pub last_seq: u64,
}

/// A pack edit that takes effect once the log has `at` events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub at: u64,
    pub key: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u64,
    run: RunId,
    hash: String,
    parent: Option<ForkOrigin>,
    segments: Vec<Segment>,
    overrides: Vec<Override>,
}

/// Supplies timestamps to `append`.
pub trait TimestampSource {
    fn next_timestamp(&mut self) -> Timestamp;
}

/// The live UTC clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl TimestampSource for SystemClock {
    fn next_timestamp(&mut self) -> Timestamp {
        Timestamp::now()
    }
}

/// A clock that starts at a fixed instant and ticks by a fixed step, so
/// runs driven entirely by fixtures produce byte-identical logs.
#[derive(Debug, Clone, Copy)]
pub struct SimulatedClock {
    next: i64,
    step_micros: i64,
}

impl SimulatedClock {
    /// 2025-01-01T00:00:00Z.
    pub const DEFAULT_START: i64 = 1_735_689_600_000_000;
    pub const DEFAULT_STEP: i64 = 1_000;

    pub fn new(start: Timestamp, step_micros: i64) -> SimulatedClock {
        SimulatedClock { next: start.as_micros(), step_micros }
    }

    pub fn step_micros(&self) -> i64 {
        self.step_micros
    }
}

impl Default for SimulatedClock {
    fn default() -> Self {
        SimulatedClock { next: Self::DEFAULT_START, step_micros: Self::DEFAULT_STEP }
    }
}

impl TimestampSource for SimulatedClock {
    fn next_timestamp(&mut self) -> Timestamp {
        let ts = Timestamp::from_micros(self.next);
        self.next += self.step_micros;
        ts
    }
}

/// Timestamps taken from an existing record, in order.
pub struct RecordedClock<'a> {
    events: std::slice::Iter<'a, Event>,
}

impl<'a> RecordedClock<'a> {
    pub fn new(events: &'a [Event]) -> RecordedClock<'a> {
        RecordedClock { events: events.iter() }
    }
}

impl TimestampSource for RecordedClock<'_> {
    fn next_timestamp(&mut self) -> Timestamp {
        self.events.next().map(|e| e.timestamp).unwrap_or_else(Timestamp::now)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    run: RunId,
    parent: Option<ForkOrigin>,
    segments: Vec<Segment>,
    overrides: Vec<Override>,
    events: Vec<Event>,
    types: EventTypes,
    sealed: bool,
}

impl EventLog {
    pub fn new(run: impl Into<RunId>) -> EventLog {
        EventLog {
            run: run.into(),
            parent: None,
            segments: Vec::new(),
            overrides: Vec::new(),
            events: Vec::new(),
            types: EventTypes::default(),
            sealed: false,
        }
    }

    /// An empty log whose ids follow `parent`'s id space up to `cutoff`.
    /// The caller is responsible for filling in the prefix.
    pub fn forked_from(parent: &EventLog, run: impl Into<RunId>, cutoff: u64, overrides: Vec<Override>) -> EventLog {
        let mut segments = Vec::new();
        let mut covered = 0;
        for seg in &parent.segments {
            if covered >= cutoff {
                break;
            }
            let last = seg.last_seq.min(cutoff);
            segments.push(Segment { run: seg.run.clone(), last_seq: last });
            covered = last;
        }
        if covered < cutoff {
            segments.push(Segment { run: parent.run.clone(), last_seq: cutoff });
        }
        let mut all: Vec<Override> = parent.overrides.iter().filter(|o| o.at <= cutoff).cloned().collect();
        all.extend(overrides);
        EventLog {
            run: run.into(),
            parent: Some(ForkOrigin { run: parent.run.clone(), cutoff }),
            segments,
            overrides: all,
            events: Vec::new(),
            types: parent.types.clone(),
            sealed: false,
        }
    }

    /// An empty log with the same run, ancestry and overrides as `other`,
    /// used to re-execute `other` for comparison.
    pub fn blank_like(other: &EventLog) -> EventLog {
        EventLog {
            run: other.run.clone(),
            parent: other.parent.clone(),
            segments: other.segments.clone(),
            overrides: other.overrides.clone(),
            events: Vec::new(),
            types: EventTypes::default(),
            sealed: false,
        }
    }

    pub fn run(&self) -> &RunId {
        &self.run
    }

    pub fn parent(&self) -> Option<&ForkOrigin> {
        self.parent.as_ref()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn overrides(&self) -> &[Override] {
        &self.overrides
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&Event> {
        seq.checked_sub(1).and_then(|i| self.events.get(i as usize))
    }

    /// Resolves an id to an event of this log, checking the run matches.
    pub fn lookup(&self, id: &EventId) -> Option<&Event> {
        self.get(id.seq).filter(|e| &e.id == id)
    }

    pub fn last(&self) -> Option<&Event> {
        self.events.last()
    }

    pub fn event_types(&self) -> &EventTypes {
        &self.types
    }

    pub fn declare_event_type(&mut self, kind: impl Into<String>) {
        self.types.declare(kind);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Every run id that owns a segment of this log, plus its own.
    pub fn ancestry(&self) -> impl Iterator<Item = &RunId> {
        self.segments.iter().map(|s| &s.run).chain(std::iter::once(&self.run))
    }

    /// The run that owns `seq` in this log's id space.
    pub fn run_for_seq(&self, seq: u64) -> &RunId {
        self.segments.iter().find(|s| seq <= s.last_seq).map(|s| &s.run).unwrap_or(&self.run)
    }

    pub fn next_id(&self) -> EventId {
        let seq = self.events.len() as u64 + 1;
        EventId { run: self.run_for_seq(seq).clone(), seq }
    }

    /// Rebases this log as a fork of `parent` at `cutoff`: used when a
    /// permissive replay discovers where it departs from its record.
    pub(crate) fn rebase(&mut self, parent: &EventLog, cutoff: u64) {
        let template = EventLog::forked_from(parent, self.run.clone(), cutoff, Vec::new());
        self.parent = template.parent;
        self.segments = template.segments;
        self.overrides.retain(|o| o.at <= cutoff);
    }

    /// Appends a new event with the next id.
    pub fn append(
        &mut self,
        kind: &str,
        payload: Value,
        actor: &str,
        caused_by: Option<EventId>,
        clock: &mut dyn TimestampSource,
    ) -> Result<&Event, LogError> {
        self.ensure_open()?;
        let event = Event {
            id: self.next_id(),
            kind: kind.to_string(),
            payload: canonical::normalize(&payload),
            actor: actor.to_string(),
            caused_by,
            timestamp: clock.next_timestamp(),
        };
        self.push(event)?;
        Ok(self.events.last().expect("just pushed"))
    }

    /// Appends a fully formed event, validating id, type and cause.
    pub fn push(&mut self, event: Event) -> Result<(), LogError> {
        self.ensure_open()?;
        self.validate(&event)?;
        if event.kind == types::PACK_LOADED {
            for kind in declared_types(&event.payload) {
                self.types.declare(kind);
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub(crate) fn validate(&self, event: &Event) -> Result<(), LogError> {
        let expected = self.next_id();
        if event.id != expected {
            return Err(LogError::OutOfOrder { expected, got: event.id.clone() });
        }
        if !self.types.contains(&event.kind) {
            return Err(LogError::UndeclaredEventType(event.kind.clone()));
        }
        if let Some(cause) = &event.caused_by {
            if cause.seq >= event.id.seq || self.lookup(cause).is_none() {
                return Err(LogError::DanglingCause { seq: event.id.seq, cause: cause.clone() });
            }
        }
        Ok(())
    }

    fn ensure_open(&self) -> Result<(), LogError> {
        if self.sealed {
            Err(LogError::Sealed(self.run.clone()))
        } else {
            Ok(())
        }
    }

    fn header(&self) -> Header {
        Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            run: self.run.clone(),
            hash: HASH_FUNCTION.into(),
            parent: self.parent.clone(),
            segments: self.segments.clone(),
            overrides: self.overrides.clone(),
        }
    }

    /// The canonical header line, without newline.
    pub fn header_line(&self) -> String {
        let v = serde_json::to_value(self.header()).expect("header serializes");
        canonical::canonicalize(&v).as_str().to_string()
    }

    /// Serializes the whole log to the file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_line().into_bytes();
        out.push(b'\n');
        for e in &self.events {
            out.extend_from_slice(event_line(e).as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LogError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EventLog, LogError> {
        let f = fs::File::open(path)?;
        Self::read(BufReader::new(f))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EventLog, LogError> {
        Self::read(bytes)
    }

    fn read(reader: impl BufRead) -> Result<EventLog, LogError> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => return Err(LogError::Malformed { line: 1, reason: "missing header".into() }),
        };
        let raw: Value = serde_json::from_str(&first)
            .map_err(|e| LogError::Malformed { line: 1, reason: e.to_string() })?;
        let format = raw.get("format").and_then(Value::as_str).unwrap_or_default();
        let version = raw.get("version").and_then(Value::as_u64).unwrap_or_default();
        if format != FORMAT_NAME || version != FORMAT_VERSION {
            return Err(LogError::VersionMismatch { found: format!("{format} v{version}") });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| LogError::Malformed { line: 1, reason: e.to_string() })?;
        if header.hash != HASH_FUNCTION {
            return Err(LogError::VersionMismatch { found: format!("hash {}", header.hash) });
        }
        let mut log = EventLog {
            run: header.run,
            parent: header.parent,
            segments: header.segments,
            overrides: header.overrides,
            events: Vec::new(),
            types: EventTypes::default(),
            sealed: false,
        };
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            let event: Event = serde_json::from_str(&line)
                .map_err(|e| LogError::Malformed { line: lineno, reason: e.to_string() })?;
            log.push(event).map_err(|e| LogError::Malformed { line: lineno, reason: e.to_string() })?;
        }
        log.sealed = true;
        Ok(log)
    }
}

/// The canonical file line for one event, without newline.
pub fn event_line(event: &Event) -> String {
    let v = serde_json::to_value(event).expect("event serializes");
    canonical::canonicalize(&v).as_str().to_string()
}

fn declared_types(payload: &Value) -> impl Iterator<Item = String> + '_ {
    payload
        .get("event_types")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_str().map(str::to_string))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::actors;
    use serde_json::json;

    fn three_events() -> EventLog {
        let mut clock = SimulatedClock::default();
        let mut log = EventLog::new("r1");
        log.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut clock).unwrap();
        let first = log.last().unwrap().id.clone();
        log.append(types::PACK_LOADED, json!({"name": "p", "event_types": ["tick"]}), actors::SYSTEM, Some(first), &mut clock)
            .unwrap();
        log.append("tick", json!({"n": 1.0, "label": "é"}), actors::USER, None, &mut clock).unwrap();
        log
    }

    #[test]
    fn first_append_gets_seq_one() {
        let mut log = EventLog::new("r1");
        let e = log.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut SystemClock).unwrap();
        assert_eq!(e.id, EventId::new("r1", 1));
        assert_eq!(e.caused_by, None);
    }

    #[test]
    fn caused_by_must_exist() {
        let mut clock = SimulatedClock::default();
        let mut log = EventLog::new("r1");
        log.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut clock).unwrap();
        let e = log.append(types::RUN_FINISHED, json!({}), actors::SYSTEM, Some(EventId::new("r1", 1)), &mut clock);
        assert_eq!(e.unwrap().id.seq, 2);
        let err = log
            .append(types::RUN_FINISHED, json!({}), actors::SYSTEM, Some(EventId::new("r1", 99)), &mut clock)
            .unwrap_err();
        assert!(matches!(err, LogError::DanglingCause { seq: 3, .. }));
        // A cause from another run's id space is dangling too.
        let err = log
            .append(types::RUN_FINISHED, json!({}), actors::SYSTEM, Some(EventId::new("other", 1)), &mut clock)
            .unwrap_err();
        assert!(matches!(err, LogError::DanglingCause { .. }));
    }

    #[test]
    fn undeclared_types_are_rejected() {
        let mut log = EventLog::new("r1");
        let err = log.append("made.up", json!({}), actors::USER, None, &mut SystemClock).unwrap_err();
        assert!(matches!(err, LogError::UndeclaredEventType(t) if t == "made.up"));
    }

    #[test]
    fn sealed_log_rejects_appends() {
        let mut log = three_events();
        log.seal();
        let err = log.append(types::RUN_FINISHED, json!({}), actors::SYSTEM, None, &mut SystemClock).unwrap_err();
        assert!(matches!(err, LogError::Sealed(_)));
    }

    #[test]
    fn round_trip_is_exact() {
        let log = three_events();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.log");
        let b = dir.path().join("b.log");
        log.save(&a).unwrap();
        let loaded = EventLog::load(&a).unwrap();
        assert_eq!(loaded.events(), log.events());
        assert_eq!(loaded.run(), log.run());
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        // the float 1.0 was normalized at append time
        assert_eq!(loaded.events()[2].payload["n"], json!(1));
    }

    #[test]
    fn corrupted_line_is_reported() {
        let log = three_events();
        let text = String::from_utf8(log.to_bytes()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{\"id\":";
        let err = EventLog::from_bytes(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, LogError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let log = three_events();
        let text = String::from_utf8(log.to_bytes()).unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(EventLog::from_bytes(text.as_bytes()), Err(LogError::VersionMismatch { .. })));
    }

    #[test]
    fn fork_segments_follow_ancestry() {
        let mut parent = EventLog::new("a");
        let mut clock = SimulatedClock::default();
        for _ in 0..5 {
            parent.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut clock).unwrap();
        }
        let mut b = EventLog::forked_from(&parent, "b", 3, vec![]);
        assert_eq!(b.run_for_seq(3).as_str(), "a");
        assert_eq!(b.run_for_seq(4).as_str(), "b");
        for e in &parent.events()[..3] {
            b.push(e.clone()).unwrap();
        }
        for _ in 0..3 {
            b.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut clock).unwrap();
        }
        let c = EventLog::forked_from(&b, "c", 5, vec![]);
        assert_eq!(
            c.segments(),
            &[Segment { run: "a".into(), last_seq: 3 }, Segment { run: "b".into(), last_seq: 5 }]
        );
        let d = EventLog::forked_from(&b, "d", 2, vec![]);
        assert_eq!(d.segments(), &[Segment { run: "a".into(), last_seq: 2 }]);
    }
}
