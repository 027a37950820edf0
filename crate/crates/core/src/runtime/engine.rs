//! The single execution loop behind live runs, strict replay, forks and
//! permissive replay.
//!
//! Replay modes differ only in how they treat a record. While *following*,
//! every event the engine produces is compared with the recorded event at
//! the same seq; on agreement the recorded event (with its timestamp) is
//! kept, and recorded responses answer model and tool calls. What happens
//! on disagreement, and when following stops, depends on the mode.

use std::collections::VecDeque;

use serde_json::{json, Value};

use super::context::{Context, Host};
use super::{Interrupt, RunError, RunOptions, RunOutcome, RunReport, RunStatus, Runtime, Step};
use crate::behavior::FireError;
use crate::budget::{Budget, BudgetExceeded, Dimension, Usage};
use crate::effects::{model_key, tool_key, ModelRequest, Provider, ProviderError, ResponseCache};
use crate::event::{actors, types, Event, EventId, RunId, Timestamp};
use crate::graph::{Graph, ObjectCreated, ObjectId, Provenance};
use crate::log::{EventLog, Override, SimulatedClock, SystemClock, TimestampSource};
use crate::replay::DivergenceError;

use super::ClockMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Live,
    /// Follow the whole record; any disagreement is an error.
    Strict,
    /// Follow the record up to the cutoff, then run live.
    Fork { cutoff: u64 },
    /// Follow the record; at the first disagreement become a fork of it.
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Halted,
    Diverged,
    Fatal,
}

enum Rejection {
    Invalid(String),
    Stop(Stop),
}

impl From<Rejection> for FireError {
    fn from(r: Rejection) -> Self {
        match r {
            Rejection::Invalid(msg) => FireError::Failed(msg),
            Rejection::Stop(s) => FireError::Interrupted(Interrupt(s)),
        }
    }
}

pub(crate) struct Engine<'r> {
    runtime: &'r Runtime,
    provider: &'r mut dyn Provider,
    record: Option<&'r EventLog>,
    mode: Mode,
    following: bool,
    log: EventLog,
    graph: Graph,
    depths: Vec<u64>,
    budget: Budget,
    usage: Usage,
    configs: Vec<Value>,
    cache: ResponseCache,
    inherited: ResponseCache,
    clock_mode: ClockMode,
    clock: Option<Box<dyn TimestampSource>>,
    stop: Option<Stop>,
    halted: Option<BudgetExceeded>,
    divergence: Option<DivergenceError>,
    fatal: Option<RunError>,
    provider_start: u64,
    prefix_invocations: Option<u64>,
    tool_executions: u64,
    behavior_failures: u64,
    fixture_misses: u64,
    fresh: u64,
    diverged_at: Option<u64>,
}

impl<'r> Engine<'r> {
    pub(crate) fn new(
        runtime: &'r Runtime,
        provider: &'r mut dyn Provider,
        log: EventLog,
        options: RunOptions,
        mode: Mode,
        record: Option<&'r EventLog>,
    ) -> Engine<'r> {
        let inherited = match (mode, record) {
            (Mode::Permissive, Some(r)) => ResponseCache::from_log(r),
            _ => ResponseCache::new(),
        };
        let provider_start = provider.invocations();
        Engine {
            runtime,
            provider,
            record,
            mode,
            following: mode != Mode::Live && record.is_some(),
            log,
            graph: Graph::new(),
            depths: Vec::new(),
            budget: options.budget,
            usage: Usage::default(),
            configs: runtime.behaviors().iter().map(|b| b.config().clone()).collect(),
            cache: ResponseCache::new(),
            inherited,
            clock_mode: options.clock,
            clock: None,
            stop: None,
            halted: None,
            divergence: None,
            fatal: None,
            provider_start,
            prefix_invocations: None,
            tool_executions: 0,
            behavior_failures: 0,
            fixture_misses: 0,
            fresh: 0,
            diverged_at: None,
        }
    }

    /// Executes the script and seals the log.
    pub(crate) fn run(mut self, script: &[Step]) -> Result<RunOutcome, RunError> {
        if let Mode::Fork { cutoff: 0 } = self.mode {
            self.end_following();
        }
        for step in script {
            if self.stop.is_some() {
                break;
            }
            let _ = self.step(step);
        }
        if self.stop.is_none() && self.following {
            if let Some(record) = self.record {
                if self.log.len() < record.len() {
                    let seq = self.log.len() as u64 + 1;
                    match self.mode {
                        Mode::Permissive => {
                            self.rebase(seq);
                        }
                        _ => {
                            self.divergence = Some(DivergenceError::new(seq, record.get(seq).cloned(), None));
                            self.stop = Some(Stop::Diverged);
                        }
                    }
                }
            }
        }
        if self.following {
            self.end_following();
        }
        match self.stop {
            Some(Stop::Diverged) => {
                return Err(RunError::Diverged(Box::new(self.divergence.take().expect("divergence recorded"))))
            }
            Some(Stop::Fatal) => return Err(self.fatal.take().expect("fatal error recorded")),
            _ => {}
        }
        self.log.seal();
        let report = self.report();
        Ok(RunOutcome { log: self.log, graph: self.graph, report })
    }

    fn report(&self) -> RunReport {
        let count = |kind: &str| self.log.events().iter().filter(|e| e.kind == kind).count() as u64;
        let invocations = self.provider.invocations() - self.provider_start;
        RunReport {
            run: self.log.run().clone(),
            status: match &self.halted {
                Some(b) => RunStatus::Halted(b.clone()),
                None => RunStatus::Completed,
            },
            events: self.log.len() as u64,
            objects: self.graph.object_count() as u64,
            relations: self.graph.relation_count() as u64,
            model_calls: count(types::LLM_REQUESTED),
            tool_calls: count(types::TOOL_REQUESTED),
            provider_invocations: invocations,
            prefix_provider_invocations: self.prefix_invocations.unwrap_or(invocations),
            tool_executions: self.tool_executions,
            behavior_failures: self.behavior_failures,
            fixture_misses: self.fixture_misses,
            fresh_events: self.fresh,
            diverged_at: self.diverged_at,
        }
    }

    fn end_following(&mut self) {
        if self.following || self.prefix_invocations.is_none() {
            self.prefix_invocations = Some(self.provider.invocations() - self.provider_start);
        }
        self.following = false;
    }

    fn fail(&mut self, err: RunError) -> Stop {
        self.fatal = Some(err);
        self.stop = Some(Stop::Fatal);
        Stop::Fatal
    }

    fn first_id(&self) -> Option<EventId> {
        self.log.get(1).map(|e| e.id.clone())
    }

    fn step(&mut self, step: &Step) -> Result<(), Stop> {
        let describe = |s: &Step| match s {
            Step::Start => "start".to_string(),
            Step::LoadPack => "load-pack".to_string(),
            Step::CreateObject { kind, .. } => format!("create {kind}"),
            Step::Event { kind, .. } => kind.clone(),
            Step::Finish => "finish".to_string(),
        };
        let appended = match step {
            Step::Start => {
                let payload = json!({
                    "run": self.log.run_for_seq(1).as_str(),
                    "budget": self.budget.to_value(),
                    "clock": self.clock_mode.to_value(),
                });
                self.append(types::RUN_STARTED, payload, actors::SYSTEM, None)
            }
            Step::LoadPack => {
                let cause = self.first_id();
                self.append(types::PACK_LOADED, self.runtime.pack_payload(), actors::SYSTEM, cause)
            }
            Step::CreateObject { kind, properties, actor } => {
                let own = self.log.next_id();
                let payload = ObjectCreated {
                    id: ObjectId::new(format!("{}:{}.0", own.run, own.seq)),
                    kind: kind.clone(),
                    properties: properties.as_object().cloned().unwrap_or_default(),
                    provenance: Provenance { behavior: actor.clone(), caused_by_event: own, model_request_event: None },
                };
                self.append(types::OBJECT_CREATED, payload.to_payload(), actor, None)
            }
            Step::Event { kind, payload, actor, caused_by } => {
                let cause = match caused_by {
                    Some(seq) => match self.log.get(*seq) {
                        Some(e) => Some(e.id.clone()),
                        None => {
                            return Err(self.fail(RunError::Rejected {
                                step: kind.clone(),
                                reason: format!("cause seq {seq} does not exist"),
                            }))
                        }
                    },
                    None => None,
                };
                self.append(kind, payload.clone(), actor, cause)
            }
            Step::Finish => {
                let cause = self.first_id();
                self.append(types::RUN_FINISHED, json!({"status": "completed"}), actors::SYSTEM, cause)
            }
        };
        let id = match appended {
            Ok(id) => id,
            Err(Rejection::Stop(s)) => return Err(s),
            Err(Rejection::Invalid(reason)) => {
                return Err(self.fail(RunError::Rejected { step: describe(step), reason }));
            }
        };
        if matches!(step, Step::Finish) {
            return Ok(());
        }
        self.dispatch(id.seq)
    }

    /// Dispatches an event and, depth first, everything it causes.
    fn dispatch(&mut self, seq: u64) -> Result<(), Stop> {
        let runtime = self.runtime;
        let mut queue = VecDeque::from([seq]);
        while let Some(seq) = queue.pop_front() {
            let event = self.log.get(seq).expect("dispatched event exists").clone();
            let before = self.log.len() as u64;
            for (idx, behavior) in runtime.behaviors().iter().enumerate() {
                if let Some(bindings) = behavior.subscription().matches(&event, &self.graph) {
                    self.fire(idx, &event, bindings)?;
                }
            }
            let after = self.log.len() as u64;
            for s in (before + 1..=after).rev() {
                queue.push_front(s);
            }
        }
        Ok(())
    }

    fn fire(&mut self, idx: usize, trigger: &Event, bindings: Vec<crate::pattern::Binding>) -> Result<(), Stop> {
        let behavior = &self.runtime.behaviors()[idx];
        let name = behavior.name().to_string();
        if let Err(ex) = self.usage.charge(&self.budget, Dimension::BehaviorCalls) {
            return Err(self.halt(ex, Some(trigger.id.clone())));
        }
        let started = match self.append(types::BEHAVIOR_STARTED, json!({"behavior": name}), &name, Some(trigger.id.clone())) {
            Ok(id) => id,
            Err(Rejection::Stop(s)) => return Err(s),
            Err(Rejection::Invalid(reason)) => return Err(self.fail(RunError::Rejected { step: name, reason })),
        };
        let body = behavior.body.clone();
        let result = {
            let mut ctx = Context::new(self, idx, trigger.clone(), started, bindings);
            body(trigger, &mut ctx)
        };
        if let Some(stop) = self.stop {
            return Err(stop);
        }
        let outcome = match result {
            Ok(()) => self.append(types::BEHAVIOR_FINISHED, json!({"behavior": name}), &name, Some(trigger.id.clone())),
            Err(FireError::Failed(error)) => {
                self.behavior_failures += 1;
                self.append(
                    types::BEHAVIOR_FAILED,
                    json!({"behavior": name, "error": error}),
                    &name,
                    Some(trigger.id.clone()),
                )
            }
            Err(FireError::Interrupted(i)) => return Err(i.0),
        };
        match outcome {
            Ok(_) => Ok(()),
            Err(Rejection::Stop(s)) => Err(s),
            Err(Rejection::Invalid(reason)) => Err(self.fail(RunError::Rejected { step: name, reason })),
        }
    }

    fn halt(&mut self, exceeded: BudgetExceeded, cause: Option<EventId>) -> Stop {
        let ts = self.timestamp_for(self.log.len() as u64 + 1);
        self.halt_at(exceeded, cause, ts)
    }

    fn halt_at(&mut self, exceeded: BudgetExceeded, cause: Option<EventId>, ts: Timestamp) -> Stop {
        match self.commit(types::BUDGET_EXCEEDED, exceeded.to_payload(), actors::RUNTIME, cause, ts) {
            Ok(_) => {
                self.halted = Some(exceeded);
                self.stop = Some(Stop::Halted);
                Stop::Halted
            }
            Err(Rejection::Stop(s)) => s,
            Err(Rejection::Invalid(reason)) => {
                self.fail(RunError::Rejected { step: types::BUDGET_EXCEEDED.into(), reason })
            }
        }
    }

    fn depth_of(&self, cause: Option<&EventId>) -> u64 {
        cause.and_then(|c| self.depths.get(c.seq as usize - 1)).map_or(0, |d| d + 1)
    }

    /// Appends an ordinary event after the event, depth and wall-time checks.
    fn append(&mut self, kind: &str, payload: Value, actor: &str, cause: Option<EventId>) -> Result<EventId, Rejection> {
        if let Some(s) = self.stop {
            return Err(Rejection::Stop(s));
        }
        let seq = self.log.len() as u64 + 1;
        if seq >= self.budget.max_events {
            let ex = BudgetExceeded { dimension: Dimension::Events, limit: json!(self.budget.max_events), used: json!(seq) };
            return Err(Rejection::Stop(self.halt(ex, cause)));
        }
        if let Some(c) = &cause {
            if c.seq >= seq || c.seq == 0 {
                return Err(Rejection::Invalid(format!("cause {c} is not an earlier event")));
            }
        }
        let depth = self.depth_of(cause.as_ref());
        if depth > self.budget.max_depth {
            let ex = BudgetExceeded { dimension: Dimension::Depth, limit: json!(self.budget.max_depth), used: json!(depth) };
            return Err(Rejection::Stop(self.halt(ex, cause)));
        }
        let ts = self.timestamp_for(seq);
        if let Some(first) = self.log.get(1) {
            let elapsed_ms = (ts.as_micros() - first.timestamp.as_micros()).max(0) as u64 / 1000;
            if elapsed_ms > self.budget.max_wall_ms {
                let ex = BudgetExceeded {
                    dimension: Dimension::WallMs,
                    limit: json!(self.budget.max_wall_ms),
                    used: json!(elapsed_ms),
                };
                return Err(Rejection::Stop(self.halt_at(ex, cause, ts)));
            }
        }
        self.commit(kind, payload, actor, cause, ts)
    }

    fn timestamp_for(&mut self, seq: u64) -> Timestamp {
        if self.following {
            if let Some(rec) = self.record.and_then(|r| r.get(seq)) {
                return rec.timestamp;
            }
        }
        self.live_timestamp()
    }

    fn live_timestamp(&mut self) -> Timestamp {
        if self.clock.is_none() {
            let clock: Box<dyn TimestampSource> = match self.clock_mode {
                ClockMode::System => Box::new(SystemClock),
                ClockMode::Simulated { step_micros } => {
                    let start = self
                        .log
                        .last()
                        .map_or(SimulatedClock::DEFAULT_START, |e| e.timestamp.as_micros() + step_micros);
                    Box::new(SimulatedClock::new(Timestamp::from_micros(start), step_micros))
                }
            };
            self.clock = Some(clock);
        }
        self.clock.as_mut().expect("clock initialized").next_timestamp()
    }

    fn follows_seq(&self, seq: u64) -> bool {
        match self.mode {
            Mode::Fork { cutoff } => self.following && seq <= cutoff,
            _ => self.following,
        }
    }

    /// Becomes a fork of the record at `seq - 1`.
    fn rebase(&mut self, seq: u64) {
        let record = self.record.expect("permissive replay has a record");
        self.log.rebase(record, seq - 1);
        self.diverged_at = Some(seq);
        self.end_following();
        self.clock = None;
    }

    fn commit(
        &mut self,
        kind: &str,
        payload: Value,
        actor: &str,
        cause: Option<EventId>,
        ts: Timestamp,
    ) -> Result<EventId, Rejection> {
        let seq = self.log.len() as u64 + 1;
        let depth = self.depth_of(cause.as_ref());
        let mut candidate = Event {
            id: self.log.next_id(),
            kind: kind.to_string(),
            payload: crate::canonical::normalize(&payload),
            actor: actor.to_string(),
            caused_by: cause,
            timestamp: ts,
        };
        self.log.validate(&candidate).map_err(|e| Rejection::Invalid(e.to_string()))?;
        let mut fresh = true;
        if self.follows_seq(seq) {
            let recorded = self.record.and_then(|r| r.get(seq));
            match recorded {
                Some(rec) if same_event(rec, &candidate) => {
                    candidate = rec.clone();
                    fresh = false;
                }
                _ => match self.mode {
                    Mode::Permissive => {
                        self.rebase(seq);
                        candidate.id = self.log.next_id();
                        candidate.timestamp = self.live_timestamp();
                    }
                    _ => {
                        self.divergence = Some(DivergenceError::new(seq, recorded.cloned(), Some(candidate)));
                        self.stop = Some(Stop::Diverged);
                        return Err(Rejection::Stop(Stop::Diverged));
                    }
                },
            }
        }
        self.graph.apply_event(&candidate).map_err(|e| Rejection::Invalid(e.to_string()))?;
        self.cache.observe(&candidate.id, &candidate.kind, &candidate.payload);
        let id = candidate.id.clone();
        self.log.push(candidate).map_err(|e| Rejection::Invalid(e.to_string()))?;
        self.depths.push(depth);
        if fresh {
            self.fresh += 1;
        }
        if let Mode::Fork { cutoff } = self.mode {
            if self.following && seq >= cutoff {
                self.end_following();
            }
        }
        self.apply_due_overrides()?;
        Ok(id)
    }

    fn apply_due_overrides(&mut self) -> Result<(), Rejection> {
        let n = self.log.len() as u64;
        let due: Vec<Override> = self.log.overrides().iter().filter(|o| o.at == n).cloned().collect();
        for o in due {
            if let Err(reason) = self.apply_override(&o) {
                return Err(Rejection::Stop(self.fail(RunError::Override { key: o.key.clone(), reason })));
            }
        }
        Ok(())
    }

    fn apply_override(&mut self, o: &Override) -> Result<(), String> {
        let (scope, rest) = o.key.split_once('.').ok_or("expected <scope>.<name>")?;
        match scope {
            "budget" => self.budget.set(rest, &o.value).map_err(|e| e.to_string()),
            "fixture" => {
                if self.mode == Mode::Strict || self.provider.override_response(rest, o.value.clone()) {
                    Ok(())
                } else {
                    Err(format!("no fixture named {rest:?}"))
                }
            }
            "behavior" => {
                let (name, path) = match rest.split_once('.') {
                    Some((n, p)) => (n, Some(p)),
                    None => (rest, None),
                };
                let idx = self.runtime.behavior_index(name).ok_or_else(|| format!("no behavior named {name:?}"))?;
                match path {
                    None => self.configs[idx] = o.value.clone(),
                    Some(p) => set_config_path(&mut self.configs[idx], p, o.value.clone()),
                }
                Ok(())
            }
            other => Err(format!("unknown override scope {other:?}")),
        }
    }

    fn halt_fire(&mut self, ex: BudgetExceeded, cause: &EventId) -> FireError {
        FireError::Interrupted(Interrupt(self.halt(ex, Some(cause.clone()))))
    }

    /// Serves the response to a request event from the record when
    /// following, then from the caches. `None` means a live call is needed.
    fn recorded_response(&self, request: &EventId, key_field: &str, key: &str, kinds: [&str; 2]) -> Option<Event> {
        let seq = self.log.len() as u64 + 1;
        if !self.follows_seq(seq) {
            return None;
        }
        let rec = self.record?.get(seq)?;
        let matches = kinds.contains(&rec.kind.as_str())
            && rec.caused_by.as_ref() == Some(request)
            && rec.payload.get(key_field).and_then(Value::as_str) == Some(key);
        matches.then(|| rec.clone())
    }

    fn strict_miss(&mut self) -> FireError {
        let seq = self.log.len() as u64 + 1;
        let expected = self.record.and_then(|r| r.get(seq)).cloned();
        self.divergence = Some(DivergenceError::new(seq, expected, None));
        self.stop = Some(Stop::Diverged);
        FireError::Interrupted(Interrupt(Stop::Diverged))
    }
}

fn same_event(a: &Event, b: &Event) -> bool {
    a.id == b.id && a.kind == b.kind && a.payload == b.payload && a.actor == b.actor && a.caused_by == b.caused_by
}

fn set_config_path(config: &mut Value, path: &str, value: Value) {
    let mut cur = config;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            *cur = json!({});
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return;
        }
        cur = map.entry(key.to_string()).or_insert_with(|| json!({}));
    }
}

impl Host for Engine<'_> {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn config(&self, behavior: usize) -> &Value {
        &self.configs[behavior]
    }

    fn behavior_name(&self, behavior: usize) -> &str {
        self.runtime.behaviors()[behavior].name()
    }

    fn next_run(&self) -> RunId {
        self.log.next_id().run
    }

    fn has_event(&self, id: &EventId) -> bool {
        self.log.lookup(id).is_some()
    }

    fn emit(&mut self, kind: &str, payload: Value, actor: &str, cause: EventId) -> Result<EventId, FireError> {
        Ok(self.append(kind, payload, actor, Some(cause))?)
    }

    fn charge(&mut self, dim: Dimension, cause: &EventId) -> Result<(), FireError> {
        if let Some(s) = self.stop {
            return Err(FireError::Interrupted(Interrupt(s)));
        }
        match self.usage.charge(&self.budget, dim) {
            Ok(()) => Ok(()),
            Err(ex) => Err(self.halt_fire(ex, cause)),
        }
    }

    fn call_model(&mut self, actor: &str, cause: &EventId, request: &ModelRequest) -> Result<(EventId, Value), FireError> {
        let key = model_key(request).map_err(|e| FireError::failed(format!("model request is not canonical: {e}")))?;
        self.charge(Dimension::ModelCalls, cause)?;
        let payload = json!({
            "deterministic": true,
            "model": request.model,
            "prompt_hash": key.as_str(),
            "request": request.to_value(),
        });
        let requested = self.append(types::LLM_REQUESTED, payload, actor, Some(cause.clone()))?;
        let reply = Some(requested.clone());

        if let Some(rec) =
            self.recorded_response(&requested, "prompt_hash", key.as_str(), [types::LLM_RESPONDED, types::LLM_FAILED])
        {
            self.append(&rec.kind, rec.payload.clone(), actor, reply)?;
            if rec.kind == types::LLM_FAILED {
                let error = rec.payload.get("error").and_then(Value::as_str).unwrap_or("model call failed");
                return Err(FireError::failed(error));
            }
            let cost = rec.payload.get("cost").and_then(Value::as_f64).unwrap_or(0.0);
            if let Err(ex) = self.usage.add_cost(&self.budget, cost) {
                return Err(self.halt_fire(ex, cause));
            }
            return Ok((requested, rec.payload.get("response").cloned().unwrap_or(Value::Null)));
        }

        let cached = self.cache.get(&key).or_else(|| self.inherited.get(&key)).map(|(id, v)| (id.clone(), v.clone()));
        if let Some((source, response)) = cached {
            let payload = json!({
                "prompt_hash": key.as_str(),
                "response": response,
                "cost": 0,
                "cached": true,
                "source": source.to_string(),
            });
            self.append(types::LLM_RESPONDED, payload, actor, reply)?;
            return Ok((requested, response));
        }

        if self.mode == Mode::Strict {
            return Err(self.strict_miss());
        }
        match self.provider.call(request) {
            Ok(r) => {
                let payload = json!({
                    "prompt_hash": key.as_str(),
                    "response": r.response,
                    "cost": r.cost,
                    "cached": false,
                });
                self.append(types::LLM_RESPONDED, payload, actor, reply)?;
                if let Err(ex) = self.usage.add_cost(&self.budget, r.cost) {
                    return Err(self.halt_fire(ex, cause));
                }
                Ok((requested, r.response))
            }
            Err(e) => {
                if matches!(e, ProviderError::FixtureMiss { .. }) {
                    self.fixture_misses += 1;
                }
                let payload = json!({"prompt_hash": key.as_str(), "error": e.to_string()});
                self.append(types::LLM_FAILED, payload, actor, reply)?;
                Err(FireError::failed(e))
            }
        }
    }

    fn call_tool(&mut self, actor: &str, cause: &EventId, tool: &str, args: Value) -> Result<Value, FireError> {
        let runtime = self.runtime;
        let Some(implementation) = runtime.tool(tool) else {
            return Err(FireError::failed(format!("unknown tool {tool:?}")));
        };
        let args = crate::canonical::normalize(&args);
        let key = tool_key(tool, &args).map_err(|e| FireError::failed(format!("tool arguments are not canonical: {e}")))?;
        let payload = json!({"tool": tool, "args": args, "key": key.as_str()});
        let requested = self.append(types::TOOL_REQUESTED, payload, actor, Some(cause.clone()))?;
        let reply = Some(requested.clone());

        if let Some(rec) =
            self.recorded_response(&requested, "key", key.as_str(), [types::TOOL_RESPONDED, types::TOOL_FAILED])
        {
            self.append(&rec.kind, rec.payload.clone(), actor, reply)?;
            if rec.kind == types::TOOL_FAILED {
                let error = rec.payload.get("error").and_then(Value::as_str).unwrap_or("tool call failed");
                return Err(FireError::failed(error));
            }
            return Ok(rec.payload.get("response").cloned().unwrap_or(Value::Null));
        }

        let cached = self.cache.get(&key).or_else(|| self.inherited.get(&key)).map(|(id, v)| (id.clone(), v.clone()));
        if let Some((source, response)) = cached {
            let payload = json!({
                "key": key.as_str(),
                "response": response,
                "cached": true,
                "source": source.to_string(),
            });
            self.append(types::TOOL_RESPONDED, payload, actor, reply)?;
            return Ok(response);
        }

        if self.mode == Mode::Strict {
            return Err(self.strict_miss());
        }
        self.tool_executions += 1;
        match implementation.call(&args) {
            Ok(response) => {
                let response = crate::canonical::normalize(&response);
                let payload = json!({"key": key.as_str(), "response": response, "cached": false});
                self.append(types::TOOL_RESPONDED, payload, actor, reply)?;
                Ok(response)
            }
            Err(error) => {
                self.append(types::TOOL_FAILED, json!({"key": key.as_str(), "error": error}), actor, reply)?;
                Err(FireError::failed(error))
            }
        }
    }
}
