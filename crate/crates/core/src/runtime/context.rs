use serde_json::{Map, Value};

use crate::behavior::FireError;
use crate::budget::Dimension;
use crate::effects::ModelRequest;
use crate::event::{types, Event, EventId, RunId, Timestamp};
use crate::graph::{Graph, ObjectCreated, ObjectId, ObjectPatched, PatchOp, Provenance, RelationCreated};
use crate::pattern::Binding;

/// What a fire needs from the engine.
pub(crate) trait Host {
    fn graph(&self) -> &Graph;
    fn config(&self, behavior: usize) -> &Value;
    fn behavior_name(&self, behavior: usize) -> &str;
    /// Run that will own the next appended event.
    fn next_run(&self) -> RunId;
    fn has_event(&self, id: &EventId) -> bool;
    fn emit(&mut self, kind: &str, payload: Value, actor: &str, cause: EventId) -> Result<EventId, FireError>;
    fn charge(&mut self, dim: Dimension, cause: &EventId) -> Result<(), FireError>;
    /// Returns the `llm.requested` id and the response.
    fn call_model(&mut self, actor: &str, cause: &EventId, request: &ModelRequest) -> Result<(EventId, Value), FireError>;
    fn call_tool(&mut self, actor: &str, cause: &EventId, tool: &str, args: Value) -> Result<Value, FireError>;
}

/// The handle a body receives. Every effect goes through it and lands in the
/// log as one or more events caused by the triggering event.
pub struct Context<'c> {
    host: &'c mut (dyn Host + 'c),
    behavior: usize,
    trigger: Event,
    fire: EventId,
    next_local: u64,
    last_request: Option<EventId>,
    bindings: Vec<Binding>,
}

impl<'c> Context<'c> {
    pub(crate) fn new(
        host: &'c mut (dyn Host + 'c),
        behavior: usize,
        trigger: Event,
        fire: EventId,
        bindings: Vec<Binding>,
    ) -> Context<'c> {
        Context { host, behavior, trigger, fire, next_local: 0, last_request: None, bindings }
    }

    /// Read-only view of the current graph.
    pub fn graph(&self) -> &Graph {
        self.host.graph()
    }

    pub fn trigger(&self) -> &Event {
        &self.trigger
    }

    /// Pattern bindings for this fire, in deterministic order.
    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn config(&self) -> &Value {
        self.host.config(self.behavior)
    }

    pub fn behavior_name(&self) -> &str {
        self.host.behavior_name(self.behavior)
    }

    /// The triggering event's recorded timestamp.
    pub fn now(&self) -> Timestamp {
        self.trigger.timestamp
    }

    /// A fresh id, namespaced by this fire and stable under replay.
    pub fn new_id(&mut self) -> ObjectId {
        let id = ObjectId::new(format!("{}:{}.{}", self.host.next_run(), self.fire.seq, self.next_local));
        self.next_local += 1;
        id
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            behavior: self.behavior_name().to_string(),
            caused_by_event: self.trigger.id.clone(),
            model_request_event: self.last_request.clone(),
        }
    }

    fn effect(&mut self, kind: &str, payload: Value) -> Result<EventId, FireError> {
        let actor = self.behavior_name().to_string();
        self.host.emit(kind, payload, &actor, self.trigger.id.clone())
    }

    pub fn create_object(&mut self, kind: &str, properties: Value) -> Result<ObjectId, FireError> {
        let properties = into_map(properties)?;
        let id = self.new_id();
        let payload = ObjectCreated { id: id.clone(), kind: kind.to_string(), properties, provenance: self.provenance() };
        self.effect(types::OBJECT_CREATED, payload.to_payload())?;
        Ok(id)
    }

    pub fn create_relation(
        &mut self,
        kind: &str,
        from: &ObjectId,
        to: &ObjectId,
        properties: Value,
    ) -> Result<ObjectId, FireError> {
        let properties = into_map(properties)?;
        let id = self.new_id();
        let payload = RelationCreated {
            id: id.clone(),
            kind: kind.to_string(),
            from: from.clone(),
            to: to.clone(),
            properties,
            provenance: self.provenance(),
        };
        self.effect(types::RELATION_CREATED, payload.to_payload())?;
        Ok(id)
    }

    pub fn patch_object(&mut self, target: &ObjectId, ops: Vec<PatchOp>) -> Result<(), FireError> {
        self.host.charge(Dimension::Patches, &self.trigger.id)?;
        let payload = ObjectPatched { target: target.clone(), ops };
        self.effect(types::OBJECT_PATCHED, payload.to_payload())?;
        Ok(())
    }

    /// Calls the model through the cache. Objects created afterwards in this
    /// fire record the request event in their provenance.
    pub fn call_model(&mut self, request: &ModelRequest) -> Result<Value, FireError> {
        let actor = self.behavior_name().to_string();
        let (requested, response) = self.host.call_model(&actor, &self.trigger.id, request)?;
        self.last_request = Some(requested);
        Ok(response)
    }

    pub fn call_tool(&mut self, tool: &str, args: Value) -> Result<Value, FireError> {
        let actor = self.behavior_name().to_string();
        self.host.call_tool(&actor, &self.trigger.id, tool, args)
    }

    /// Appends a pack-declared event caused by the triggering event.
    pub fn emit(&mut self, kind: &str, payload: Value) -> Result<EventId, FireError> {
        let cause = self.trigger.id.clone();
        self.emit_caused_by(kind, payload, cause)
    }

    /// Appends a pack-declared event with an explicit, earlier cause.
    pub fn emit_caused_by(&mut self, kind: &str, payload: Value, cause: EventId) -> Result<EventId, FireError> {
        if types::CORE.contains(&kind) {
            return Err(FireError::failed(format!("{kind} is reserved; use the dedicated context operation")));
        }
        if !self.host.has_event(&cause) {
            return Err(FireError::failed(format!("cause {cause} is not an event of this run")));
        }
        let actor = self.behavior_name().to_string();
        self.host.emit(kind, payload, &actor, cause)
    }
}

fn into_map(v: Value) -> Result<Map<String, Value>, FireError> {
    match v {
        Value::Object(m) => Ok(m),
        Value::Null => Ok(Map::new()),
        other => Err(FireError::failed(format!("properties must be a map, got {other}"))),
    }
}
