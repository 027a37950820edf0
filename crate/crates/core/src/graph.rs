//! The typed property graph, computed as a left fold over the event log.
//!
//! Only `object.created`, `object.patched` and `relation.created` change the
//! graph; every other event folds to an empty delta. `pack.loaded` installs
//! the declared object and relation types, after which creations of
//! undeclared types are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::canonical::{self, CanonicalBytes};
use crate::event::{types, Event, EventId};
use crate::log::EventLog;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> ObjectId {
        ObjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub behavior: String,
    pub caused_by_event: EventId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_request_event: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphObject {
    pub id: ObjectId,
    #[serde(rename = "type")]
    pub kind: String,
    pub properties: Map<String, Value>,
    pub provenance: Provenance,
    pub created_by_event: EventId,
}

impl GraphObject {
    /// Looks up a property by key path.
    pub fn property(&self, path: &[impl AsRef<str>]) -> Option<&Value> {
        lookup_path(&self.properties, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: ObjectId,
    #[serde(rename = "type")]
    pub kind: String,
    pub from: ObjectId,
    pub to: ObjectId,
    pub properties: Map<String, Value>,
    pub provenance: Provenance,
    pub created_by_event: EventId,
}

/// Payload of `object.created`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCreated {
    pub id: ObjectId,
    #[serde(rename = "type")]
    pub kind: String,
    pub properties: Map<String, Value>,
    pub provenance: Provenance,
}

/// Payload of `relation.created`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationCreated {
    pub id: ObjectId,
    #[serde(rename = "type")]
    pub kind: String,
    pub from: ObjectId,
    pub to: ObjectId,
    #[serde(default)]
    pub properties: Map<String, Value>,
    pub provenance: Provenance,
}

/// Payload of `object.patched`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPatched {
    pub target: ObjectId,
    pub ops: Vec<PatchOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Set,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOp {
    pub op: PatchKind,
    pub path: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

impl PatchOp {
    pub fn set(path: &[&str], value: Value) -> PatchOp {
        PatchOp { op: PatchKind::Set, path: path.iter().map(|s| s.to_string()).collect(), value: Some(value) }
    }

    pub fn remove(path: &[&str]) -> PatchOp {
        PatchOp { op: PatchKind::Remove, path: path.iter().map(|s| s.to_string()).collect(), value: None }
    }
}

macro_rules! payload_conversions {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn to_payload(&self) -> Value {
                serde_json::to_value(self).expect("payload serializes")
            }

            pub fn from_payload(v: &Value) -> Result<Self, GraphError> {
                serde_json::from_value(v.clone()).map_err(|e| GraphError::MalformedPayload(e.to_string()))
            }
        }
    )*};
}

payload_conversions!(ObjectCreated, RelationCreated, ObjectPatched);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("relation {relation} references missing object {missing}")]
    DanglingReference { relation: ObjectId, missing: ObjectId },
    #[error("object type {0:?} is not declared")]
    UnknownObjectType(String),
    #[error("relation type {0:?} is not declared")]
    UnknownRelationType(String),
    #[error("patch target {0} does not exist")]
    PatchTargetMissing(ObjectId),
    #[error("id {0} is already in use")]
    DuplicateId(ObjectId),
    #[error("patch op has an empty path or a set without value")]
    InvalidPatch,
    #[error("provenance of {0} does not point at an earlier event or a model request")]
    InvalidProvenance(ObjectId),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("event {got} applied out of order; expected seq {expected}")]
    OutOfOrder { expected: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("projection failed at event {seq}: {source}")]
pub struct ProjectError {
    pub seq: u64,
    pub source: GraphError,
}

/// What one event changed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphDelta {
    pub objects_created: Vec<ObjectId>,
    pub relations_created: Vec<ObjectId>,
    pub objects_patched: Vec<ObjectId>,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        self.objects_created.is_empty() && self.relations_created.is_empty() && self.objects_patched.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
struct Schema {
    object_types: BTreeSet<String>,
    relation_types: BTreeSet<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    objects: BTreeMap<ObjectId, GraphObject>,
    relations: BTreeMap<ObjectId, Relation>,
    object_order: Vec<ObjectId>,
    relation_order: Vec<ObjectId>,
    objects_by_type: BTreeMap<String, Vec<ObjectId>>,
    relations_by_type: BTreeMap<String, Vec<ObjectId>>,
    outgoing: BTreeMap<ObjectId, Vec<ObjectId>>,
    incoming: BTreeMap<ObjectId, Vec<ObjectId>>,
    model_requests: BTreeSet<EventId>,
    schema: Option<Schema>,
    applied: u64,
}

/// Ids, types, properties and provenance; indexes are not compared.
impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.objects == other.objects && self.relations == other.relations
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Number of events folded so far.
    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn object(&self, id: &ObjectId) -> Option<&GraphObject> {
        self.objects.get(id)
    }

    pub fn relation(&self, id: &ObjectId) -> Option<&Relation> {
        self.relations.get(id)
    }

    pub fn contains(&self, id: &ObjectId) -> bool {
        self.objects.contains_key(id) || self.relations.contains_key(id)
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// All objects in creation order.
    pub fn objects(&self) -> impl Iterator<Item = &GraphObject> {
        self.object_order.iter().map(|id| &self.objects[id])
    }

    /// All relations in creation order.
    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relation_order.iter().map(|id| &self.relations[id])
    }

    pub fn objects_of_type<'a>(&'a self, kind: &str) -> impl Iterator<Item = &'a GraphObject> + 'a {
        self.objects_by_type.get(kind).into_iter().flatten().map(|id| &self.objects[id])
    }

    pub fn relations_of_type<'a>(&'a self, kind: &str) -> impl Iterator<Item = &'a Relation> + 'a {
        self.relations_by_type.get(kind).into_iter().flatten().map(|id| &self.relations[id])
    }

    pub fn outgoing<'a>(&'a self, id: &ObjectId) -> impl Iterator<Item = &'a Relation> + 'a {
        self.outgoing.get(id).into_iter().flatten().map(|r| &self.relations[r])
    }

    pub fn incoming<'a>(&'a self, id: &ObjectId) -> impl Iterator<Item = &'a Relation> + 'a {
        self.incoming.get(id).into_iter().flatten().map(|r| &self.relations[r])
    }

    /// Whether a relation of `kind` runs from `from` to `to`.
    pub fn has_edge(&self, from: &ObjectId, kind: &str, to: &ObjectId) -> bool {
        self.outgoing(from).any(|r| r.kind == kind && &r.to == to)
    }

    /// Read-side access in ascending creation order.
    pub fn query(&self, q: &Query) -> Vec<Match<'_>> {
        if q.relation_type.is_some() || q.from.is_some() || q.to.is_some() {
            let candidates: Box<dyn Iterator<Item = &Relation>> = match (&q.relation_type, &q.from, &q.to) {
                (_, Some(from), _) => Box::new(self.outgoing(from)),
                (_, None, Some(to)) => Box::new(self.incoming(to)),
                (Some(kind), None, None) => Box::new(self.relations_of_type(kind)),
                (None, None, None) => Box::new(self.relations()),
            };
            let mut out: Vec<&Relation> = candidates
                .filter(|r| q.relation_type.as_ref().map_or(true, |k| &r.kind == k))
                .filter(|r| q.from.as_ref().map_or(true, |f| &r.from == f))
                .filter(|r| q.to.as_ref().map_or(true, |t| &r.to == t))
                .filter(|r| {
                    q.object_type.as_ref().map_or(true, |k| self.objects.get(&r.from).is_some_and(|o| &o.kind == k))
                })
                .collect();
            out.sort_by_key(|r| r.created_by_event.seq);
            out.into_iter().map(Match::Relation).collect()
        } else {
            match &q.object_type {
                Some(kind) => self.objects_of_type(kind).map(Match::Object).collect(),
                None => self.objects().map(Match::Object).collect(),
            }
        }
    }

    /// Folds one event into the graph. The graph is unchanged on error.
    pub fn apply_event(&mut self, event: &Event) -> Result<GraphDelta, GraphError> {
        if event.seq() != self.applied + 1 {
            return Err(GraphError::OutOfOrder { expected: self.applied + 1, got: event.seq() });
        }
        let delta = match event.kind.as_str() {
            types::OBJECT_CREATED => self.create_object(event)?,
            types::RELATION_CREATED => self.create_relation(event)?,
            types::OBJECT_PATCHED => self.patch_object(event)?,
            types::PACK_LOADED => {
                self.install_schema(&event.payload);
                GraphDelta::default()
            }
            types::LLM_REQUESTED => {
                self.model_requests.insert(event.id.clone());
                GraphDelta::default()
            }
            _ => GraphDelta::default(),
        };
        self.applied += 1;
        Ok(delta)
    }

    fn install_schema(&mut self, payload: &Value) {
        let names = |key: &str| -> BTreeSet<String> {
            payload
                .get(key)
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        };
        let schema = self.schema.get_or_insert_with(Schema::default);
        schema.object_types.extend(names("object_types"));
        schema.relation_types.extend(names("relation_types"));
    }

    fn check_provenance(&self, id: &ObjectId, p: &Provenance, event: &Event) -> Result<(), GraphError> {
        let cause_ok = p.caused_by_event.seq < event.seq() || p.caused_by_event == event.id;
        let request_ok = p.model_request_event.as_ref().map_or(true, |r| self.model_requests.contains(r));
        if cause_ok && request_ok {
            Ok(())
        } else {
            Err(GraphError::InvalidProvenance(id.clone()))
        }
    }

    fn create_object(&mut self, event: &Event) -> Result<GraphDelta, GraphError> {
        let p = ObjectCreated::from_payload(&event.payload)?;
        if let Some(schema) = &self.schema {
            if !schema.object_types.contains(&p.kind) {
                return Err(GraphError::UnknownObjectType(p.kind));
            }
        }
        if self.contains(&p.id) {
            return Err(GraphError::DuplicateId(p.id));
        }
        self.check_provenance(&p.id, &p.provenance, event)?;
        let obj = GraphObject {
            id: p.id.clone(),
            kind: p.kind,
            properties: p.properties,
            provenance: p.provenance,
            created_by_event: event.id.clone(),
        };
        self.objects_by_type.entry(obj.kind.clone()).or_default().push(obj.id.clone());
        self.object_order.push(obj.id.clone());
        self.objects.insert(obj.id.clone(), obj);
        Ok(GraphDelta { objects_created: vec![p.id], ..Default::default() })
    }

    fn create_relation(&mut self, event: &Event) -> Result<GraphDelta, GraphError> {
        let p = RelationCreated::from_payload(&event.payload)?;
        if let Some(schema) = &self.schema {
            if !schema.relation_types.contains(&p.kind) {
                return Err(GraphError::UnknownRelationType(p.kind));
            }
        }
        if self.contains(&p.id) {
            return Err(GraphError::DuplicateId(p.id));
        }
        for end in [&p.from, &p.to] {
            if !self.objects.contains_key(end) {
                return Err(GraphError::DanglingReference { relation: p.id.clone(), missing: end.clone() });
            }
        }
        self.check_provenance(&p.id, &p.provenance, event)?;
        let rel = Relation {
            id: p.id.clone(),
            kind: p.kind,
            from: p.from,
            to: p.to,
            properties: p.properties,
            provenance: p.provenance,
            created_by_event: event.id.clone(),
        };
        self.relations_by_type.entry(rel.kind.clone()).or_default().push(rel.id.clone());
        self.outgoing.entry(rel.from.clone()).or_default().push(rel.id.clone());
        self.incoming.entry(rel.to.clone()).or_default().push(rel.id.clone());
        self.relation_order.push(rel.id.clone());
        self.relations.insert(rel.id.clone(), rel);
        Ok(GraphDelta { relations_created: vec![p.id], ..Default::default() })
    }

    fn patch_object(&mut self, event: &Event) -> Result<GraphDelta, GraphError> {
        let p = ObjectPatched::from_payload(&event.payload)?;
        for op in &p.ops {
            if op.path.is_empty() || (op.op == PatchKind::Set && op.value.is_none()) {
                return Err(GraphError::InvalidPatch);
            }
        }
        let obj = self.objects.get_mut(&p.target).ok_or_else(|| GraphError::PatchTargetMissing(p.target.clone()))?;
        for op in p.ops {
            match op.op {
                PatchKind::Set => set_path(&mut obj.properties, &op.path, op.value.expect("checked")),
                PatchKind::Remove => remove_path(&mut obj.properties, &op.path),
            }
        }
        Ok(GraphDelta { objects_patched: vec![p.target], ..Default::default() })
    }

    /// Objects and relations sorted by id, as a structured value.
    pub fn export(&self) -> Value {
        serde_json::json!({
            "objects": self.objects.values().collect::<Vec<_>>(),
            "relations": self.relations.values().collect::<Vec<_>>(),
        })
    }

    /// The debug export in canonical form.
    pub fn export_canonical(&self) -> CanonicalBytes {
        canonical::canonicalize(&self.export())
    }
}

/// Folds the whole log from the empty graph.
pub fn project(log: &EventLog) -> Result<Graph, ProjectError> {
    let mut graph = Graph::new();
    for event in log.events() {
        graph.apply_event(event).map_err(|source| ProjectError { seq: event.seq(), source })?;
    }
    Ok(graph)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Query {
    pub object_type: Option<String>,
    pub relation_type: Option<String>,
    pub from: Option<ObjectId>,
    pub to: Option<ObjectId>,
}

impl Query {
    pub fn objects(kind: &str) -> Query {
        Query { object_type: Some(kind.into()), ..Default::default() }
    }

    pub fn relations(kind: &str) -> Query {
        Query { relation_type: Some(kind.into()), ..Default::default() }
    }

    pub fn from(mut self, id: ObjectId) -> Query {
        self.from = Some(id);
        self
    }

    pub fn to(mut self, id: ObjectId) -> Query {
        self.to = Some(id);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Match<'a> {
    Object(&'a GraphObject),
    Relation(&'a Relation),
}

impl Match<'_> {
    pub fn id(&self) -> &ObjectId {
        match self {
            Match::Object(o) => &o.id,
            Match::Relation(r) => &r.id,
        }
    }
}

pub fn lookup_path<'a>(map: &'a Map<String, Value>, path: &[impl AsRef<str>]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let mut cur = map.get(first.as_ref())?;
    for key in rest {
        cur = cur.as_object()?.get(key.as_ref())?;
    }
    Some(cur)
}

fn set_path(map: &mut Map<String, Value>, path: &[String], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = map;
    for key in parents {
        let slot = cur.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        if !slot.is_object() {
            *slot = Value::Object(Map::new());
        }
        cur = slot.as_object_mut().expect("object");
    }
    cur.insert(last.clone(), canonical::normalize(&value));
}

fn remove_path(map: &mut Map<String, Value>, path: &[String]) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = map;
    for key in parents {
        match cur.get_mut(key).and_then(Value::as_object_mut) {
            Some(next) => cur = next,
            None => return,
        }
    }
    cur.remove(last);
}
