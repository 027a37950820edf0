//! Model and tool calls as recorded effects.
//!
//! Every request is reduced to a content key. A call first looks for a
//! recorded response under that key; only on a miss does it reach a live
//! [`Provider`] or [`Tool`]. The cache is an index over log events, never a
//! separate store.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::canonical::{self, CanonicalError, Digest};
use crate::event::{types, EventId};
use crate::log::EventLog;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Message {
        Message { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Message {
        Message { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

/// A model request. Temperature is always zero and is not configurable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelRequest {
    pub model: String,
    pub system: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolDef>,
    pub output_schema: Option<Value>,
}

impl ModelRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>) -> ModelRequest {
        ModelRequest { model: model.into(), system: system.into(), ..ModelRequest::default() }
    }

    pub fn message(mut self, m: Message) -> ModelRequest {
        self.messages.push(m);
        self
    }

    pub fn tool(mut self, t: ToolDef) -> ModelRequest {
        self.tools.push(t);
        self
    }

    pub fn output_schema(mut self, schema: Value) -> ModelRequest {
        self.output_schema = Some(schema);
        self
    }

    /// Normalized form: tools sorted by name, absent schema omitted.
    pub fn to_value(&self) -> Value {
        let mut tools = self.tools.clone();
        tools.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = Map::new();
        out.insert("model".into(), json!(self.model));
        out.insert("system".into(), json!(self.system));
        out.insert("messages".into(), serde_json::to_value(&self.messages).expect("messages serialize"));
        out.insert("tools".into(), serde_json::to_value(&tools).expect("tools serialize"));
        if let Some(schema) = &self.output_schema {
            out.insert("output_schema".into(), schema.clone());
        }
        out.insert("temperature".into(), json!(0));
        Value::Object(out)
    }

    pub fn from_value(v: &Value) -> Option<ModelRequest> {
        let o = v.as_object()?;
        Some(ModelRequest {
            model: o.get("model")?.as_str()?.to_string(),
            system: o.get("system")?.as_str()?.to_string(),
            messages: serde_json::from_value(o.get("messages")?.clone()).ok()?,
            tools: serde_json::from_value(o.get("tools").cloned().unwrap_or(json!([]))).ok()?,
            output_schema: o.get("output_schema").cloned(),
        })
    }

    /// Concatenated user message contents, used by fixture matching.
    pub fn user_text(&self) -> String {
        self.messages.iter().filter(|m| m.role == "user").map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

pub fn model_key(request: &ModelRequest) -> Result<Digest, CanonicalError> {
    canonical::content_key(&request.to_value())
}

pub fn tool_key(tool: &str, args: &Value) -> Result<Digest, CanonicalError> {
    canonical::content_key(&json!({"tool": tool, "args": args}))
}

/// Recorded responses keyed by request digest.
#[derive(Debug, Clone, Default)]
pub struct ResponseCache {
    entries: BTreeMap<String, (EventId, Value)>,
}

impl ResponseCache {
    pub fn new() -> ResponseCache {
        ResponseCache::default()
    }

    /// Indexes every successful `llm.responded` and `tool.responded` event.
    pub fn from_log(log: &EventLog) -> ResponseCache {
        let mut cache = ResponseCache::new();
        for e in log.events() {
            cache.observe(&e.id, &e.kind, &e.payload);
        }
        cache
    }

    pub(crate) fn observe(&mut self, id: &EventId, kind: &str, payload: &Value) {
        let key_field = match kind {
            types::LLM_RESPONDED => "prompt_hash",
            types::TOOL_RESPONDED => "key",
            _ => return,
        };
        if let (Some(key), Some(resp)) = (payload.get(key_field).and_then(Value::as_str), payload.get("response")) {
            self.entries.entry(key.to_string()).or_insert_with(|| (id.clone(), resp.clone()));
        }
    }

    pub fn get(&self, key: &Digest) -> Option<(&EventId, &Value)> {
        self.entries.get(key.as_str()).map(|(id, v)| (id, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResponse {
    pub response: Value,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("no fixture matches request {key} (model {model})")]
    FixtureMiss { key: String, model: String },
    #[error("provider error: {0}")]
    Other(String),
}

/// A source of model responses.
pub trait Provider {
    fn call(&mut self, request: &ModelRequest) -> Result<ProviderResponse, ProviderError>;

    /// Replaces the response of the named fixture. Returns false when the
    /// provider has no such fixture.
    fn override_response(&mut self, _id: &str, _response: Value) -> bool {
        false
    }

    /// Number of times `call` reached the provider.
    fn invocations(&self) -> u64;
}

/// A provider with no responses; every call is counted and fails.
#[derive(Debug, Default)]
pub struct NoProvider {
    calls: u64,
}

impl Provider for NoProvider {
    fn call(&mut self, request: &ModelRequest) -> Result<ProviderResponse, ProviderError> {
        self.calls += 1;
        let key = model_key(request).map(|d| d.to_string()).unwrap_or_default();
        Err(ProviderError::FixtureMiss { key, model: request.model.clone() })
    }

    fn invocations(&self) -> u64 {
        self.calls
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
}

impl FixtureMatch {
    fn accepts(&self, request: &ModelRequest, key: &str) -> bool {
        self.key.as_deref().map_or(true, |k| k == key)
            && self.model.as_deref().map_or(true, |m| m == request.model)
            && self.system_contains.as_deref().map_or(true, |s| request.system.contains(s))
            && self.user_contains.as_deref().map_or(true, |s| request.user_text().contains(s))
    }
}

/// One scripted response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub id: String,
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    pub response: Value,
    #[serde(default)]
    pub cost: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture {file}: {reason}")]
    Invalid { file: String, reason: String },
    #[error("duplicate fixture id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixtures in id order. The first fixture whose match accepts a request
/// answers it, so the provider is a pure function of the request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureSet {
    fixtures: Vec<Fixture>,
}

impl FixtureSet {
    pub fn new(mut fixtures: Vec<Fixture>) -> Result<FixtureSet, FixtureError> {
        fixtures.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = fixtures.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(FixtureError::DuplicateId(w[0].id.clone()));
        }
        Ok(FixtureSet { fixtures })
    }

    pub fn parse(name: &str, text: &str) -> Result<Fixture, FixtureError> {
        serde_json::from_str(text).map_err(|e| FixtureError::Invalid { file: name.to_string(), reason: e.to_string() })
    }

    /// Reads every `*.json` file of a directory, one fixture per file.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<FixtureSet, FixtureError> {
        let mut fixtures = Vec::new();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            fixtures.push(Self::parse(&p.display().to_string(), &fs::read_to_string(&p)?)?);
        }
        FixtureSet::new(fixtures)
    }

    pub fn fixtures(&self) -> &[Fixture] {
        &self.fixtures
    }

    pub fn get(&self, id: &str) -> Option<&Fixture> {
        self.fixtures.iter().find(|f| f.id == id)
    }

    pub fn lookup(&self, request: &ModelRequest) -> Option<&Fixture> {
        let key = model_key(request).ok()?;
        self.fixtures.iter().find(|f| f.matcher.accepts(request, key.as_str()))
    }
}

/// Serves responses from a [`FixtureSet`] and counts invocations.
#[derive(Debug, Clone, Default)]
pub struct FixtureProvider {
    set: FixtureSet,
    calls: u64,
}

impl FixtureProvider {
    pub fn new(set: FixtureSet) -> FixtureProvider {
        FixtureProvider { set, calls: 0 }
    }

    pub fn fixtures(&self) -> &FixtureSet {
        &self.set
    }
}

impl Provider for FixtureProvider {
    fn call(&mut self, request: &ModelRequest) -> Result<ProviderResponse, ProviderError> {
        self.calls += 1;
        match self.set.lookup(request) {
            Some(f) => Ok(ProviderResponse { response: f.response.clone(), cost: f.cost }),
            None => Err(ProviderError::FixtureMiss {
                key: model_key(request).map(|d| d.to_string()).unwrap_or_default(),
                model: request.model.clone(),
            }),
        }
    }

    fn override_response(&mut self, id: &str, response: Value) -> bool {
        match self.set.fixtures.iter_mut().find(|f| f.id == id) {
            Some(f) => {
                f.response = response;
                true
            }
            None => false,
        }
    }

    fn invocations(&self) -> u64 {
        self.calls
    }
}

/// A deterministic tool. Arguments and results are plain values.
pub trait Tool: Send + Sync {
    fn call(&self, args: &Value) -> Result<Value, String>;
}

impl<F> Tool for F
where
    F: Fn(&Value) -> Result<Value, String> + Send + Sync,
{
    fn call(&self, args: &Value) -> Result<Value, String> {
        self(args)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelRequest {
        ModelRequest::new("fixture-1", "You are a careful analyst.")
            .message(Message::user("Summarize Northwind."))
            .tool(ToolDef { name: "b".into(), description: "second".into(), parameters: json!({}) })
            .tool(ToolDef { name: "a".into(), description: "first".into(), parameters: json!({"type": "object"}) })
    }

    #[test]
    fn tool_order_does_not_change_key() {
        let mut other = sample();
        other.tools.reverse();
        assert_eq!(model_key(&sample()).unwrap(), model_key(&other).unwrap());
    }

    #[test]
    fn one_character_changes_key() {
        let mut other = sample();
        other.system.push('!');
        assert_ne!(model_key(&sample()).unwrap(), model_key(&other).unwrap());
    }

    #[test]
    fn documented_request_digest() {
        let req = ModelRequest::new("m", "s").message(Message::user("hi"));
        let text = canonical::canonicalize(&req.to_value());
        assert_eq!(
            text.as_str(),
            r#"{"messages":[{"content":"hi","role":"user"}],"model":"m","system":"s","temperature":0,"tools":[]}"#
        );
        // sha256 of the string above, computed with an independent tool.
        assert_eq!(model_key(&req).unwrap().as_str(), "f69e9ba213adff5673d4da50bfbaec729e07eed35bee3a194105383a37daeaf5");
    }

    #[test]
    fn request_value_round_trips() {
        let req = sample().output_schema(json!({"type": "object"}));
        let mut back = ModelRequest::from_value(&req.to_value()).unwrap();
        back.tools.sort_by(|a, b| a.name.cmp(&b.name));
        let mut expected = req.clone();
        expected.tools.sort_by(|a, b| a.name.cmp(&b.name));
        assert_eq!(back, expected);
    }

    #[test]
    fn tool_key_rejects_fractions() {
        assert!(tool_key("t", &json!({"x": 0.5})).is_err());
        assert_eq!(tool_key("t", &json!({"x": 1})).unwrap(), tool_key("t", &json!({"x": 1.0})).unwrap());
    }

    #[test]
    fn fixture_provider_matches_content() {
        let set = FixtureSet::new(vec![
            Fixture {
                id: "b".into(),
                matcher: FixtureMatch { user_contains: Some("Northwind".into()), ..Default::default() },
                response: json!("north"),
                cost: 0.0,
            },
            Fixture { id: "z".into(), matcher: FixtureMatch::default(), response: json!("any"), cost: 0.0 },
        ])
        .unwrap();
        let mut p = FixtureProvider::new(set);
        assert_eq!(p.call(&sample()).unwrap().response, json!("north"));
        let other = ModelRequest::new("m", "s").message(Message::user("Stellar"));
        assert_eq!(p.call(&other).unwrap().response, json!("any"));
        assert_eq!(p.invocations(), 2);
        assert!(p.override_response("b", json!("edited")));
        assert_eq!(p.call(&sample()).unwrap().response, json!("edited"));
        assert!(!p.override_response("nope", json!(1)));
    }

    #[test]
    fn unmatched_request_is_a_fixture_miss() {
        let mut p = FixtureProvider::new(FixtureSet::default());
        assert!(matches!(p.call(&sample()), Err(ProviderError::FixtureMiss { .. })));
    }

    #[test]
    fn duplicate_fixture_ids_rejected() {
        let f = Fixture { id: "a".into(), matcher: FixtureMatch::default(), response: json!(1), cost: 0.0 };
        assert!(matches!(FixtureSet::new(vec![f.clone(), f]), Err(FixtureError::DuplicateId(_))));
    }
}
