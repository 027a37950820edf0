//! Behaviors: a subscription plus a body.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::canonical;
use crate::effects::{Message, ModelRequest, ToolDef};
use crate::event::{types, Event};
use crate::graph::{Graph, ObjectId};
use crate::pattern::{self, match_pattern, parse_conditions, parse_pattern, Binding, ParseError, Pattern, Predicate};
use crate::runtime::{Context, Interrupt};

/// Why a body stopped early.
#[derive(Debug)]
pub enum FireError {
    /// The body failed. Recorded as `behavior.failed`; the run continues.
    Failed(String),
    /// The runtime stopped the run (budget halt or replay divergence).
    Interrupted(Interrupt),
}

impl FireError {
    pub fn failed(msg: impl fmt::Display) -> FireError {
        FireError::Failed(msg.to_string())
    }
}

impl From<String> for FireError {
    fn from(s: String) -> Self {
        FireError::Failed(s)
    }
}

impl From<&str> for FireError {
    fn from(s: &str) -> Self {
        FireError::Failed(s.to_string())
    }
}

impl fmt::Display for FireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FireError::Failed(msg) => f.write_str(msg),
            FireError::Interrupted(i) => write!(f, "interrupted: {i}"),
        }
    }
}

impl std::error::Error for FireError {}

pub type Body = Arc<dyn Fn(&Event, &mut Context<'_>) -> Result<(), FireError> + Send + Sync>;

/// Template variables returned by an LLM-backed behavior's prepare step.
pub type Vars = Map<String, Value>;

/// Gathers template variables. `None` means the fire has nothing to do.
pub type Prepare = Arc<dyn Fn(&Event, &mut Context<'_>) -> Result<Option<Vars>, FireError> + Send + Sync>;

/// Turns the model response into graph effects.
pub type Handle = Arc<dyn Fn(&Event, &mut Context<'_>, &Vars, Value) -> Result<(), FireError> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Function,
    Configured,
    LlmBacked,
    Relation,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubscriptionError {
    #[error("invalid predicate: {0}")]
    Predicate(ParseError),
    #[error("invalid pattern: {0}")]
    Pattern(ParseError),
    #[error("predicates must test `payload`, not `{0}`")]
    PredicateVar(String),
    #[error("patterns need a graph-effecting event type, not {0:?}")]
    PatternOnNonGraphEvent(String),
}

/// An event type, an optional payload predicate and an optional pattern
/// anchored at the object the event touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Subscription {
    pub event_type: String,
    pub predicate: Vec<Predicate>,
    pub pattern: Option<Pattern>,
}

impl Subscription {
    pub fn on(event_type: impl Into<String>) -> Subscription {
        Subscription { event_type: event_type.into(), predicate: Vec::new(), pattern: None }
    }

    /// Adds payload conditions, e.g. `payload.type = 'goal'`.
    pub fn when(mut self, conditions: &str) -> Result<Subscription, SubscriptionError> {
        let parsed = parse_conditions(conditions).map_err(SubscriptionError::Predicate)?;
        if let Some(p) = parsed.iter().find(|p| p.var != "payload") {
            return Err(SubscriptionError::PredicateVar(p.var.clone()));
        }
        self.predicate.extend(parsed);
        Ok(self)
    }

    pub fn matching(mut self, pattern: &str) -> Result<Subscription, SubscriptionError> {
        self.pattern = Some(parse_pattern(pattern).map_err(SubscriptionError::Pattern)?);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SubscriptionError> {
        if let Some(p) = self.predicate.iter().find(|p| p.var != "payload") {
            return Err(SubscriptionError::PredicateVar(p.var.clone()));
        }
        if self.pattern.is_some() && !types::is_graph_effecting(&self.event_type) {
            return Err(SubscriptionError::PatternOnNonGraphEvent(self.event_type.clone()));
        }
        Ok(())
    }

    /// `None` when the subscription does not fire for this event;
    /// otherwise the pattern bindings (empty without a pattern).
    pub fn matches(&self, event: &Event, graph: &Graph) -> Option<Vec<Binding>> {
        if event.kind != self.event_type {
            return None;
        }
        if !self.predicate.is_empty() {
            let payload = event.payload.as_object()?;
            if !self.predicate.iter().all(|p| p.holds(payload)) {
                return None;
            }
        }
        match &self.pattern {
            None => Some(Vec::new()),
            Some(p) => {
                let bindings = match_pattern(graph, p, &anchor_of(event)?);
                (!bindings.is_empty()).then_some(bindings)
            }
        }
    }
}

impl fmt::Display for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.event_type)?;
        if !self.predicate.is_empty() {
            let conds: Vec<String> = self.predicate.iter().map(|p| p.to_string()).collect();
            write!(f, " when {}", conds.join(" AND "))?;
        }
        if let Some(p) = &self.pattern {
            write!(f, " matching {p}")?;
        }
        Ok(())
    }
}

/// The object an event touched: the created object, the patch target, or
/// a new relation's source.
pub fn anchor_of(event: &Event) -> Option<ObjectId> {
    let field = match event.kind.as_str() {
        types::OBJECT_CREATED => "id",
        types::OBJECT_PATCHED => "target",
        types::RELATION_CREATED => "from",
        _ => return None,
    };
    event.payload.get(field).and_then(Value::as_str).map(ObjectId::from)
}

#[derive(Clone)]
pub struct Behavior {
    pub(crate) name: String,
    pub(crate) form: Form,
    pub(crate) subscription: Subscription,
    pub(crate) config: Value,
    pub(crate) body: Body,
}

impl fmt::Debug for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Behavior")
            .field("name", &self.name)
            .field("form", &self.form)
            .field("subscription", &self.subscription.to_string())
            .finish()
    }
}

impl Behavior {
    /// A plain function.
    pub fn function<F>(name: impl Into<String>, subscription: Subscription, body: F) -> Behavior
    where
        F: Fn(&Event, &mut Context<'_>) -> Result<(), FireError> + Send + Sync + 'static,
    {
        Behavior { name: name.into(), form: Form::Function, subscription, config: Value::Null, body: Arc::new(body) }
    }

    /// A body parameterized by a config value, readable through
    /// [`Context::config`] and editable by fork overrides.
    pub fn configured<F>(name: impl Into<String>, subscription: Subscription, config: Value, body: F) -> Behavior
    where
        F: Fn(&Event, &mut Context<'_>) -> Result<(), FireError> + Send + Sync + 'static,
    {
        Behavior { name: name.into(), form: Form::Configured, subscription, config, body: Arc::new(body) }
    }

    /// Logic attached to a typed edge: fires on each new relation of
    /// `relation_type`, optionally constrained by a pattern anchored at the
    /// relation's source.
    pub fn relation<F>(
        name: impl Into<String>,
        relation_type: &str,
        pattern: Option<&str>,
        config: Value,
        body: F,
    ) -> Result<Behavior, SubscriptionError>
    where
        F: Fn(&Event, &mut Context<'_>) -> Result<(), FireError> + Send + Sync + 'static,
    {
        let mut sub = Subscription::on(types::RELATION_CREATED).when(&format!("payload.type = {}", pattern::Literal::Str(relation_type.into())))?;
        if let Some(p) = pattern {
            sub = sub.matching(p)?;
        }
        Ok(Behavior { name: name.into(), form: Form::Relation, subscription: sub, config, body: Arc::new(body) })
    }

    /// Prepare, render the configured templates, call the model once, then
    /// handle the response. The config is an [`LlmConfig`].
    pub fn llm_backed(
        name: impl Into<String>,
        subscription: Subscription,
        config: Value,
        prepare: Prepare,
        handle: Handle,
    ) -> Behavior {
        let body = move |event: &Event, ctx: &mut Context<'_>| -> Result<(), FireError> {
            let Some(vars) = prepare(event, ctx)? else {
                return Ok(());
            };
            let request = LlmConfig::from_value(ctx.config())?.render(&vars)?;
            let response = ctx.call_model(&request)?;
            handle(event, ctx, &vars, response)
        };
        Behavior { name: name.into(), form: Form::LlmBacked, subscription, config, body: Arc::new(body) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn subscription(&self) -> &Subscription {
        &self.subscription
    }

    pub fn config(&self) -> &Value {
        &self.config
    }
}

/// Config of an LLM-backed behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub model: String,
    pub system: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_schema: Option<Value>,
    #[serde(default)]
    pub tools: Vec<ToolDef>,
}

impl LlmConfig {
    pub fn from_value(v: &Value) -> Result<LlmConfig, FireError> {
        serde_json::from_value(v.clone()).map_err(|e| FireError::failed(format!("invalid llm config: {e}")))
    }

    pub fn render(&self, vars: &Vars) -> Result<ModelRequest, FireError> {
        let mut req = ModelRequest::new(self.model.clone(), render(&self.system, vars)?)
            .message(Message::user(render(&self.prompt, vars)?));
        req.tools = self.tools.clone();
        req.output_schema = self.output_schema.clone();
        Ok(req)
    }
}

/// Substitutes `{{name}}` placeholders. Strings are inserted verbatim, other
/// values as canonical JSON. An unknown name is an error.
pub fn render(template: &str, vars: &Vars) -> Result<String, FireError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| FireError::failed("unterminated placeholder in template"))?;
        let name = after[..end].trim();
        match vars.get(name) {
            Some(Value::String(s)) => out.push_str(s),
            Some(other) => out.push_str(canonical::canonicalize(other).as_str()),
            None => return Err(FireError::failed(format!("template variable {name:?} is not defined"))),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventId, Timestamp};
    use serde_json::json;

    fn event(kind: &str, payload: Value) -> Event {
        Event {
            id: EventId::new("r", 1),
            kind: kind.into(),
            payload,
            actor: "user".into(),
            caused_by: None,
            timestamp: Timestamp::from_micros(0),
        }
    }

    #[test]
    fn predicate_selects_goal_objects() {
        let sub = Subscription::on("object.created").when("payload.type = 'goal'").unwrap();
        let g = Graph::new();
        assert_eq!(sub.matches(&event("object.created", json!({"type": "goal"})), &g), Some(vec![]));
        assert_eq!(sub.matches(&event("object.created", json!({"type": "company"})), &g), None);
        assert_eq!(sub.matches(&event("object.patched", json!({"type": "goal"})), &g), None);
    }

    #[test]
    fn predicates_must_name_payload() {
        assert_eq!(
            Subscription::on("x").when("event.type = 'goal'").unwrap_err(),
            SubscriptionError::PredicateVar("event".into())
        );
    }

    #[test]
    fn patterns_need_graph_events() {
        let sub = Subscription::on("llm.requested").matching("MATCH (x)").unwrap();
        assert!(matches!(sub.validate(), Err(SubscriptionError::PatternOnNonGraphEvent(_))));
    }

    #[test]
    fn relation_form_subscribes_to_its_edge_type() {
        let b = Behavior::relation("r", "supports", None, Value::Null, |_, _| Ok(())).unwrap();
        assert_eq!(b.form(), Form::Relation);
        assert_eq!(b.subscription().to_string(), "relation.created when payload.type = 'supports'");
    }

    #[test]
    fn anchors_follow_event_kind() {
        assert_eq!(anchor_of(&event("object.created", json!({"id": "a"}))), Some("a".into()));
        assert_eq!(anchor_of(&event("object.patched", json!({"target": "b"}))), Some("b".into()));
        assert_eq!(anchor_of(&event("relation.created", json!({"from": "c", "to": "d"}))), Some("c".into()));
        assert_eq!(anchor_of(&event("llm.requested", json!({"id": "a"}))), None);
    }

    #[test]
    fn render_fills_placeholders() {
        let vars: Vars = serde_json::from_value(json!({"company": "Northwind", "n": 3})).unwrap();
        assert_eq!(render("Research {{company}} ({{ n }} items)", &vars).unwrap(), "Research Northwind (3 items)");
        assert!(render("{{missing}}", &vars).is_err());
        assert!(render("{{open", &vars).is_err());
    }
}
