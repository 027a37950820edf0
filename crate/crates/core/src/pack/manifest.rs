use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::behavior::{Subscription, SubscriptionError};
use crate::budget::{Budget, BudgetError};
use crate::event::types;

/// One behavior entry. Either `on` (with optional `when` and `pattern`)
/// or `relation` (with optional `pattern`) selects the trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default)]
    pub config: Value,
}

impl BehaviorSpec {
    pub fn subscription(&self) -> Result<Subscription, SubscriptionError> {
        let mut sub = match (&self.on, &self.relation) {
            (_, Some(rel)) => Subscription::on(types::RELATION_CREATED).when(&format!("payload.type = '{rel}'"))?,
            (Some(on), None) => Subscription::on(on.clone()),
            (None, None) => Subscription::on(""),
        };
        if let Some(w) = &self.when {
            sub = sub.when(w)?;
        }
        if let Some(p) = &self.pattern {
            sub = sub.matching(p)?;
        }
        Ok(sub)
    }
}

/// The pack file: vocabularies, behaviors in registration order, tools,
/// the demo goal and the default budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub object_types: Vec<String>,
    pub relation_types: Vec<String>,
    #[serde(default)]
    pub event_types: Vec<String>,
    pub tools: Vec<String>,
    pub fixtures: String,
    pub corpus: String,
    #[serde(default)]
    pub budget: Map<String, Value>,
    pub goal: Value,
    pub behaviors: Vec<BehaviorSpec>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Defaults overlaid with the manifest's caps.
    pub fn budget(&self) -> Result<Budget, BudgetError> {
        let mut b = Budget::default();
        for (k, v) in &self.budget {
            b.set(k, v)?;
        }
        b.validate()?;
        Ok(b)
    }

    /// Object and relation types named by behavior patterns that the
    /// manifest does not declare.
    pub fn undeclared_pattern_types(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.behaviors {
            let Ok(sub) = b.subscription() else { continue };
            let Some(p) = &sub.pattern else { continue };
            for n in &p.nodes {
                if let Some(k) = &n.kind {
                    if !self.object_types.contains(k) {
                        out.push(k.clone());
                    }
                }
            }
            for e in &p.edges {
                if !self.relation_types.contains(&e.rel) {
                    out.push(e.rel.clone());
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}
