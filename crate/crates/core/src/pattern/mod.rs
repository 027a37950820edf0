//! Graph-shape patterns: a small Cypher-like subset used by subscriptions.
//!
//! ```text
//! pattern   := MATCH path ("," path)* [WHERE cond (AND cond)*] [ANCHOR var]
//! path      := node ("-[:" Rel "]->" node)*
//! node      := "(" var [":" Type] ")"
//! cond      := var "." key ("." key)* ("=" | "!=") literal
//!            | exists "(" var "." key ("." key)* ")"
//!            | missing "(" var "." key ("." key)* ")"
//! literal   := 'single quoted' | number | true | false
//! ```
//!
//! Keywords are case-insensitive. The anchor defaults to the first variable.
//! Variables may bind the same object more than once; edges require a
//! relation of the given type from the first binding to the second.

mod matcher;
mod parser;

use std::fmt;

use serde_json::{Map, Number, Value};

use crate::canonical;
use crate::graph::lookup_path;

pub use matcher::{match_pattern, Binding};
pub use parser::{parse_conditions, parse_pattern, ParseError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePattern {
    pub var: String,
    pub kind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePattern {
    pub from: String,
    pub rel: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Number(Number),
    Bool(bool),
}

impl Literal {
    fn to_value(&self) -> Value {
        match self {
            Literal::Str(s) => Value::String(s.clone()),
            Literal::Number(n) => canonical::normalize(&Value::Number(n.clone())),
            Literal::Bool(b) => Value::Bool(*b),
        }
    }

    pub fn matches(&self, v: &Value) -> bool {
        self.to_value() == canonical::normalize(v)
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Number(_) => f.write_str(canonical::canonicalize(&self.to_value()).as_str()),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Test {
    Eq(Literal),
    /// Holds when the key is present and differs from the literal.
    Ne(Literal),
    Exists,
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub var: String,
    pub path: Vec<String>,
    pub test: Test,
}

impl Predicate {
    pub fn holds(&self, properties: &Map<String, Value>) -> bool {
        let found = lookup_path(properties, &self.path);
        match &self.test {
            Test::Eq(lit) => found.is_some_and(|v| lit.matches(v)),
            Test::Ne(lit) => found.is_some_and(|v| !lit.matches(v)),
            Test::Exists => found.is_some(),
            Test::Missing => found.is_none(),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let target = format!("{}.{}", self.var, self.path.join("."));
        match &self.test {
            Test::Eq(l) => write!(f, "{target} = {l}"),
            Test::Ne(l) => write!(f, "{target} != {l}"),
            Test::Exists => write!(f, "exists({target})"),
            Test::Missing => write!(f, "missing({target})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    /// Variables in order of first mention.
    pub nodes: Vec<NodePattern>,
    pub edges: Vec<EdgePattern>,
    pub predicates: Vec<Predicate>,
    pub anchor: String,
}

impl Pattern {
    pub fn node(&self, var: &str) -> Option<&NodePattern> {
        self.nodes.iter().find(|n| n.var == var)
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.var.as_str())
    }
}

impl std::str::FromStr for Pattern {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pattern(s)
    }
}

/// Prints every node on its own (to keep variable order), then each edge,
/// so that the output reparses to an equal pattern.
impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MATCH ")?;
        let mut atoms: Vec<String> = self
            .nodes
            .iter()
            .map(|n| match &n.kind {
                Some(k) => format!("({}:{})", n.var, k),
                None => format!("({})", n.var),
            })
            .collect();
        atoms.extend(self.edges.iter().map(|e| format!("({})-[:{}]->({})", e.from, e.rel, e.to)));
        f.write_str(&atoms.join(", "))?;
        if !self.predicates.is_empty() {
            let conds: Vec<String> = self.predicates.iter().map(|p| p.to_string()).collect();
            write!(f, " WHERE {}", conds.join(" AND "))?;
        }
        write!(f, " ANCHOR {}", self.anchor)
    }
}
