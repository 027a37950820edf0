use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::effects::Tool;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub company: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DocumentError {
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("bad arguments: {0}")]
    BadArguments(String),
}

/// A static corpus with keyword search.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentStore {
    docs: Vec<Document>,
}

const STOPWORDS: &[&str] = &["the", "and", "for", "what", "how", "does", "has", "have", "its", "with", "from", "this", "that"];

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|t| t.len() > 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

impl DocumentStore {
    pub fn new(mut docs: Vec<Document>) -> DocumentStore {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        DocumentStore { docs }
    }

    pub fn parse(text: &str) -> Result<DocumentStore, serde_json::Error> {
        Ok(DocumentStore::new(serde_json::from_str(text)?))
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// Documents sharing the most query terms, best first, ties by id.
    pub fn search(&self, query: &str, company: Option<&str>, limit: usize) -> Vec<(&Document, usize)> {
        let wanted = tokens(query);
        let mut hits: Vec<(&Document, usize)> = self
            .docs
            .iter()
            .filter(|d| company.is_none_or(|c| d.company == c))
            .map(|d| {
                let have = tokens(&format!("{} {}", d.title, d.text));
                (d, wanted.intersection(&have).count())
            })
            .filter(|(_, score)| *score > 0)
            .collect();
        hits.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        hits.truncate(limit);
        hits
    }

    pub fn fetch(&self, id: &str) -> Result<&Document, DocumentError> {
        self.docs.iter().find(|d| d.id == id).ok_or_else(|| DocumentError::UnknownDocument(id.to_string()))
    }
}

/// `document_store.search`: `{query, company?, limit?}` to `{results: [{id, title, score}]}`.
pub struct SearchTool(pub DocumentStore);

impl Tool for SearchTool {
    fn call(&self, args: &Value) -> Result<Value, String> {
        let query = args
            .get("query")
            .and_then(Value::as_str)
            .ok_or_else(|| DocumentError::BadArguments("query must be a string".into()).to_string())?;
        let company = args.get("company").and_then(Value::as_str);
        let limit = args.get("limit").and_then(Value::as_u64).unwrap_or(3) as usize;
        let results: Vec<Value> = self
            .0
            .search(query, company, limit)
            .into_iter()
            .map(|(d, score)| json!({"id": d.id, "title": d.title, "score": score}))
            .collect();
        Ok(json!({ "results": results }))
    }
}

/// `document_store.fetch`: `{id}` to the full document.
pub struct FetchTool(pub DocumentStore);

impl Tool for FetchTool {
    fn call(&self, args: &Value) -> Result<Value, String> {
        let id = args
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| DocumentError::BadArguments("id must be a string".into()).to_string())?;
        let doc = self.0.fetch(id).map_err(|e| e.to_string())?;
        Ok(serde_json::to_value(doc).expect("document serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> DocumentStore {
        DocumentStore::parse(super::super::BUNDLED_CORPUS).unwrap()
    }

    #[test]
    fn revenue_query_finds_the_shareholder_letter() {
        let s = store();
        let hits = s.search("Northwind revenue", None, 3);
        assert_eq!(hits[0].0.id, "N-1");
        assert!(hits[0].0.text.contains("Q3 revenue grew 28% YoY to $42M"));
    }

    #[test]
    fn unknown_document_is_an_error() {
        let err = FetchTool(store()).call(&json!({"id": "X-9"})).unwrap_err();
        assert_eq!(err, "unknown document \"X-9\"");
    }

    #[test]
    fn search_is_repeatable() {
        let t = SearchTool(store());
        let args = json!({"query": "fleet utilization", "company": "Stellar Logistics"});
        assert_eq!(t.call(&args).unwrap(), t.call(&args).unwrap());
    }
}
