//! Bodies of the diligence behaviors. The manifest supplies names,
//! subscriptions and prompts; these functions supply the logic, and none
//! of them knows about the others.

use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::manifest::BehaviorSpec;
use crate::behavior::{Behavior, FireError, Handle, LlmConfig, Prepare, SubscriptionError, Vars};
use crate::event::Event;
use crate::graph::{Graph, ObjectId, PatchOp};
use crate::runtime::Context;

fn text<'g>(graph: &'g Graph, id: &ObjectId, key: &str) -> Option<&'g str> {
    graph.object(id)?.properties.get(key)?.as_str()
}

fn created_id(event: &Event) -> Result<ObjectId, FireError> {
    event.payload.get("id").and_then(Value::as_str).map(ObjectId::from).ok_or_else(|| FireError::failed("event has no object id"))
}

fn property<'e>(event: &'e Event, key: &str) -> &'e Value {
    event.payload.pointer(&format!("/properties/{key}")).unwrap_or(&Value::Null)
}

fn vars(pairs: &[(&str, Value)]) -> Vars {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<Map<_, _>>()
}

fn array<'v>(response: &'v Value, key: &str) -> Result<&'v Vec<Value>, FireError> {
    response.get(key).and_then(Value::as_array).ok_or_else(|| FireError::failed(format!("response has no {key:?} list")))
}

fn field(item: &Value, key: &str) -> Value {
    item.get(key).cloned().unwrap_or(Value::Null)
}

/// Claims about a company's questions, in id order.
fn company_claims(graph: &Graph, company: &ObjectId) -> Vec<ObjectId> {
    graph
        .objects_of_type("claim")
        .filter(|c| c.properties.get("company").and_then(Value::as_str) == Some(company.as_str()))
        .map(|c| c.id.clone())
        .collect()
}

fn findings(graph: &Graph, claims: &[ObjectId]) -> String {
    claims.iter().map(|c| format!("- {}", text(graph, c, "text").unwrap_or_default())).collect::<Vec<_>>().join("\n")
}

fn planner() -> (Prepare, Handle) {
    let prepare: Prepare = Arc::new(|event, _ctx| Ok(Some(vars(&[("goal", property(event, "text").clone())]))));
    let handle: Handle = Arc::new(|_event, ctx, _vars, response| {
        for company in array(&response, "companies")? {
            ctx.create_object("company", json!({"name": field(company, "name"), "sector": field(company, "sector")}))?;
        }
        Ok(())
    });
    (prepare, handle)
}

fn question_generator() -> (Prepare, Handle) {
    let prepare: Prepare = Arc::new(|event, _ctx| {
        Ok(Some(vars(&[("company", property(event, "name").clone()), ("sector", property(event, "sector").clone())])))
    });
    let handle: Handle = Arc::new(|event, ctx, vars, response| {
        let company = created_id(event)?;
        for q in array(&response, "questions")? {
            ctx.create_object(
                "question",
                json!({
                    "text": field(q, "text"),
                    "topic": field(q, "topic"),
                    "company": company.as_str(),
                    "company_name": vars["company"],
                    "status": "open",
                }),
            )?;
        }
        Ok(())
    });
    (prepare, handle)
}

fn document_object(graph: &Graph, doc_id: &str) -> Option<ObjectId> {
    graph
        .objects_of_type("document")
        .find(|d| d.properties.get("doc_id").and_then(Value::as_str) == Some(doc_id))
        .map(|d| d.id.clone())
}

/// Searches the company's documents, fetches the best hits into the graph
/// and asks the model for claims quoting them.
fn document_researcher() -> (Prepare, Handle) {
    let prepare: Prepare = Arc::new(|event, ctx: &mut Context<'_>| {
        let question = property(event, "text").clone();
        let company = property(event, "company_name").clone();
        let limit = ctx.config().get("search_limit").and_then(Value::as_u64).unwrap_or(2);
        let found = ctx.call_tool("document_store.search", json!({"query": question, "company": company, "limit": limit}))?;
        let mut documents = Vec::new();
        for hit in array(&found, "results")? {
            let id = field(hit, "id");
            let doc = ctx.call_tool("document_store.fetch", json!({ "id": id }))?;
            let doc_id = doc.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
            if document_object(ctx.graph(), &doc_id).is_none() {
                ctx.create_object(
                    "document",
                    json!({"doc_id": doc_id, "title": field(&doc, "title"), "company": field(&doc, "company")}),
                )?;
            }
            documents.push(format!("[{}] {}\n{}", doc_id, field(&doc, "title").as_str().unwrap_or_default(), field(&doc, "text").as_str().unwrap_or_default()));
        }
        Ok(Some(vars(&[("question", question), ("company", company), ("documents", json!(documents.join("\n\n")))])))
    });
    let handle: Handle = Arc::new(|event, ctx, _vars, response| {
        let question = created_id(event)?;
        let company = property(event, "company").clone();
        for item in array(&response, "claims")? {
            let doc_id = item.get("document").and_then(Value::as_str).unwrap_or_default();
            let document = document_object(ctx.graph(), doc_id)
                .ok_or_else(|| FireError::failed(format!("claim cites document {doc_id:?}, which was not retrieved")))?;
            let mut props = json!({
                "text": field(item, "text"),
                "question": question.as_str(),
                "company": company,
                "document": doc_id,
            });
            if let Some(v) = item.get("value").filter(|v| !v.is_null()) {
                props["value"] = v.clone();
            }
            let claim = ctx.create_object("claim", props)?;
            ctx.create_relation("addresses", &claim, &question, Value::Null)?;
            ctx.create_relation("derived_from", &claim, &document, Value::Null)?;
            let evidence = ctx.create_object("evidence", json!({"quote": field(item, "quote"), "document": doc_id}))?;
            ctx.create_relation("supports", &evidence, &claim, Value::Null)?;
        }
        ctx.patch_object(&question, vec![PatchOp::set(&["status"], json!("answered"))])
    });
    (prepare, handle)
}

/// Two claims addressing one question with different values of the
/// configured property yield one contradiction.
fn contradiction_detector(_event: &Event, ctx: &mut Context<'_>) -> Result<(), FireError> {
    let prop = ctx.config().get("property").and_then(Value::as_str).unwrap_or("value").to_string();
    for binding in ctx.bindings().to_vec() {
        let (Some(a), Some(b), Some(q)) = (binding.get("a"), binding.get("b"), binding.get("q")) else { continue };
        if a == b {
            continue;
        }
        let graph = ctx.graph();
        let value = |id: &ObjectId| graph.object(id).and_then(|o| o.properties.get(&prop)).cloned();
        let (Some(va), Some(vb)) = (value(a), value(b)) else { continue };
        if va == vb {
            continue;
        }
        let known = graph
            .incoming(a)
            .any(|r| r.kind == "contradicts" && graph.has_edge(&r.from, "contradicts", b));
        if known {
            continue;
        }
        let (a, b, q) = (a.clone(), b.clone(), q.clone());
        let c = ctx.create_object(
            "contradiction",
            json!({
                "question": q.as_str(),
                "property": prop,
                "claims": [b.as_str(), a.as_str()],
                "values": [vb, va],
            }),
        )?;
        ctx.create_relation("contradicts", &c, &b, Value::Null)?;
        ctx.create_relation("contradicts", &c, &a, Value::Null)?;
    }
    Ok(())
}

/// Fires once per company, after its last question is answered.
fn risk_identifier() -> (Prepare, Handle) {
    let prepare: Prepare = Arc::new(|event, ctx: &mut Context<'_>| {
        let graph = ctx.graph();
        let Some(target) = event.payload.get("target").and_then(Value::as_str).map(ObjectId::from) else {
            return Ok(None);
        };
        let Some(question) = graph.object(&target).filter(|o| o.kind == "question") else { return Ok(None) };
        let Some(company) = question.properties.get("company").and_then(Value::as_str).map(ObjectId::from) else {
            return Ok(None);
        };
        let of_company = |kind: &'static str| {
            graph.objects_of_type(kind).filter(|o| o.properties.get("company").and_then(Value::as_str) == Some(company.as_str()))
        };
        if of_company("risk").next().is_some() {
            return Ok(None);
        }
        if of_company("question").any(|q| q.properties.get("status").and_then(Value::as_str) != Some("answered")) {
            return Ok(None);
        }
        let claims = company_claims(graph, &company);
        let contradictions = graph
            .objects_of_type("contradiction")
            .filter(|c| {
                c.properties.get("question").and_then(Value::as_str).map(ObjectId::from).and_then(|q| text(graph, &q, "company").map(str::to_string))
                    == Some(company.as_str().to_string())
            })
            .count();
        Ok(Some(vars(&[
            ("company", json!(text(graph, &company, "name").unwrap_or_default())),
            ("company_id", json!(company.as_str())),
            ("findings", json!(findings(graph, &claims))),
            ("contradictions", json!(contradictions)),
        ])))
    });
    let handle: Handle = Arc::new(|_event, ctx, vars, response| {
        let company = ObjectId::from(vars["company_id"].as_str().unwrap_or_default());
        let risk = ctx.create_object(
            "risk",
            json!({
                "company": company.as_str(),
                "title": field(&response, "title"),
                "severity": field(&response, "severity"),
                "rationale": field(&response, "rationale"),
            }),
        )?;
        ctx.create_relation("concerns", &risk, &company, Value::Null)?;
        Ok(())
    });
    (prepare, handle)
}

/// Writes one memo per company once a risk concerns it.
fn memo_synthesizer(_event: &Event, ctx: &mut Context<'_>) -> Result<(), FireError> {
    let config = LlmConfig::from_value(ctx.config())?;
    for binding in ctx.bindings().to_vec() {
        let (Some(risk), Some(company)) = (binding.get("r"), binding.get("co")) else { continue };
        let graph = ctx.graph();
        if graph.incoming(company).any(|r| r.kind == "summarizes") {
            continue;
        }
        let claims = company_claims(graph, company);
        let request = config.render(&vars(&[
            ("company", json!(text(graph, company, "name").unwrap_or_default())),
            ("risk", json!(text(graph, risk, "title").unwrap_or_default())),
            ("findings", json!(findings(graph, &claims))),
        ]))?;
        let (risk, company) = (risk.clone(), company.clone());
        let response = ctx.call_model(&request)?;
        let memo = ctx.create_object(
            "memo",
            json!({
                "company": company.as_str(),
                "risk": risk.as_str(),
                "summary": field(&response, "summary"),
                "cites": claims.iter().map(ObjectId::as_str).collect::<Vec<_>>(),
            }),
        )?;
        ctx.create_relation("summarizes", &memo, &company, Value::Null)?;
    }
    Ok(())
}

/// Binds a manifest entry to its body; `None` for an unknown name.
pub(crate) fn behavior(spec: &BehaviorSpec) -> Option<Result<Behavior, SubscriptionError>> {
    let name = spec.name.as_str();
    let config = spec.config.clone();
    if let Some(rel) = &spec.relation {
        let body = match name {
            "memo_synthesizer" => memo_synthesizer,
            _ => return None,
        };
        return Some(Behavior::relation(name, rel, spec.pattern.as_deref(), config, body));
    }
    let llm = |(prepare, handle): (Prepare, Handle)| {
        spec.subscription().map(|sub| Behavior::llm_backed(name, sub, config.clone(), prepare, handle))
    };
    Some(match name {
        "planner" => llm(planner()),
        "question_generator" => llm(question_generator()),
        "document_researcher" => llm(document_researcher()),
        "risk_identifier" => llm(risk_identifier()),
        "contradiction_detector" => {
            spec.subscription().map(|sub| Behavior::configured(name, sub, config.clone(), contradiction_detector))
        }
        _ => return None,
    })
}
