use loggraph_core::effects::{model_key, tool_key, Message, ModelRequest, ToolDef};
use proptest::prelude::*;
use serde_json::json;

fn request() -> ModelRequest {
    ModelRequest::new("m-1", "You are terse.")
        .message(Message::user("Rate Pinecone Bio \u{2014} ok?"))
        .tool(ToolDef { name: "b".into(), description: "second".into(), parameters: json!({}) })
        .tool(ToolDef { name: "a".into(), description: "first".into(), parameters: json!({"type": "object"}) })
}

// Digests computed by an independent implementation: sha256 over
// sorted-key compact JSON.
#[test]
fn keys_match_an_independent_digest() {
    assert_eq!(model_key(&request()).unwrap().as_str(), "07450a66121830ba2d0a95bbc2fcec7cdb9a13a161e8826981a951822e134e6d");
    let args = json!({"query": "revenue", "limit": 2, "company": "Northwind Robotics"});
    assert_eq!(
        tool_key("document_store.search", &args).unwrap().as_str(),
        "60153abb48ca7d1e944511f0024611f34a5b9cc66bf37676b7b128ace6160aea"
    );
}

#[test]
fn integral_floats_hash_like_integers() {
    let a = tool_key("t", &json!({"limit": 2})).unwrap();
    let b = tool_key("t", &json!({"limit": 2.0})).unwrap();
    assert_eq!(a, b);
    assert!(tool_key("t", &json!({"limit": 2.5})).is_err());
}

#[test]
fn request_roundtrips_through_its_value() {
    let r = request();
    let back = ModelRequest::from_value(&r.to_value()).unwrap();
    assert_eq!(model_key(&back).unwrap(), model_key(&r).unwrap());
}

proptest! {
    // Tool declaration order and object key order never change the key.
    #[test]
    fn key_ignores_declaration_order(names in proptest::collection::btree_set("[a-z]{1,6}", 0..5), text in ".{0,40}") {
        let defs: Vec<ToolDef> = names.iter().map(|n| ToolDef { name: n.clone(), description: n.to_uppercase(), parameters: json!({"z": 1, "a": [n]}) }).collect();
        let build = |order: &mut dyn Iterator<Item = &ToolDef>| {
            order.fold(ModelRequest::new("m", "s").message(Message::user(text.clone())), |r, t| r.tool(t.clone()))
        };
        let forward = model_key(&build(&mut defs.iter())).unwrap();
        let backward = model_key(&build(&mut defs.iter().rev())).unwrap();
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn different_content_gives_different_keys(a in ".{0,30}", b in ".{0,30}") {
        prop_assume!(a != b);
        let ka = model_key(&ModelRequest::new("m", "s").message(Message::user(a))).unwrap();
        let kb = model_key(&ModelRequest::new("m", "s").message(Message::user(b))).unwrap();
        prop_assert_ne!(ka, kb);
    }
}
