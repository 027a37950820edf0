//! Generators and oracles shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use loggraph_core::behavior::{Behavior, FireError, Subscription};
use loggraph_core::effects::{model_key, Message, ModelRequest, Provider, ProviderError, ProviderResponse};
use loggraph_core::event::{actors, types, EventId};
use loggraph_core::graph::{project, Graph, GraphObject, ObjectId, PatchOp};
use loggraph_core::pattern::{match_pattern, EdgePattern, Literal, NodePattern, Pattern, Predicate, Test};
use loggraph_core::log::{EventLog, SimulatedClock};
use loggraph_core::replay::StructuralDiff;
use loggraph_core::runtime::{PackSchema, RunOptions, RunOutcome, Runtime, Step};

pub const OBJECT_TYPES: &[&str] = &["alpha", "beta", "gamma"];
pub const RELATION_TYPES: &[&str] = &["links", "owns"];
pub const KEYS: &[&str] = &["n", "label", "flag"];

/// One step of a generated log; indices wrap around the objects that
/// exist at that point.
#[derive(Debug, Clone)]
pub enum Op {
    Create { kind: usize, n: i64, label: Option<usize> },
    Relate { from: usize, to: usize, kind: usize },
    Patch { target: usize, key: usize, value: Option<i64> },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..OBJECT_TYPES.len(), -3i64..4, proptest::option::of(0..3usize))
            .prop_map(|(kind, n, label)| Op::Create { kind, n, label }),
        2 => (any::<usize>(), any::<usize>(), 0..RELATION_TYPES.len())
            .prop_map(|(from, to, kind)| Op::Relate { from, to, kind }),
        2 => (any::<usize>(), 0..KEYS.len(), proptest::option::of(-3i64..4))
            .prop_map(|(target, key, value)| Op::Patch { target, key, value }),
    ]
}

pub fn schema() -> PackSchema {
    PackSchema {
        name: "generated".into(),
        version: "0".into(),
        object_types: OBJECT_TYPES.iter().map(|s| s.to_string()).collect(),
        relation_types: RELATION_TYPES.iter().map(|s| s.to_string()).collect(),
        event_types: Vec::new(),
    }
}

/// A well-formed log: start, pack, then the ops that apply (an op with no
/// object to refer to is skipped).
pub fn log_from_ops(ops: &[Op]) -> EventLog {
    let mut clock = SimulatedClock::default();
    let mut log = EventLog::new("gen");
    log.append(types::RUN_STARTED, json!({}), actors::SYSTEM, None, &mut clock).unwrap();
    let pack = serde_json::to_value(schema()).unwrap();
    log.append(types::PACK_LOADED, pack, actors::SYSTEM, Some(EventId::new("gen", 1)), &mut clock).unwrap();
    let mut objects: Vec<String> = Vec::new();
    let mut next = 0;
    for op in ops {
        let seq = log.len() as u64 + 1;
        let cause = EventId::new("gen", seq - 1);
        let provenance = json!({"behavior": "gen", "caused_by_event": cause});
        let (kind, payload) = match op {
            Op::Create { kind, n, label } => {
                let id = format!("o{next}");
                next += 1;
                let mut props = json!({"n": n});
                if let Some(l) = label {
                    props["label"] = json!(format!("l{l}"));
                }
                objects.push(id.clone());
                let payload = json!({"id": id, "type": OBJECT_TYPES[*kind], "properties": props, "provenance": provenance});
                (types::OBJECT_CREATED, payload)
            }
            Op::Relate { from, to, kind } => {
                if objects.is_empty() {
                    continue;
                }
                let id = format!("r{next}");
                next += 1;
                let payload = json!({
                    "id": id,
                    "type": RELATION_TYPES[*kind],
                    "from": objects[from % objects.len()],
                    "to": objects[to % objects.len()],
                    "properties": {},
                    "provenance": provenance,
                });
                (types::RELATION_CREATED, payload)
            }
            Op::Patch { target, key, value } => {
                if objects.is_empty() {
                    continue;
                }
                let op = match value {
                    Some(v) => PatchOp::set(&[KEYS[*key]], json!(v)),
                    None => PatchOp::remove(&[KEYS[*key]]),
                };
                let payload = json!({"target": objects[target % objects.len()], "ops": [op]});
                (types::OBJECT_PATCHED, payload)
            }
        };
        log.append(kind, payload, "gen", Some(cause), &mut clock).unwrap();
    }
    log.seal();
    log
}

/// Serves `{count}` responses derived from the request key and a salt, so
/// two providers with different salts disagree on most requests.
#[derive(Debug, Default)]
pub struct HashProvider {
    pub salt: u8,
    pub calls: u64,
}

impl HashProvider {
    pub fn new(salt: u8) -> HashProvider {
        HashProvider { salt, calls: 0 }
    }
}

impl Provider for HashProvider {
    fn call(&mut self, request: &ModelRequest) -> Result<ProviderResponse, ProviderError> {
        self.calls += 1;
        let key = model_key(request).map_err(|e| ProviderError::Other(e.to_string()))?;
        let byte = u8::from_str_radix(&key.as_str()[..2], 16).unwrap();
        Ok(ProviderResponse { response: json!({"count": (byte ^ self.salt) % 3}), cost: 0.0 })
    }

    fn invocations(&self) -> u64 {
        self.calls
    }
}

fn n_of(value: &Value) -> i64 {
    value.pointer("/properties/n").and_then(Value::as_i64).unwrap_or(0)
}

/// A small random pack over the generated vocabulary:
/// `expand` asks the model how many children an alpha gets,
/// `score` runs a tool on each beta and patches the result,
/// `tally` patches a parent whenever it gains an `owns` edge.
pub fn random_pack(seed: u64) -> Runtime {
    let mut rng = StdRng::seed_from_u64(seed);
    let max_depth = rng.random_range(1..=3);
    let beta_every = rng.random_range(1..=3);
    let modulus = rng.random_range(5..50);
    let mut rt = Runtime::with_schema(schema());
    let expand = Behavior::configured(
        "expand",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'alpha'").unwrap(),
        json!({"max_depth": max_depth, "beta_every": beta_every}),
        |event, ctx| {
            let depth = event.payload.pointer("/properties/depth").and_then(Value::as_i64).unwrap_or(0);
            let (max_depth, beta_every) = (ctx.config()["max_depth"].as_i64().unwrap(), ctx.config()["beta_every"].as_i64().unwrap());
            if depth >= max_depth {
                return Ok(());
            }
            let n = n_of(&event.payload);
            let req = ModelRequest::new("hash", "expand").message(Message::user(format!("expand {n} at {depth}")));
            let count = ctx.call_model(&req)?["count"].as_i64().unwrap_or(0);
            let parent = ObjectId::from(event.payload["id"].as_str().unwrap());
            for i in 0..count {
                let child_n = n * 3 + i;
                let kind = if child_n % beta_every == 0 { "beta" } else { "alpha" };
                let child = ctx.create_object(kind, json!({"n": child_n, "depth": depth + 1}))?;
                ctx.create_relation("owns", &parent, &child, json!({"i": i}))?;
            }
            Ok(())
        },
    );
    let score = Behavior::configured(
        "score",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'beta'").unwrap(),
        json!({}),
        |event, ctx| {
            let n = n_of(&event.payload);
            let result = ctx.call_tool("square_mod", json!({"n": n}))?;
            let id = ObjectId::from(event.payload["id"].as_str().unwrap());
            ctx.patch_object(&id, vec![PatchOp::set(&["score"], result)])
        },
    );
    let tally = Behavior::relation("tally", "owns", Some("MATCH (p)-[:owns]->(c)"), Value::Null, |event, ctx| {
        let parent = ObjectId::from(event.payload["from"].as_str().unwrap());
        let child = event.payload["to"].as_str().unwrap().to_string();
        ctx.patch_object(&parent, vec![PatchOp::set(&["last_child"], json!(child))])
    })
    .unwrap();
    let mut behaviors = vec![expand, score, tally];
    if rng.random_bool(0.5) {
        behaviors.swap(1, 2);
    }
    for b in behaviors {
        rt.register(b).unwrap();
    }
    rt.register_tool("square_mod", move |args: &Value| -> Result<Value, String> {
        let n = args["n"].as_i64().ok_or("n must be an integer")?;
        Ok(json!((n * n).rem_euclid(modulus)))
    });
    rt
}

pub fn random_script(seed: u64) -> Vec<Step> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let roots = rng.random_range(1..=2);
    Step::script((0..roots).map(|i| Step::user_object("alpha", json!({"n": i + 1, "depth": 0}))))
}

pub fn run_random(seed: u64, salt: u8) -> (Runtime, RunOutcome) {
    let rt = random_pack(seed);
    let mut provider = HashProvider::new(salt);
    let out = rt.execute(format!("p{seed}"), &random_script(seed), &mut provider, RunOptions::default()).unwrap();
    (rt, out)
}

/// The brute-force view of a diff: plain id sets over the two exported
/// graphs plus per-key property differences of shared objects.
#[derive(Debug, PartialEq, Eq)]
pub struct OracleDiff {
    pub objects_only_a: BTreeSet<String>,
    pub objects_only_b: BTreeSet<String>,
    pub relations_only_a: BTreeSet<String>,
    pub relations_only_b: BTreeSet<String>,
    pub changed: BTreeSet<(String, String, String, String)>,
}

fn by_id(export: &Value, section: &str) -> BTreeMap<String, Value> {
    export[section]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| (o["id"].as_str().unwrap().to_string(), o.clone()))
        .collect()
}

pub fn oracle_diff(a: &EventLog, b: &EventLog) -> OracleDiff {
    let (ea, eb) = (project(a).unwrap().export(), project(b).unwrap().export());
    let (oa, ob) = (by_id(&ea, "objects"), by_id(&eb, "objects"));
    let (ra, rb) = (by_id(&ea, "relations"), by_id(&eb, "relations"));
    let only = |x: &BTreeMap<String, Value>, y: &BTreeMap<String, Value>| {
        x.keys().filter(|k| !y.contains_key(*k)).cloned().collect::<BTreeSet<_>>()
    };
    let mut changed = BTreeSet::new();
    for (id, x) in &oa {
        let Some(y) = ob.get(id) else { continue };
        let (px, py) = (x["properties"].as_object().unwrap(), y["properties"].as_object().unwrap());
        for k in px.keys().chain(py.keys()) {
            let (vx, vy) = (px.get(k).cloned().unwrap_or(Value::Null), py.get(k).cloned().unwrap_or(Value::Null));
            if vx != vy {
                changed.insert((id.clone(), k.clone(), vx.to_string(), vy.to_string()));
            }
        }
    }
    OracleDiff {
        objects_only_a: only(&oa, &ob),
        objects_only_b: only(&ob, &oa),
        relations_only_a: only(&ra, &rb),
        relations_only_b: only(&rb, &ra),
        changed,
    }
}

/// The same shape, read off a computed diff.
pub fn as_oracle(d: &StructuralDiff) -> OracleDiff {
    let ids = |it: Vec<&ObjectId>| it.into_iter().map(|i| i.as_str().to_string()).collect::<BTreeSet<_>>();
    OracleDiff {
        objects_only_a: ids(d.objects_only_in_a.iter().map(|o| &o.id).collect()),
        objects_only_b: ids(d.objects_only_in_b.iter().map(|o| &o.id).collect()),
        relations_only_a: ids(d.relations_only_in_a.iter().map(|r| &r.id).collect()),
        relations_only_b: ids(d.relations_only_in_b.iter().map(|r| &r.id).collect()),
        changed: d
            .changed_objects
            .iter()
            .flat_map(|c| {
                c.properties.iter().map(|(k, a, b)| (c.id.as_str().to_string(), k.clone(), a.to_string(), b.to_string()))
            })
            .collect(),
    }
}

/// Creates a `tick` per `tick` until the budget stops it.
pub fn ticker() -> Runtime {
    let mut rt = Runtime::with_schema(PackSchema {
        name: "ticker".into(),
        version: "0".into(),
        object_types: vec!["tick".into()],
        relation_types: vec![],
        event_types: vec![],
    });
    rt.register(Behavior::function(
        "again",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'tick'").unwrap(),
        |event, ctx| {
            let n = n_of(&event.payload);
            ctx.create_object("tick", json!({"n": n + 1}))?;
            Ok(())
        },
    ))
    .unwrap();
    rt
}

pub fn ticker_script() -> Vec<Step> {
    Step::script([Step::user_object("tick", json!({"n": 0}))])
}

static CLOCK_READS: AtomicU64 = AtomicU64::new(0);

/// `stamp` embeds a wall-clock reading (and a process-wide counter, so two
/// readings never agree) into every `note` it creates for an `entry`.
/// `echo` is deterministic and fires first.
pub fn clock_reader() -> Runtime {
    let mut rt = Runtime::with_schema(PackSchema {
        name: "clock".into(),
        version: "0".into(),
        object_types: vec!["entry".into(), "note".into(), "copy".into()],
        relation_types: vec![],
        event_types: vec![],
    });
    rt.register(Behavior::function(
        "echo",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'entry'").unwrap(),
        |event, ctx| {
            ctx.create_object("copy", json!({"of": event.payload["id"]}))?;
            Ok(())
        },
    ))
    .unwrap();
    rt.register(Behavior::function(
        "stamp",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'entry'").unwrap(),
        |_event, ctx| -> Result<(), FireError> {
            let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos() as u64;
            let reading = format!("{now}-{}", CLOCK_READS.fetch_add(1, Ordering::SeqCst));
            ctx.create_object("note", json!({"seen_at": reading}))?;
            Ok(())
        },
    ))
    .unwrap();
    rt
}

/// Ops that build at most twelve objects.
pub fn small_graph_ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(op(), 0..24)
        .prop_filter("at most twelve objects", |ops| ops.iter().filter(|o| matches!(o, Op::Create { .. })).count() <= 12)
}

const VARS: &[&str] = &["a", "b", "c"];

pub fn literal() -> impl Strategy<Value = Literal> {
    prop_oneof![
        (-3i64..4).prop_map(|n| Literal::Number(n.into())),
        (0..3usize).prop_map(|l| Literal::Str(format!("l{l}"))),
        Just(Literal::Str("it's".into())),
        any::<bool>().prop_map(Literal::Bool),
    ]
}

pub fn test() -> impl Strategy<Value = Test> {
    prop_oneof![
        literal().prop_map(Test::Eq),
        literal().prop_map(Test::Ne),
        Just(Test::Exists),
        Just(Test::Missing),
    ]
}

pub fn pattern() -> impl Strategy<Value = Pattern> {
    (1..=VARS.len())
        .prop_flat_map(|n| {
            let nodes = proptest::collection::vec(proptest::option::of(0..OBJECT_TYPES.len()), n);
            let edges = proptest::collection::vec((0..n, 0..RELATION_TYPES.len(), 0..n), 0..=3);
            let preds = proptest::collection::vec((0..n, 0..2usize, test()), 0..=2);
            (nodes, edges, preds, 0..n)
        })
        .prop_map(|(kinds, edges, preds, anchor)| Pattern {
            nodes: kinds
                .iter()
                .enumerate()
                .map(|(i, k)| NodePattern { var: VARS[i].into(), kind: k.map(|k| OBJECT_TYPES[k].to_string()) })
                .collect(),
            edges: edges
                .into_iter()
                .map(|(f, r, t)| EdgePattern { from: VARS[f].into(), rel: RELATION_TYPES[r].into(), to: VARS[t].into() })
                .collect(),
            predicates: preds
                .into_iter()
                .map(|(v, k, test)| Predicate { var: VARS[v].into(), path: vec![["n", "label"][k].into()], test })
                .collect(),
            anchor: VARS[anchor].into(),
        })
}

/// Every assignment of objects to variables, filtered by the pattern's
/// rules read off its definition.
pub fn brute_force(graph: &Graph, p: &Pattern, anchor: &str) -> Vec<Vec<String>> {
    let objects: Vec<&GraphObject> = graph.objects().collect();
    let k = p.nodes.len();
    let mut out = Vec::new();
    let mut idx = vec![0usize; k];
    if objects.is_empty() {
        return out;
    }
    loop {
        let pick: BTreeMap<&str, &GraphObject> = p.nodes.iter().zip(&idx).map(|(n, &i)| (n.var.as_str(), objects[i])).collect();
        let ok = pick[p.anchor.as_str()].id.as_str() == anchor
            && p.nodes.iter().all(|n| n.kind.as_ref().is_none_or(|t| &pick[n.var.as_str()].kind == t))
            && p.edges.iter().all(|e| {
                graph.relations().any(|r| r.kind == e.rel && r.from == pick[e.from.as_str()].id && r.to == pick[e.to.as_str()].id)
            })
            && p.predicates.iter().all(|pr| pr.holds(&pick[pr.var.as_str()].properties));
        if ok {
            out.push(idx.iter().map(|&i| objects[i].id.as_str().to_string()).collect());
        }
        let mut d = k;
        loop {
            if d == 0 {
                out.sort();
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < objects.len() {
                break;
            }
            idx[d] = 0;
        }
    }
}


/// Matcher output as id tuples in variable order.
pub fn matches_of(graph: &Graph, p: &Pattern, anchor: &ObjectId) -> Vec<Vec<String>> {
    match_pattern(graph, p, anchor).iter().map(|b| b.ids().iter().map(|id| id.as_str().to_string()).collect()).collect()
}
