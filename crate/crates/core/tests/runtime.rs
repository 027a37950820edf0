mod common;

use common::{run_random, ticker, ticker_script, HashProvider};
use loggraph_core::behavior::{Behavior, FireError, Subscription};
use loggraph_core::budget::{Budget, Dimension};
use loggraph_core::effects::NoProvider;
use loggraph_core::event::types;
use loggraph_core::log::{EventLog, SimulatedClock};
use loggraph_core::runtime::{PackSchema, RunOptions, RunStatus, Runtime, Step};
use proptest::prelude::*;
use serde_json::json;

fn schema(objects: &[&str]) -> PackSchema {
    PackSchema {
        name: "t".into(),
        version: "0".into(),
        object_types: objects.iter().map(|s| s.to_string()).collect(),
        relation_types: vec![],
        event_types: vec![],
    }
}

fn spawner(name: &str, on: &str, makes: &str) -> Behavior {
    let makes = makes.to_string();
    Behavior::function(
        name,
        Subscription::on(types::OBJECT_CREATED).when(&format!("payload.type = '{on}'")).unwrap(),
        move |_e, ctx| {
            ctx.create_object(&makes, json!({}))?;
            Ok(())
        },
    )
}

fn started_order(log: &EventLog) -> Vec<String> {
    log.events().iter().filter(|e| e.kind == types::BEHAVIOR_STARTED).map(|e| e.actor.clone()).collect()
}

fn roomy() -> RunOptions {
    let mut budget = Budget::default();
    budget.max_depth = 100_000;
    budget.max_behavior_calls = 100_000;
    RunOptions { budget, ..RunOptions::default() }
}

#[test]
fn dispatch_is_depth_first_in_registration_order() {
    let mut rt = Runtime::with_schema(schema(&["entry", "child", "other", "leaf", "end"]));
    rt.register(spawner("first", "entry", "child")).unwrap();
    rt.register(spawner("second", "entry", "other")).unwrap();
    rt.register(spawner("third", "child", "leaf")).unwrap();
    rt.register(spawner("fourth", "leaf", "end")).unwrap();
    rt.register(spawner("fifth", "other", "end")).unwrap();
    let script = Step::script([Step::user_object("entry", json!({}))]);
    let out = rt.execute("d", &script, &mut NoProvider::default(), RunOptions::default()).unwrap();
    // Breadth-first would run fifth before fourth.
    assert_eq!(started_order(&out.log), ["first", "second", "third", "fourth", "fifth"]);
    let kinds: Vec<&str> = out.log.events().iter().map(|e| e.kind.as_str()).collect();
    assert_eq!(kinds.first(), Some(&types::RUN_STARTED));
    assert_eq!(kinds.last(), Some(&types::RUN_FINISHED));
    assert_eq!(out.report.objects, 6);
}

#[test]
fn a_failing_behavior_does_not_stop_the_run() {
    let mut rt = Runtime::with_schema(schema(&["entry", "partial", "done"]));
    rt.register(Behavior::function(
        "flaky",
        Subscription::on(types::OBJECT_CREATED).when("payload.type = 'entry'").unwrap(),
        |_e, ctx| {
            ctx.create_object("partial", json!({}))?;
            Err(FireError::failed("gave up"))
        },
    ))
    .unwrap();
    rt.register(spawner("steady", "entry", "done")).unwrap();
    let script = Step::script([Step::user_object("entry", json!({}))]);
    let out = rt.execute("f", &script, &mut NoProvider::default(), RunOptions::default()).unwrap();
    assert_eq!(out.report.status, RunStatus::Completed);
    assert_eq!(out.report.behavior_failures, 1);
    let failed: Vec<_> = out.log.events().iter().filter(|e| e.kind == types::BEHAVIOR_FAILED).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].payload, json!({"behavior": "flaky", "error": "gave up"}));
    // Effects made before the failure stay in the log.
    assert_eq!(out.graph.objects_of_type("partial").count(), 1);
    assert_eq!(out.graph.objects_of_type("done").count(), 1);
}

#[test]
fn duplicate_behavior_names_are_refused() {
    let mut rt = Runtime::with_schema(schema(&["entry"]));
    rt.register(spawner("x", "entry", "entry")).unwrap();
    assert!(rt.register(spawner("x", "entry", "entry")).is_err());
}

#[test]
fn undeclared_object_type_fails_the_behavior() {
    let mut rt = Runtime::with_schema(schema(&["entry"]));
    rt.register(spawner("typo", "entry", "entri")).unwrap();
    let script = Step::script([Step::user_object("entry", json!({}))]);
    let out = rt.execute("u", &script, &mut NoProvider::default(), RunOptions::default()).unwrap();
    assert_eq!(out.report.behavior_failures, 1);
    assert_eq!(out.report.objects, 1);
}

#[test]
fn simulated_clock_is_regular() {
    let (_, out) = run_random(1, 0);
    let start = SimulatedClock::DEFAULT_START;
    for e in out.log.events() {
        assert_eq!(e.timestamp.as_micros(), start + (e.seq() as i64 - 1) * SimulatedClock::DEFAULT_STEP);
    }
}

#[test]
fn live_runs_are_reproducible() {
    for seed in 0..10 {
        let (a, b) = (run_random(seed, 4).1, run_random(seed, 4).1);
        assert_eq!(a.log.to_bytes(), b.log.to_bytes(), "seed {seed}");
    }
}

#[test]
fn model_calls_reach_the_provider_once_each() {
    let (rt, _) = run_random(5, 1);
    let mut provider = HashProvider::new(1);
    let out = rt.execute("m", &common::random_script(5), &mut provider, RunOptions::default()).unwrap();
    assert_eq!(out.report.provider_invocations, provider.calls);
    assert_eq!(out.report.model_calls, out.log.events().iter().filter(|e| e.kind == types::LLM_REQUESTED).count() as u64);
}

#[test]
fn behavior_call_cap_halts() {
    let mut opts = roomy();
    opts.budget.max_behavior_calls = 3;
    let out = ticker().execute("b", &ticker_script(), &mut NoProvider::default(), opts).unwrap();
    let halted = out.report.halted().expect("halted");
    assert_eq!(halted.dimension, Dimension::BehaviorCalls);
    assert_eq!(started_order(&out.log).len(), 3);
    assert_eq!(out.log.last().unwrap().kind, types::BUDGET_EXCEEDED);
}

#[test]
fn depth_cap_halts_a_runaway_chain() {
    let mut opts = roomy();
    opts.budget.max_depth = 12;
    let out = ticker().execute("d", &ticker_script(), &mut NoProvider::default(), opts).unwrap();
    assert_eq!(out.report.halted().unwrap().dimension, Dimension::Depth);
}

#[test]
fn model_call_cap_halts() {
    let seed = (0..50).find(|&s| run_random(s, 0).1.report.model_calls > 1).expect("some pack calls twice");
    let (rt, _) = run_random(seed, 0);
    let mut opts = RunOptions::default();
    opts.budget.max_model_calls = 1;
    let out = rt.execute("mc", &common::random_script(seed), &mut HashProvider::new(0), opts).unwrap();
    assert_eq!(out.report.halted().unwrap().dimension, Dimension::ModelCalls);
    assert_eq!(out.report.model_calls, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // The log of a runaway run holds exactly the cap, ending in the halt.
    #[test]
    fn event_cap_is_exact(cap in 4u64..300) {
        let mut opts = roomy();
        opts.budget.max_events = cap;
        let out = ticker().execute("cap", &ticker_script(), &mut NoProvider::default(), opts).unwrap();
        prop_assert_eq!(out.log.len() as u64, cap);
        let last = out.log.last().unwrap();
        prop_assert_eq!(&last.kind, types::BUDGET_EXCEEDED);
        prop_assert_eq!(&last.payload["dimension"], "events");
        prop_assert!(out.log.events().iter().all(|e| e.kind != types::RUN_FINISHED));
        let halted = out.report.halted().unwrap();
        prop_assert_eq!(halted.dimension, Dimension::Events);
        let reloaded = EventLog::from_bytes(&out.log.to_bytes()).unwrap();
        prop_assert_eq!(reloaded.len() as u64, cap);
    }
}
