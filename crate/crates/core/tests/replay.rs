mod common;

use std::collections::BTreeSet;

use common::{as_oracle, clock_reader, oracle_diff, random_pack, run_random, HashProvider};
use loggraph_core::effects::NoProvider;
use loggraph_core::event::types;
use loggraph_core::graph::ObjectId;
use loggraph_core::log::EventLog;
use loggraph_core::replay::{
    fork, lineage, ownership, replay_permissive, replay_strict, structural_diff, DiffError, ForkSpec, LineageTarget,
};
use loggraph_core::runtime::{RunError, RunOptions, Runtime, Step};
use proptest::prelude::*;
use serde_json::json;

fn clock_record() -> (Runtime, EventLog) {
    let rt = clock_reader();
    let script = Step::script([Step::user_object("entry", json!({"k": 1})), Step::user_object("entry", json!({"k": 2}))]);
    let out = rt.execute("clock", &script, &mut NoProvider::default(), RunOptions::default()).unwrap();
    (rt, out.log)
}

/// The first event whose payload carries a clock reading.
fn first_clock_event(log: &EventLog) -> u64 {
    log.events().iter().find(|e| e.payload.pointer("/properties/seen_at").is_some()).unwrap().seq()
}

fn patch_ids(log: &EventLog) -> BTreeSet<String> {
    log.events().iter().filter(|e| e.kind == types::OBJECT_PATCHED).map(|e| e.id.to_string()).collect()
}

#[test]
fn strict_replay_reproduces_random_runs() {
    for seed in 0..12 {
        let (rt, out) = run_random(seed, 2);
        let replayed = replay_strict(&rt, &out.log).unwrap();
        assert_eq!(replayed.log.to_bytes(), out.log.to_bytes(), "seed {seed}");
        assert_eq!(replayed.report.provider_invocations, 0);
        assert_eq!(replayed.report.tool_executions, 0);
        assert_eq!(replayed.report.fresh_events, 0);
    }
}

#[test]
fn clock_reading_is_pinned_to_its_first_event() {
    let (rt, record) = clock_record();
    let expected = first_clock_event(&record);
    match replay_strict(&rt, &record) {
        Err(RunError::Diverged(d)) => {
            assert_eq!(d.seq, expected);
            assert_eq!(d.field_diffs.len(), 1);
            assert_eq!(d.field_diffs[0].field, "payload.properties");
        }
        other => panic!("expected a divergence, got {other:?}"),
    }
}

#[test]
fn strict_replay_needs_every_behavior() {
    let (_, out) = run_random(4, 0);
    let mut rt = Runtime::with_schema(common::schema());
    for b in random_pack(4).behaviors().iter().filter(|b| b.name() != "expand") {
        rt.register(b.clone()).unwrap();
    }
    assert!(matches!(replay_strict(&rt, &out.log), Err(RunError::MissingBehavior(name)) if name == "expand"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Tampering with one behavior-made object is caught at exactly that seq.
    #[test]
    fn tampering_is_pinned(seed in 0u64..40, pick in any::<prop::sample::Index>()) {
        let (rt, out) = run_random(seed, 0);
        let made: Vec<u64> = out.log.events().iter()
            .filter(|e| e.kind == types::OBJECT_CREATED && e.caused_by.is_some())
            .map(|e| e.seq())
            .collect();
        prop_assume!(!made.is_empty());
        let target = made[pick.index(made.len())];
        let text = String::from_utf8(out.log.to_bytes()).unwrap();
        let tampered: Vec<String> = text.lines().enumerate().map(|(i, l)| {
            if i as u64 == target { l.replacen("\"depth\":", "\"depth_\":", 1) } else { l.to_string() }
        }).collect();
        let log = EventLog::from_bytes(tampered.join("\n").as_bytes()).unwrap();
        match replay_strict(&rt, &log) {
            Err(RunError::Diverged(d)) => prop_assert_eq!(d.seq, target),
            other => prop_assert!(false, "expected divergence, got {:?}", other.map(|o| o.report)),
        }
    }
}

#[test]
fn permissive_replay_of_a_clean_record_adds_nothing() {
    let (rt, out) = run_random(7, 1);
    let mut provider = HashProvider::new(99);
    let again = replay_permissive(&rt, &out.log, "again", &mut provider).unwrap();
    assert_eq!(again.report.fresh_events, 0);
    assert_eq!(again.report.diverged_at, None);
    assert_eq!(provider.calls, 0);
    assert_eq!(again.log.events(), out.log.events());
}

#[test]
fn permissive_replay_forks_at_the_first_mismatch() {
    let (rt, record) = clock_record();
    let pinned = first_clock_event(&record);
    let out = replay_permissive(&rt, &record, "loose", &mut NoProvider::default()).unwrap();
    assert_eq!(out.report.diverged_at, Some(pinned));
    assert_eq!(out.log.parent().unwrap().cutoff, pinned - 1);
    assert_eq!(&out.log.events()[..pinned as usize - 1], &record.events()[..pinned as usize - 1]);
    assert_eq!(out.log.get(pinned).unwrap().id.run.as_str(), "loose");
    assert!(out.report.fresh_events > 0);
}

#[test]
fn fork_cutoff_must_be_in_range() {
    let (rt, out) = run_random(0, 0);
    let len = out.log.len() as u64;
    for cutoff in [0, len + 1] {
        let err = fork(&rt, &out.log, &ForkSpec::new("x", cutoff), &mut NoProvider::default()).unwrap_err();
        assert!(matches!(err, RunError::CutoffOutOfRange { .. }), "{err}");
    }
}

#[test]
fn fork_prefix_is_free_and_owned_by_the_parent() {
    for seed in 0..10 {
        let (rt, parent) = run_random(seed, 3);
        let len = parent.log.len() as u64;
        let cutoff = len * 3 / 4;
        let mut provider = HashProvider::new(3);
        let child = fork(&rt, &parent.log, &ForkSpec::new("child", cutoff), &mut provider).unwrap();
        assert_eq!(child.report.prefix_provider_invocations, 0);
        let later_calls = parent.log.events()[cutoff as usize..].iter().filter(|e| e.kind == types::LLM_REQUESTED).count();
        assert!(provider.calls as usize <= later_calls, "seed {seed}");
        let owners = ownership(&child.log);
        assert_eq!(owners[parent.log.run()], cutoff);
        let diff = structural_diff(&parent.log, &child.log).unwrap();
        assert_eq!(diff.shared_prefix, cutoff);
        // Same pack and responses: the fork redoes the same work under new ids.
        assert_eq!(diff.objects_only_in_a.len(), diff.objects_only_in_b.len());
        assert!(diff.changed_objects.is_empty());
    }
}

#[test]
fn fork_at_the_end_has_no_differences() {
    let (rt, parent) = run_random(8, 0);
    let len = parent.log.len() as u64;
    let child = fork(&rt, &parent.log, &ForkSpec::new("tail", len), &mut NoProvider::default()).unwrap();
    assert!(structural_diff(&parent.log, &child.log).unwrap().is_empty());
}

#[test]
fn behavior_override_changes_the_fork() {
    let (rt, parent) = run_random(6, 0);
    let first_fire = parent.log.events().iter().find(|e| e.kind == types::BEHAVIOR_STARTED).unwrap().seq();
    let spec = ForkSpec::new("shallow", first_fire - 1).with_override("behavior.expand.max_depth", json!(0));
    let child = fork(&rt, &parent.log, &spec, &mut HashProvider::new(0)).unwrap();
    assert_eq!(child.report.model_calls, 0);
    assert_eq!(child.log.overrides().len(), 1);
    let reloaded = EventLog::from_bytes(&child.log.to_bytes()).unwrap();
    assert_eq!(reloaded.overrides(), child.log.overrides());
}

#[test]
fn unknown_override_is_an_error() {
    let (rt, parent) = run_random(6, 0);
    let spec = ForkSpec::new("bad", 3).with_override("behavior.nobody.x", json!(1));
    assert!(matches!(fork(&rt, &parent.log, &spec, &mut NoProvider::default()), Err(RunError::Override { .. })));
}

#[test]
fn unrelated_runs_do_not_diff() {
    let (a, b) = (run_random(1, 0).1, run_random(2, 0).1);
    assert!(matches!(structural_diff(&a.log, &b.log), Err(DiffError::UnrelatedRuns { .. })));
}

// Twenty-plus parent and fork pairs against the brute-force comparison.
#[test]
fn diff_equals_set_comparison() {
    let (mut pairs, mut with_changes) = (0, 0);
    for seed in 0..24u64 {
        let (rt, parent) = run_random(seed, 0);
        let len = parent.log.len() as u64;
        for (cutoff, salt) in [(len / 3 + 1, 1), (len * 2 / 3, 0), (len, 5)] {
            let child = fork(&rt, &parent.log, &ForkSpec::new(format!("f{cutoff}"), cutoff), &mut HashProvider::new(salt)).unwrap();
            let diff = structural_diff(&parent.log, &child.log).unwrap();
            assert_eq!(as_oracle(&diff), oracle_diff(&parent.log, &child.log), "seed {seed} cutoff {cutoff}");
            let (pa, pb) = (patch_ids(&parent.log), patch_ids(&child.log));
            let only_a: BTreeSet<String> = pa.difference(&pb).cloned().collect();
            let only_b: BTreeSet<String> = pb.difference(&pa).cloned().collect();
            assert_eq!(diff.patches_only_in_a.iter().map(|p| p.event.to_string()).collect::<BTreeSet<_>>(), only_a);
            assert_eq!(diff.patches_only_in_b.iter().map(|p| p.event.to_string()).collect::<BTreeSet<_>>(), only_b);
            // Swapping the arguments mirrors the result.
            let back = structural_diff(&child.log, &parent.log).unwrap();
            assert_eq!(back.objects_only_in_a, diff.objects_only_in_b);
            assert_eq!(back.relations_only_in_b, diff.relations_only_in_a);
            pairs += 1;
            with_changes += usize::from(!diff.changed_objects.is_empty());
        }
    }
    assert!(pairs >= 20);
    assert!(with_changes > 0, "no pair exercised changed objects");
}

#[test]
fn lineage_reaches_an_external_root() {
    for seed in 0..8 {
        let (_, out) = run_random(seed, 0);
        for o in out.graph.objects() {
            let chain = lineage(&out.log, &LineageTarget::Object(o.id.clone())).unwrap();
            assert!(out.log.lookup(&chain.root().event).unwrap().caused_by.is_none());
            let seqs: Vec<u64> = chain.links.iter().map(|l| l.event.seq).collect();
            assert!(seqs.windows(2).all(|w| w[0] > w[1]), "{seqs:?}");
        }
    }
    let (_, out) = run_random(0, 0);
    assert!(lineage(&out.log, &LineageTarget::Object(ObjectId::new("nope"))).is_err());
}
