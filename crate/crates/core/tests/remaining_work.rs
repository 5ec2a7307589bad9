//! Expected remaining work against brute-force path enumeration on random
//! chain workflows with retry loops.

use std::collections::BTreeMap;

use proptest::prelude::*;
use stagepool_core::workflow::{
    expected_fixer_invocations, expected_remaining_work, expected_visits, OutcomeSpec, Position, RequestState,
    ServiceEstimates, StageKind, StageSpec, Target,
};
use stagepool_core::{build_nl2sql, validate_workflow, Dist, Nl2SqlParams, WorkflowSpec};

#[derive(Debug, Clone)]
struct StageShape {
    retry_p: f64,
    retry_to: usize,
    fail_p: f64,
    service: f64,
}

fn chain(shapes: &[StageShape], budget: u32) -> WorkflowSpec {
    let n = shapes.len();
    let stages = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let forward = if i + 1 < n { Target::Stage(format!("s{}", i + 1)) } else { Target::Success };
            let mut outcomes = vec![OutcomeSpec {
                label: "ok".into(),
                probability: 1.0 - s.retry_p - s.fail_p,
                next: forward,
                retry: false,
            }];
            outcomes.push(OutcomeSpec {
                label: "again".into(),
                probability: s.retry_p,
                next: Target::Stage(format!("s{}", s.retry_to.min(i))),
                retry: true,
            });
            if s.fail_p > 0.0 {
                outcomes.push(OutcomeSpec {
                    label: "give_up".into(),
                    probability: s.fail_p,
                    next: Target::Failure,
                    retry: false,
                });
            }
            StageSpec {
                id: format!("s{i}"),
                kind: StageKind::Tool,
                prefix_tokens: 0,
                prompt_tokens: None,
                output_tokens: None,
                service_time: Some(Dist::Constant(s.service)),
                outcomes,
            }
        })
        .collect();
    WorkflowSpec { name: "chain".into(), stages, entry_stage: "s0".into(), retry_budget: budget, slo_seconds: 10.0 }
}

fn brute(spec: &WorkflowSpec, est: &BTreeMap<String, f64>, stage: &str, retries: u32) -> f64 {
    let s = spec.stages.iter().find(|s| s.id == stage).unwrap();
    let mut total = est[stage];
    for o in &s.outcomes {
        if let Target::Stage(next) = &o.next {
            if o.retry && retries >= spec.retry_budget {
                continue;
            }
            total += o.probability * brute(spec, est, next, retries + o.retry as u32);
        }
    }
    total
}

fn shape() -> impl Strategy<Value = StageShape> {
    (0.0..0.6f64, 0usize..4, prop_oneof![Just(0.0), 0.01..0.3f64], 0.01..5.0f64)
        .prop_map(|(retry_p, retry_to, fail_p, service)| StageShape { retry_p, retry_to, fail_p, service })
}

proptest! {
    #[test]
    fn dp_matches_enumeration(shapes in prop::collection::vec(shape(), 1..5), budget in 0u32..4) {
        let spec = chain(&shapes, budget);
        let wf = validate_workflow(spec.clone()).unwrap();
        let est: BTreeMap<String, f64> = shapes.iter().enumerate().map(|(i, s)| (format!("s{i}"), s.service)).collect();
        let estimates = ServiceEstimates::from_named(&wf, &est).unwrap();
        for sid in wf.stage_ids() {
            for r in 0..=budget {
                let mut state = RequestState::new(0, 0.0, &wf);
                state.position = Position::At(sid);
                state.retries_used = r;
                let dp = expected_remaining_work(&state, &wf, &estimates).unwrap();
                let oracle = brute(&spec, &est, &wf.stage(sid).id, r);
                prop_assert!((dp - oracle).abs() <= 1e-9 * oracle.max(1.0), "{dp} vs {oracle}");
            }
        }
    }

    #[test]
    fn fixer_visits_match_closed_form(p in 0.0..1.0f64, budget in 0u32..6) {
        let wf = validate_workflow(build_nl2sql(&Nl2SqlParams::default().with_p_fail(p)).unwrap()).unwrap();
        let mut b = Nl2SqlParams::default().with_p_fail(p);
        b.retry_budget = budget;
        let wf_b = validate_workflow(build_nl2sql(&b).unwrap()).unwrap();
        let visits = expected_visits(&wf_b);
        let fixer = wf_b.stage_id("fixer").unwrap();
        prop_assert!((visits[fixer.0] - expected_fixer_invocations(p, budget)).abs() < 1e-9);
        prop_assert!((expected_visits(&wf)[wf.entry().0] - 1.0).abs() < 1e-12);
    }
}
