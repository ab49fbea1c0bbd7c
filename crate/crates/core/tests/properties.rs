mod common;

use std::collections::BTreeMap;

use common::*;
use d2p_core::config::PipelineConfig;
use d2p_core::eval::{run_episode, scene_from_episode};
use d2p_core::fusion::Resolution;
use d2p_core::fusion::{resolve_at_keyframe, VoteConfig};
use d2p_core::geometry::{backproject, project, CameraModel, TablePlane};
use d2p_core::kinematics::{fk, plan_to_trajectory, solve_ik, IkSettings, JointConfig, KinematicChain};
use d2p_core::planning::LabelTimeline;
use d2p_core::planning::{synthesize, validate, ActionPlan, HeldSegment, PlanStep, StepKind};
use d2p_core::sim::{execute, generate_demo_traced, ExecutionTolerances, GeneratorConfig, Provenance, SceneObject};
use d2p_core::types::{split_dataset, Episode, Point3};
use d2p_core::RngSeed;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_round_trip_through_jsonl(seed in any::<u64>()) {
        let ep = demo(RngSeed(seed), &GeneratorConfig::default());
        let mut bytes = Vec::new();
        ep.write_to(&mut bytes).unwrap();
        let back = Episode::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ep);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn generator_labels_follow_the_script(seed in any::<u64>()) {
        let ep = demo(RngSeed(seed), &GeneratorConfig::default());
        let script = ep.script.clone().unwrap();
        prop_assert_eq!(ep.gt_labels().unwrap(), script.labels(ep.frame_count));
        prop_assert!(script.held[0].1 < script.held[1].0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_is_a_partition(n in 1usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, test) = split_dataset(&items, frac, RngSeed(seed)).unwrap();
        prop_assert_eq!(train.len(), (n as f64 * frac).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn project_backproject_round_trip(
        x in 0.2f64..0.9, y in -0.5f64..0.5, pitch in 30f64..89.0, h in 0.3f64..0.8,
    ) {
        let table = TablePlane::desk_default();
        let cam = CameraModel::pitched(500.0, 500.0, 320.0, 320.0, Point3::new(0.0, 0.0, table.height_m + h), pitch.to_radians()).unwrap();
        let p = Point3::new(x, y, table.height_m);
        if let Ok(px) = project(&p, &cam) {
            let back = backproject(&px, &cam, &table).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
            prop_assert_eq!(back.z, table.height_m);
        }
    }

    #[test]
    fn ik_solutions_are_sound(seed in any::<u64>()) {
        let chain = KinematicChain::nicol_like_8dof();
        let mut rng = RngSeed(seed).rng();
        let q = JointConfig::new(chain.joints.iter().map(|j| rng.random_range(j.limits[0]..j.limits[1])).collect());
        let target = fk(&chain, &q).unwrap().tool;
        let s = IkSettings::default();
        if let Ok(sol) = solve_ik(&chain, &target, &chain.home(), &s) {
            prop_assert!((fk(&chain, &sol.q).unwrap().tool - target).norm() < s.tol_pos);
            prop_assert!(chain.within_limits(&sol.q));
            prop_assert!(sol.iterations <= s.max_iters);
        }
    }

    #[test]
    fn trajectories_are_continuous(seed in any::<u64>()) {
        let chain = KinematicChain::nicol_like_8dof();
        let table = TablePlane::desk_default();
        let mut rng = RngSeed(seed).rng();
        let mut point = || Point3::new(
            rng.random_range(0.25..0.85),
            rng.random_range(-0.45..0.45),
            table.height_m + rng.random_range(0.02..0.2),
        );
        let steps = vec![
            PlanStep { kind: StepKind::Approach, target: point(), object_id: None },
            PlanStep { kind: StepKind::Grasp, target: Point3::origin(), object_id: Some("x".into()) },
            PlanStep { kind: StepKind::Transport, target: point(), object_id: None },
            PlanStep { kind: StepKind::Release, target: Point3::origin(), object_id: Some("x".into()) },
            PlanStep { kind: StepKind::Retreat, target: point(), object_id: None },
        ];
        let traj = plan_to_trajectory(&chain, &ActionPlan { steps }, &chain.home(), &IkSettings::default(), 0.02).unwrap();
        let mut prev = chain.home();
        for seg in &traj {
            prop_assert_eq!(seg.waypoints.is_empty(), seg.kind.is_gripper_event());
            for q in &seg.waypoints {
                if prev != chain.home() {
                    prop_assert!(q.max_abs_diff(&prev) < 0.25, "jump {}", q.max_abs_diff(&prev));
                }
                prop_assert!((fk(&chain, q).unwrap().tool - fk(&chain, &prev).unwrap().tool).norm() <= 0.02 + 1e-9);
                prev = q.clone();
            }
        }
    }

    #[test]
    fn plan_iff_every_validation_passes(seed in any::<u64>()) {
        let table = TablePlane::desk_default();
        let mut rng = RngSeed(seed).rng();
        let n = rng.random_range(0..4usize);
        let mut start = 5;
        let mut segs = Vec::new();
        for _ in 0..n {
            let len = rng.random_range(1..30usize);
            let pt = |rng: &mut rand_chacha::ChaCha8Rng| {
                rng.random_bool(0.85).then(|| Point3::new(rng.random_range(0.0..1.1), rng.random_range(-0.6..0.6), table.height_m))
            };
            let decided = rng.random_bool(0.85);
            segs.push(HeldSegment {
                start_frame: start,
                end_frame: start + len - 1,
                object: Some(Resolution {
                    track_id: decided.then_some(0),
                    class: decided.then(|| "metal can".to_string()),
                    position: None,
                    frames_used: 1,
                    decided,
                }),
                object_id: decided.then(|| "spam_can".to_string()),
                grasp_offset_m: 0.04,
                grasp_point: pt(&mut rng),
                release_point: pt(&mut rng),
            });
            start += len + rng.random_range(2..10usize);
        }
        let vals = validate(&segs, &table, 0.05, 1e-6);
        let report = synthesize(&segs, &vals, 0.1);
        let all_pass = vals.iter().all(|v| v.passed());
        prop_assert_eq!(report.plan().is_some(), all_pass);
        if let Some(plan) = report.plan() {
            prop_assert_eq!(plan.steps.len(), 8 * n);
            let gripper: Vec<StepKind> = plan.steps.iter().map(|s| s.kind).filter(|k| k.is_gripper_event()).collect();
            for (i, k) in gripper.iter().enumerate() {
                let expected = if i % 2 == 0 { StepKind::Grasp } else { StepKind::Release };
                prop_assert_eq!(*k, expected);
            }
            for s in &plan.steps {
                prop_assert!(s.target.coords.iter().all(|c| c.is_finite()));
                prop_assert_eq!(s.kind.is_gripper_event(), s.object_id.is_some());
            }
        }
    }
}

#[test]
fn voting_matches_brute_force_oracle() {
    let mut rng = RngSeed(2024).rng();
    let mut decided = 0;
    for _ in 0..1000 {
        let (raw, key, hand) = random_instance(&mut rng);
        let cfg = VoteConfig {
            max_window: rng.random_range(0..=3),
            ..VoteConfig::default()
        };
        let tracks = build_tracks(&raw);
        let hand = rng.random_bool(0.8).then_some(hand);
        let got = resolve_at_keyframe(&tracks, key, hand, &cfg);
        let want = brute_force_vote(&raw, key, hand, &cfg);
        assert_eq!(got, want, "instance {raw:?} key {key} hand {hand:?}");
        decided += usize::from(got.decided);
        if got.decided {
            assert!(got.frames_used <= 2 * cfg.max_window + 1);
            assert!(!cfg.class_blacklist.contains(got.class.as_deref().unwrap()));
        }
    }
    assert!(
        decided > 100 && decided < 1000,
        "degenerate instances: {decided} decided"
    );
}

#[test]
fn outer_detections_do_not_change_a_decision() {
    let mut rng = RngSeed(7).rng();
    let mut checked = 0;
    for _ in 0..1000 {
        let (mut raw, key, hand) = random_instance(&mut rng);
        let cfg = VoteConfig {
            max_window: 3,
            ..VoteConfig::default()
        };
        let before = resolve_at_keyframe(&build_tracks(&raw), key, Some(hand), &cfg);
        let Some(id) = before.track_id else { continue };
        let k = (before.frames_used - 1) / 2;
        let class = before.class.clone().unwrap();
        let taken: Vec<usize> = raw[id].iter().map(|o| o.0).collect();
        for f in (0..30usize).filter(|f| f.abs_diff(key) > k && !taken.contains(f)) {
            raw[id].push((f, hand.u, hand.v, 0.9, class.clone()));
        }
        raw[id].sort_by_key(|o| o.0);
        let after = resolve_at_keyframe(&build_tracks(&raw), key, Some(hand), &cfg);
        assert_eq!(after.track_id, before.track_id);
        assert_eq!(after.frames_used, before.frames_used);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn association_is_deterministic() {
    let ep = demo(RngSeed(5), &GeneratorConfig::default());
    let cfg = VoteConfig::default();
    let a = d2p_core::fusion::associate_tracks(&ep, &cfg);
    let b = d2p_core::fusion::associate_tracks(&ep, &cfg);
    assert_eq!(a, b);
}

#[test]
fn generator_statistics_match_the_noise_model() {
    let (cam, table) = desk();
    let gen = GeneratorConfig::default();
    let noise = &gen.noise;
    let (mut eligible, mut detected, mut correct, mut frames, mut fps) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for i in 0..30 {
        let seed = RngSeed(99).derive_index("stats", i);
        let (ep, trace) = generate_demo_traced(&scene_for(seed), seed, &gen, &cam, &table).unwrap();
        frames += ep.frame_count;
        eligible += trace.eligible_object_frames;
        fps += trace.false_positive_counts.iter().sum::<usize>();
        for prov in trace.provenance.iter().flatten() {
            if let Provenance::Object { correct_class, .. } = prov {
                detected += 1;
                correct += usize::from(*correct_class);
            }
        }
    }
    assert!(frames >= 10_000);
    let within = |hits: usize, n: usize, p: f64| {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        ((hits as f64 / n as f64) - p).abs() <= 3.0 * sigma
    };
    assert!(
        within(detected, eligible, noise.detect_prob),
        "detect {detected}/{eligible}"
    );
    assert!(
        within(correct, detected, noise.class_accuracy),
        "class {correct}/{detected}"
    );
    let mean = fps as f64 / frames as f64;
    let sigma = (noise.fp_rate_per_frame / frames as f64).sqrt();
    assert!((mean - noise.fp_rate_per_frame).abs() <= 3.0 * sigma, "fp mean {mean}");
}

/// Objects move only while attached or when pushed by a failed grasp.
#[test]
fn execution_conserves_unmanipulated_objects() {
    let cfg = PipelineConfig::default();
    let chain = cfg.chain().unwrap();
    for i in 0..10 {
        let seed = RngSeed(31).derive_index("audit", i);
        let ep = demo(seed, &GeneratorConfig::default());
        let gt = LabelTimeline::new(ep.gt_labels().unwrap());
        let run = run_episode(&ep, &gt, &cfg, &chain, None).unwrap();
        let Some(exec) = run.execution else { continue };
        let initial: BTreeMap<String, Point3> = scene_from_episode(&ep)
            .unwrap()
            .into_iter()
            .map(|o| (o.object_id, o.position))
            .collect();
        for (id, start) in &initial {
            let mut last: Option<Point3> = None;
            for e in &exec.events {
                match e {
                    d2p_core::sim::Event::Detach { object_id, at, .. } if object_id == id => last = Some(*at),
                    d2p_core::sim::Event::Push { object_id, to, .. } if object_id == id => last = Some(*to),
                    _ => {}
                }
            }
            assert_eq!(exec.final_object_positions[id], last.unwrap_or(*start), "object {id}");
        }
    }
}

#[test]
fn failed_grasp_on_unknown_scene_object_is_mismatch() {
    let chain = KinematicChain::nicol_like_8dof();
    let scene: Vec<SceneObject> = vec![];
    let traj = vec![d2p_core::kinematics::TrajectorySegment {
        kind: StepKind::Grasp,
        object_id: Some("spam_can".into()),
        waypoints: vec![],
    }];
    let err = execute(
        &scene,
        &traj,
        &chain,
        &ExecutionTolerances::default(),
        None,
        0.8,
        RngSeed(0),
    )
    .unwrap_err();
    assert!(matches!(err, d2p_core::Error::PlanObjectMismatch(_)));
}
