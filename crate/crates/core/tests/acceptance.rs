//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run with `cargo test -p locoman-core --test acceptance`.

use locoman_core::attention::{attention_dropout, cross_attention, localize, AttentionMap, FeatureMap, TextEmbedding};
use locoman_core::demos::{
    build_policy_dataset, load_episode, read_episode, save_episode, write_episode,
    AttentionPayload, CameraPayload, ChannelType, Episode, EpisodeMetadata, Frame, FrameObservation,
};
use locoman_core::geometry::{teleop_base_map, teleop_ee_map, BaseCommand, GripperCommand, Pose, TeleopConfig};
use locoman_core::harness::{command_error, compare_modes, run_scenario, run_trial, RunOptions, Setup, TrialOptions};
use locoman_core::llm::{Evaluator, LlmError, MockEvaluator, NodeScore, SkillChoice};
use locoman_core::planner::{coarse_plan, fine_plan, plan, FinePlanConfig, SceneGraph, SceneNode, TaskStep};
use locoman_core::simworld::{BodyCommand, CameraId, PlanarPose};
use locoman_core::skills::{
    detect_termination, label_end_signal, SkillLibrary, TemporalEnsembler, TerminationConfig, TerminationDetector,
};
use locoman_core::{ControlMode, WholeBodyCommand};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn setup(name: &str) -> Result<Setup, String> {
    Setup::from_path(configs().join("scenarios").join(format!("{name}.toml"))).map_err(|e| e.to_string())
}

fn random_rotation_pose(rng: &mut ChaCha8Rng, reach: f64) -> Pose {
    let mut q = [0.0; 4];
    for v in &mut q {
        *v = rng.sample(StandardNormal);
    }
    let t = [
        rng.gen_range(-reach..reach),
        rng.gen_range(-reach..reach),
        rng.gen_range(-reach..reach),
    ];
    Pose::from_quaternion(q, t).expect("non-degenerate quaternion")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ee_map() -> Check {
    let started = Instant::now();
    let cfg = TeleopConfig::default();
    let s = cfg.translation_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut rot_err, mut lin_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let a = random_rotation_pose(&mut rng, 0.6);
        let b = random_rotation_pose(&mut rng, 0.6);
        let ma = teleop_ee_map(&a, &cfg).map_err(|e| e.to_string())?;
        let mb = teleop_ee_map(&b, &cfg).map_err(|e| e.to_string())?;
        rot_err = rot_err.max(max_abs_diff(ma.rotation.as_slice(), a.rotation.as_slice()));
        lin_err = lin_err.max((ma.translation - a.translation * s).amax());

        // Additivity and homogeneity of the translation part.
        let k: f64 = rng.gen_range(-2.0..2.0);
        let sum = Pose {
            rotation: a.rotation,
            translation: a.translation + b.translation * k,
        };
        let msum = teleop_ee_map(&sum, &cfg).map_err(|e| e.to_string())?;
        let expected = ma.translation + mb.translation * k;
        lin_err = lin_err.max((msum.translation - expected).amax() / expected.amax().max(1.0));
    }
    let id = teleop_ee_map(&Pose::identity(), &cfg).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(rot_err <= 1e-12, || format!("rotation changed by {rot_err:e}"))?;
    ensure(lin_err <= 1e-12, || format!("translation not linear: {lin_err:e}"))?;
    ensure(id == Pose::identity(), || format!("identity mapped to {id:?}"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 poses: rotation err {rot_err:.1e}, translation err {lin_err:.1e}, identity exact, {:.1} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

fn deadzone() -> Check {
    let cfg = TeleopConfig::default();
    let dz = cfg.deadzone;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let wrist = |r: f64, theta: f64, yaw: f64| Pose::from_planar(r * theta.cos(), r * theta.sin(), 0.0, yaw);
    for _ in 0..10_000 {
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let r = dz * rng.gen::<f64>();
        let yaw = rng.gen_range(-0.99..0.99) * cfg.yaw_deadzone;
        let cmd = teleop_base_map(&wrist(r, theta, yaw), true, &cfg);
        ensure(cmd.is_zero(), || format!("r = {r}, yaw = {yaw} gave {cmd:?}"))?;
        // Linear channel ignores yaw entirely.
        let cmd = teleop_base_map(&wrist(r, theta, 0.7), true, &cfg);
        ensure(cmd.linear_velocity == Vector2::zeros(), || format!("r = {r} moved with yaw"))?;
    }
    let mut jump = 0.0f64;
    for i in 0..360 {
        let theta = i as f64 * std::f64::consts::PI / 180.0;
        for eps in [0.0, 1e-15, 1e-12, 1e-10] {
            let v = teleop_base_map(&wrist(dz + eps, theta, 0.0), true, &cfg).linear_velocity.norm();
            jump = jump.max(v);
        }
        // Past the edge the speed grows linearly from zero.
        let r = dz + 0.1;
        let v = teleop_base_map(&wrist(r, theta, 0.0), true, &cfg).linear_velocity.norm();
        let expected = (cfg.base_linear_gain * (r - dz)).min(cfg.max_linear_speed);
        ensure((v - expected).abs() < 1e-12, || format!("speed {v} at r = {r}, expected {expected}"))?;
    }
    ensure(jump <= 1e-9, || format!("discontinuity {jump:e} at the boundary"))?;
    Ok(format!("10k samples inside {dz} m are zero; boundary jump {jump:.1e}"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn attention() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut brute = 0.0f64;
    for _ in 0..1000 {
        let f = random_map(&mut rng, 2, 2, 3);
        let t = TextEmbedding::new("q", (0..3).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let att = cross_attention(&f, &t).map_err(|e| e.to_string())?;
        for r in 0..2 {
            for c in 0..2 {
                let start = (r * 2 + c) * 3;
                let expected = cosine(&f.data[start..start + 3], &t.vector);
                brute = brute.max((att.get(r, c) - expected).abs());
            }
        }
    }
    ensure(brute <= 1e-9, || format!("2x2x3 maps differ from brute force by {brute:e}"))?;

    let mut scale_err = 0.0f64;
    for _ in 0..200 {
        let f = random_map(&mut rng, 8, 8, 32);
        let t = TextEmbedding::new("q", (0..32).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let att = cross_attention(&f, &t).map_err(|e| e.to_string())?;
        ensure(att.values.iter().all(|v| (-1.0..=1.0).contains(v)), || "cosine outside [-1, 1]".into())?;
        let a = 10f64.powf(rng.gen_range(-3.0..3.0));
        let b = 10f64.powf(rng.gen_range(-3.0..3.0));
        let t2 = TextEmbedding::new("q", t.vector.iter().map(|v| v * b).collect()).unwrap();
        let scaled = cross_attention(&f.scaled(a), &t2).map_err(|e| e.to_string())?;
        scale_err = scale_err.max(max_abs_diff(&att.values, &scaled.values));
        let (p0, _) = localize(&att).map_err(|e| e.to_string())?;
        let (p1, _) = localize(&scaled).map_err(|e| e.to_string())?;
        ensure(p0 == p1, || format!("argmax moved from {p0:?} to {p1:?} under scaling"))?;
    }
    ensure(scale_err <= 1e-12, || format!("scale invariance error {scale_err:e}"))?;

    // Expectation of inverted dropout equals the input.
    let att = AttentionMap {
        height: 2,
        width: 2,
        values: vec![0.9, -0.4, 0.25, 0.6],
    };
    let rate = 0.3;
    let n = 10_000;
    let mut sums = [0.0; 4];
    for seed in 0..n {
        let d = attention_dropout(&att, rate, true, seed as u64);
        for (s, v) in sums.iter_mut().zip(&d.values) {
            *s += v;
        }
    }
    let mut worst = 0.0f64;
    for (s, v) in sums.iter().zip(&att.values) {
        let mean = s / n as f64;
        let sigma = v.abs() * (rate / (1.0 - rate)).sqrt() / (n as f64).sqrt();
        let z = (mean - v).abs() / sigma;
        worst = worst.max(z);
    }
    ensure(worst <= 3.0, || format!("dropout mean off by {worst:.2} sigma"))?;
    ensure(attention_dropout(&att, rate, false, 9) == att, || "dropout active outside training".into())?;
    Ok(format!(
        "brute force {brute:.1e}, scale invariance {scale_err:.1e}, dropout worst {worst:.2} sigma over {n} draws"
    ))
}

/// First index whose trailing `window` values all exceed the threshold.
fn first_window(values: &[f64], cfg: &TerminationConfig) -> Option<usize> {
    (0..values.len()).find(|&i| {
        i + 1 >= cfg.window && values[i + 1 - cfg.window..=i].iter().all(|&v| v > cfg.threshold)
    })
}

fn termination() -> Check {
    let cfg = TerminationConfig::default();
    ensure(cfg.window == 10 && cfg.threshold == 0.8, || format!("defaults changed: {cfg:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fired = 0;
    for _ in 0..5000 {
        let len = rng.gen_range(0..120);
        let p_high = rng.gen_range(0.5..1.0);
        let values: Vec<f64> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.8,
                _ if rng.gen_bool(p_high) => rng.gen_range(0.800001..1.0),
                _ => rng.gen_range(0.0..0.8),
            })
            .collect();
        let expected = first_window(&values, &cfg);
        let got = detect_termination(&values, &cfg);
        ensure(got == expected, || format!("batch {got:?} vs {expected:?} on {values:?}"))?;
        let mut det = TerminationDetector::new(cfg);
        let mut streamed = None;
        for &v in &values {
            let r = det.push(v);
            if streamed.is_some() {
                ensure(r == streamed, || "detector changed after firing".into())?;
            }
            streamed = r;
        }
        ensure(streamed == expected, || format!("streaming {streamed:?} vs {expected:?}"))?;
        fired += usize::from(expected.is_some());
    }

    for (window, buffer) in [(10, 10), (1, 10), (3, 5), (5, 12), (10, 15)] {
        let c = TerminationConfig {
            window,
            label_buffer: buffer,
            ..cfg
        };
        for l in 1..=200usize {
            let labels: Vec<f64> = label_end_signal(l, &c).into_iter().map(f64::from).collect();
            let ones = labels.iter().filter(|&&v| v == 1.0).count();
            ensure(ones == l.min(buffer), || format!("L = {l}: {ones} positive labels"))?;
            let expected = if l >= buffer {
                Some(l - buffer + window - 1)
            } else {
                (window <= l).then(|| window - 1)
            };
            let got = detect_termination(&labels, &c);
            ensure(got == expected, || format!("window {window}, n {buffer}, L = {l}: {got:?} vs {expected:?}"))?;
            if window == buffer {
                ensure(got.map_or(true, |i| i == l - 1), || format!("L = {l} fired at {got:?}"))?;
            }
        }
    }
    Ok(format!("5000 random sequences ({fired} fired) match the window rule; label law holds for L in 1..=200"))
}

fn table4() -> Check {
    let started = Instant::now();
    let s = setup("ground_grasp")?;
    let modes = [ControlMode::WholeBody, ControlMode::Decoupled, ControlMode::ArmOnly];
    let cmp = compare_modes(&s, &modes, &RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let row = |m| cmp.row(m).ok_or_else(|| format!("no row for {m}"));
    let (wb, dec, arm) = (row(ControlMode::WholeBody)?, row(ControlMode::Decoupled)?, row(ControlMode::ArmOnly)?);
    ensure(wb.trials == 10 && dec.trials == 10 && arm.trials == 10, || "expected 10 trials per mode".into())?;
    ensure(arm.success_rate == 0.0, || format!("arm_only success {}", arm.success_rate))?;
    ensure(wb.success_rate >= 0.9, || format!("whole_body success {}", wb.success_rate))?;
    let (Some(t_wb), Some(t_dec)) = (wb.mean_completion_time, dec.mean_completion_time) else {
        return Err("missing completion times".into());
    };
    ensure(t_wb < t_dec, || format!("whole_body {t_wb:.2} s not faster than decoupled {t_dec:.2} s"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "whole_body {:.0}% / {t_wb:.2} s, decoupled {:.0}% / {t_dec:.2} s, arm_only {:.0}%, {:.2} s",
        wb.success_rate * 100.0,
        dec.success_rate * 100.0,
        arm.success_rate * 100.0,
        elapsed.as_secs_f64()
    ))
}

fn long_horizon() -> Check {
    let started = Instant::now();
    let mut s = setup("trash")?;
    let nominal = run_scenario(
        &s,
        &RunOptions {
            nominal: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(nominal.trials == 10 && nominal.successes == 10, || {
        format!("nominal {}/{}: {:?}", nominal.successes, nominal.trials, nominal.failures)
    })?;
    let ood = run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(ood.perturbed, || "default run was not perturbed".into())?;
    ensure(ood.successes >= 7, || format!("O.O.D. {}/{}: {:?}", ood.successes, ood.trials, ood.failures))?;
    let mut sets = Vec::new();
    for seed in [1, 2, 3, 4, 5] {
        s.scenario.seed = seed;
        let r = run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())?;
        ensure(r.successes >= 6, || format!("seed {seed}: {}/{}", r.successes, r.trials))?;
        sets.push(format!("{}", r.successes));
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "nominal {}/10, O.O.D. {}/10, seed sets 1-5: {}/10, {:.2} s",
        nominal.successes,
        ood.successes,
        sets.join(", "),
        elapsed.as_secs_f64()
    ))
}

/// Scores one chosen node 1 and everything else 0.
struct Pick(String);

impl Evaluator for Pick {
    fn decompose(&self, instruction: &str, _: &SkillLibrary) -> Result<Vec<String>, LlmError> {
        Ok(vec![instruction.into()])
    }

    fn score_node(&self, _: &str, node: &str, _: &str, _: &[String]) -> Result<NodeScore, LlmError> {
        Ok(NodeScore {
            node: node.into(),
            likelihood: if node == self.0 { 1.0 } else { 0.0 },
            rationale: String::new(),
        })
    }

    fn select_skill(&self, _: &str, _: &SkillLibrary) -> Result<Option<SkillChoice>, LlmError> {
        Ok(Some(SkillChoice {
            skill: "navigate".into(),
            object: None,
            target: None,
        }))
    }
}

/// Shortest path length by enumerating every simple path.
fn brute_shortest(adj: &[Vec<bool>], from: usize, to: usize) -> Option<usize> {
    fn go(adj: &[Vec<bool>], at: usize, to: usize, seen: &mut Vec<bool>, depth: usize, best: &mut Option<usize>) {
        if at == to {
            *best = Some(best.map_or(depth, |b| b.min(depth)));
            return;
        }
        for next in 0..adj.len() {
            if adj[at][next] && !seen[next] {
                seen[next] = true;
                go(adj, next, to, seen, depth + 1, best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; adj.len()];
    seen[from] = true;
    let mut best = None;
    go(adj, from, to, &mut seen, 0, &mut best);
    best
}

fn planner() -> Check {
    let skills = SkillLibrary::load(configs().join("skills.toml")).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    for g in 0..50 {
        let n = rng.gen_range(1..=8);
        let p = rng.gen_range(0.15..0.7);
        let mut adj = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(p) {
                    adj[a][b] = true;
                    adj[b][a] = true;
                    edges.push((format!("w{a}"), format!("w{b}")));
                }
            }
        }
        let nodes = (0..n)
            .map(|i| SceneNode::waypoint(&format!("w{i}"), PlanarPose::new(i as f64, 0.0, 0.0), "spot", &[]))
            .collect();
        let graph = SceneGraph::new(nodes, &edges).map_err(|e| e.to_string())?;
        for from in 0..n {
            let order = graph.bfs(&format!("w{from}")).map_err(|e| e.to_string())?;
            for to in 0..n {
                let expected = brute_shortest(&adj, from, to);
                let reached = order.iter().any(|(id, _)| *id == format!("w{to}"));
                ensure(reached == expected.is_some(), || format!("graph {g}: reachability of w{to} from w{from}"))?;
                if expected.is_none() {
                    continue;
                }
                let fragment = fine_plan(
                    "go",
                    &graph,
                    &skills,
                    &Pick(format!("w{to}")),
                    &format!("w{from}"),
                    &FinePlanConfig::default(),
                );
                let Ok(fragment) = fragment else {
                    // Only disconnected graphs may refuse to plan.
                    ensure(order.len() < n, || format!("graph {g}: planning failed on a connected graph"))?;
                    continue;
                };
                let path = &fragment.path;
                ensure(path.first() == Some(&format!("w{from}")) && path.last() == Some(&format!("w{to}")), || {
                    format!("graph {g}: path {path:?} has wrong ends")
                })?;
                ensure(path.windows(2).all(|w| graph.adjacent(&w[0], &w[1])), || {
                    format!("graph {g}: path {path:?} leaves the graph")
                })?;
                ensure(Some(path.len() - 1) == expected, || {
                    format!("graph {g}: path {path:?} vs shortest length {expected:?}")
                })?;
                pairs += 1;
            }
        }
    }

    let s = setup("trash")?;
    let tasks = coarse_plan(&s.scenario.instruction, &s.skills, &MockEvaluator).map_err(|e| e.to_string())?;
    let expected = [
        "navigate to hallway",
        "pick up the trash",
        "navigate to trash bin",
        "place trash in the trash bin",
    ];
    ensure(tasks == expected, || format!("decomposition {tasks:?}"))?;
    let graph = s.scene.build().map_err(|e| e.to_string())?;
    let full = plan(
        &s.scenario.instruction,
        &graph,
        &s.skills,
        &MockEvaluator,
        &s.scenario.start_node,
        &s.scenario.planner,
    )
    .map_err(|e| e.to_string())?;
    full.validate(&graph, &s.skills).map_err(|e| e.to_string())?;
    let goals: Vec<&str> = full.fragments.iter().map(|f| f.goal.as_str()).collect();
    ensure(goals == ["hallway", "hallway", "bin_corner", "bin_corner"], || format!("goals {goals:?}"))?;
    let skills_run: Vec<&str> = full
        .steps()
        .filter_map(|st| match st {
            TaskStep::InvokeSkill { skill, .. } => Some(skill.as_str()),
            TaskStep::Navigate { .. } => None,
        })
        .collect();
    ensure(skills_run == ["pick_up", "place"], || format!("skills {skills_run:?}"))?;
    Ok(format!(
        "{pairs} start/goal pairs on 50 graphs match brute force; \"{}\" -> {tasks:?} (mock evaluator, offline)",
        s.scenario.instruction
    ))
}

/// Replays each episode through its own skill's policy.
fn imitation() -> Check {
    let mut groups: BTreeMap<(String, String), Vec<Episode>> = BTreeMap::new();
    for name in ["ground_grasp", "tabletop_grasp", "button_press", "trash"] {
        let s = setup(name)?;
        for trial in 0..10 {
            for mode in [ControlMode::WholeBody, ControlMode::Decoupled] {
                let opts = TrialOptions {
                    mode: Some(mode),
                    record: true,
                    ..Default::default()
                };
                let out = run_trial(&s, trial, &opts).map_err(|e| e.to_string())?;
                for ep in out.episodes {
                    groups.entry((name.to_string(), ep.skill.clone())).or_default().push(ep);
                }
            }
        }
    }
    let mut worst = 0.0f64;
    let (mut frames, mut episodes) = (0, 0);
    for ((scenario, skill), eps) in &groups {
        let policy = build_policy_dataset(eps, 20, 0.1, 1).map_err(|e| e.to_string())?;
        for (ei, ep) in eps.iter().enumerate() {
            let mut ens = TemporalEnsembler::new(policy.ensemble_decay);
            for (t, frame) in ep.frames.iter().enumerate() {
                let chunk = policy.infer(&frame.observation.policy_features()).map_err(|e| e.to_string())?;
                ens.push(chunk);
                let (cmd, _) = ens.next().ok_or("ensembler produced nothing")?;
                let err = command_error(&cmd, &frame.action);
                worst = worst.max(err);
                ensure(err <= 1e-6, || format!("{scenario}/{skill} episode {ei} frame {t}: error {err:e}"))?;
                frames += 1;
            }
            episodes += 1;
        }
    }
    let names: Vec<String> = groups.keys().map(|(s, k)| format!("{s}/{k}")).collect();
    Ok(format!(
        "{episodes} episodes, {frames} frames over {}: max action error {worst:.1e}",
        names.join(", ")
    ))
}

fn random_command(rng: &mut ChaCha8Rng) -> WholeBodyCommand {
    WholeBodyCommand {
        base: BaseCommand {
            linear_velocity: Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)),
            angular_velocity: rng.sample(StandardNormal),
        },
        ee_target: rng.gen_bool(0.6).then(|| random_rotation_pose(rng, 1.0)),
        gripper: [None, Some(GripperCommand::OPEN), Some(GripperCommand::CLOSED)][rng.gen_range(0..3)],
        body: rng.gen_bool(0.4).then(|| BodyCommand {
            height_rate: rng.sample(StandardNormal),
            pitch_rate: rng.sample(StandardNormal),
        }),
    }
}

fn random_camera(rng: &mut ChaCha8Rng, camera: CameraId) -> CameraPayload {
    let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let channels = rng.gen_range(1..5);
    let features = rng.gen_bool(0.5).then(|| random_map(rng, h, w, channels));
    CameraPayload {
        camera,
        channel: if features.is_some() {
            ChannelType::Features
        } else {
            ChannelType::DepthOnly
        },
        height: h,
        width: w,
        features,
        depth: (0..h * w).map(|_| rng.gen::<f64>() * 20.0).collect(),
    }
}

fn random_episode(rng: &mut ChaCha8Rng) -> Episode {
    let len = rng.gen_range(1..60);
    let label_buffer = rng.gen_range(1..15);
    let queries: Vec<String> = (0..rng.gen_range(1..4)).map(|i| format!("object {i}")).collect();
    let labels = label_end_signal(
        len,
        &TerminationConfig {
            label_buffer,
            ..Default::default()
        },
    );
    let proprio_dim = rng.gen_range(1..20);
    let mut time = rng.gen::<f64>();
    let frames = labels
        .into_iter()
        .map(|label| {
            time += rng.gen_range(1e-3..0.1);
            let mut cameras = Vec::new();
            let mut attention = Vec::new();
            for camera in [CameraId::Head, CameraId::Wrist] {
                if rng.gen_bool(0.7) {
                    let c = random_camera(rng, camera);
                    for q in 0..queries.len() {
                        if rng.gen_bool(0.5) {
                            attention.push(AttentionPayload {
                                query: q,
                                camera,
                                map: AttentionMap {
                                    height: c.height,
                                    width: c.width,
                                    values: (0..c.height * c.width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                                },
                            });
                        }
                    }
                    cameras.push(c);
                }
            }
            Frame {
                timestamp: time,
                observation: FrameObservation {
                    proprio: (0..proprio_dim).map(|_| rng.sample(StandardNormal)).collect(),
                    cameras,
                    attention,
                },
                action: random_command(rng),
                end_signal_label: label,
            }
        })
        .collect();
    Episode {
        skill: ["pick_up", "place", "press", "teleop"][rng.gen_range(0..4)].into(),
        text_queries: queries,
        label_buffer,
        frames,
        metadata: EpisodeMetadata {
            scene_id: format!("random:{}", rng.gen::<u32>()),
            seed: rng.gen(),
            operator_id: "generator \u{00e9}".into(),
            success: rng.gen(),
        },
    }
}

fn determinism() -> Check {
    let s = setup("trash")?;
    let a = run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())?.to_json();
    let b = run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())?.to_json();
    ensure(a == b, || "two runs gave different reports".into())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let c = pool
        .install(|| run_scenario(&s, &RunOptions::default()))
        .map_err(|e| e.to_string())?
        .to_json();
    ensure(a == c, || "single-threaded run gave a different report".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes_total = 0;
    for i in 0..100 {
        let ep = random_episode(&mut rng);
        ep.validate().map_err(|e| format!("generator produced an invalid episode: {e}"))?;
        let bytes = write_episode(&ep).map_err(|e| e.to_string())?;
        let back = read_episode(&bytes).map_err(|e| e.to_string())?;
        ensure(back == ep, || format!("episode {i} changed in memory round trip"))?;
        let path = dir.path().join(format!("{i}.bin"));
        save_episode(&ep, &path).map_err(|e| e.to_string())?;
        let loaded = load_episode(&path).map_err(|e| e.to_string())?;
        ensure(loaded == ep, || format!("episode {i} changed in file round trip"))?;
        let again = write_episode(&loaded).map_err(|e| e.to_string())?;
        ensure(again == bytes, || format!("episode {i} re-encodes differently"))?;
        bytes_total += bytes.len();
    }
    Ok(format!(
        "report of {} bytes identical across 3 runs; 100 random episodes ({bytes_total} bytes) round-trip exactly",
        a.len()
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 9] = [
        ("ee map", ee_map),
        ("deadzone", deadzone),
        ("attention", attention),
        ("termination", termination),
        ("control modes (ground grasp)", table4),
        ("long horizon (trash)", long_horizon),
        ("planner", planner),
        ("imitation retrieval", imitation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<30} {detail} [{secs:.2} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<30} {detail} [{secs:.2} s]");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
