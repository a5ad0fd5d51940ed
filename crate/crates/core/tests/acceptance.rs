//! Acceptance run: one PASS/FAIL line per criterion, all tolerances fixed
//! below. The criteria run sequentially in a single test so their wall-clock
//! budgets are not shared with other tests. Set `ACCEPTANCE_ONLY=3,4` to run
//! a subset.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use prism25d::attention::{
    hierarchical_attention, kernel, kernel_attention, standard_attention, GraphEncoder, KernelLevel, NodeGeometry,
    DEFAULT_BANDWIDTHS,
};
use prism25d::compactor::{EncoderInput, EncoderNode, MatchParams};
use prism25d::geometry::estimate_poses;
use prism25d::graph::{load_graphs, save_graphs, ClassKind, SceneGraph25D};
use prism25d::numcore::{AdamConfig, ParamStore, Tape};
use prism25d::qa::{train, Dataset, ModelConfig, QaInstance, QaModel, TrainConfig};
use prism25d::synth::{
    agreeing_detections, builtin_registry, compactor_partition, generate_corpus, generate_world, oracle_merge,
    CameraMotion, CorpusSpec, NoiseSpec, QaTask, WorldSpec, VOCAB_SIZE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1
const C1_WORLDS: usize = 200;
const C1_BUDGET: Duration = Duration::from_secs(10);
// Criterion 2
const C2_WORLDS: usize = 50;
const C2_BBOX_STD_PX: f64 = 2.0;
const C2_MIN_AGREEMENT: f64 = 0.95;
// Criterion 3
const C3_TARGET_PCT: f64 = 53.6;
const C3_TOL_PCT: f64 = 0.1;
const C3_BUDGET: Duration = Duration::from_secs(5);
// Criterion 4
const C4_WORLDS: usize = 50;
const C4_TOL: f64 = 1e-6;
const C4_BUDGET: Duration = Duration::from_secs(5);
// Criterion 5
const C5_CASES: usize = 1000;
const C5_STOCHASTIC_TOL: f64 = 1e-9;
const C5_EQUIVARIANCE_TOL: f64 = 1e-10;
const C5_BUDGET: Duration = Duration::from_secs(30);
// Criterion 6
const C6_STEP: f64 = 1e-5;
const C6_TOL: f64 = 1e-4;
const C6_BUDGET: Duration = Duration::from_secs(60);
// Criteria 7 and 8
const QA_TRAIN_WORLDS: usize = 500;
const QA_VAL_WORLDS: usize = 100;
const QA_LR: f64 = 3e-3;
const QA_BATCH: usize = 16;
const QA_EPOCHS: usize = 80;
const C7_MIN_TRAIN: f64 = 0.90;
const C7_MIN_VAL: f64 = 0.40;
const C7_BUDGET: Duration = Duration::from_secs(300);
const C8_SEEDS: [u64; 3] = [0, 1, 2];
const C8_SINGLE_SIGMA: f64 = 0.01;
// Criterion 9
const C9_BUDGET: Duration = Duration::from_secs(10);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Runner {
    only: Option<Vec<u32>>,
    failed: Vec<u32>,
}

impl Runner {
    fn new() -> Self {
        let only = std::env::var("ACCEPTANCE_ONLY")
            .ok()
            .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
        Runner { only, failed: vec![] }
    }

    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        if self.only.as_ref().is_some_and(|o| !o.contains(&id)) {
            return;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = out.pass && in_time;
        let budget_note = budget.map_or(String::new(), |b| format!(" / {:.0}s", b.as_secs_f64()));
        let line = format!(
            "{} [{id}] {name}: {}{} ({:.2}s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            if in_time { "" } else { "; over time budget" },
            took.as_secs_f64(),
        );
        // Written to the process stdout directly so the line survives output capture.
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "{line}").unwrap();
        stdout.flush().unwrap();
        if !pass {
            self.failed.push(id);
        }
    }
}

fn sorted(mut classes: Vec<Vec<u32>>) -> Vec<Vec<u32>> {
    classes.iter_mut().for_each(|c| c.sort_unstable());
    classes.sort();
    classes
}

fn mixed_camera(i: usize) -> CameraMotion {
    match i % 2 {
        0 => CameraMotion::Stationary,
        _ => CameraMotion::Translating {
            velocity: [0.1, 0.0, 0.0],
        },
    }
}

fn merge_oracle_equivalence() -> Outcome {
    let params = MatchParams::default();
    let (mut mismatched, mut total, mut worlds_off) = (0, 0, 0);
    for i in 0..C1_WORLDS {
        let world = generate_world(&WorldSpec {
            seed: 10_000 + i as u64,
            camera: mixed_camera(i),
            ..WorldSpec::default()
        })
        .unwrap();
        let oracle = oracle_merge(&world.truth);
        let predicted = compactor_partition(&world.graph().unwrap(), &params).unwrap();
        let n: usize = oracle.iter().map(Vec::len).sum();
        total += n;
        mismatched += n - agreeing_detections(&predicted, &oracle);
        if sorted(predicted) != sorted(oracle) {
            worlds_off += 1;
        }
    }
    outcome(
        mismatched == 0 && worlds_off == 0,
        format!("{mismatched} of {total} static detections mismatched, {worlds_off} of {C1_WORLDS} partitions differ"),
    )
}

fn noise_envelope() -> Outcome {
    let params = MatchParams::new(0.5, 3).unwrap();
    let (mut agree, mut total) = (0, 0);
    for i in 0..C2_WORLDS {
        let world = generate_world(&WorldSpec {
            seed: 20_000 + i as u64,
            camera: mixed_camera(i),
            object_box_px: 64.0,
            noise: NoiseSpec {
                bbox_px: C2_BBOX_STD_PX,
                depth: 0.0,
            },
            ..WorldSpec::default()
        })
        .unwrap();
        let oracle = oracle_merge(&world.truth);
        let predicted = compactor_partition(&world.graph().unwrap(), &params).unwrap();
        agree += agreeing_detections(&predicted, &oracle);
        total += oracle.iter().map(Vec::len).sum::<usize>();
    }
    let rate = agree as f64 / total as f64;
    outcome(
        rate >= C2_MIN_AGREEMENT,
        format!("{agree}/{total} = {:.4} in oracle class (need >= {C2_MIN_AGREEMENT})", rate),
    )
}

/// 30 videos of 35 static and 13 dynamic objects; 23 run four frames and 7
/// run three, so per video there are 180.8 detections of which 35 + 48.97
/// remain after compaction.
fn reduction_corpus_detections() -> (Vec<prism25d::graph::DetectionRecord>, f64) {
    let mut detections = Vec::new();
    let (mut full, mut kept) = (0usize, 0usize);
    for i in 0..30 {
        let n_frames = if i < 23 { 4 } else { 3 };
        let world = generate_world(&WorldSpec {
            seed: 30_000 + i as u64,
            video_id: format!("video{i:02}"),
            n_frames,
            max_frames: Some(4),
            n_static: 35,
            n_dynamic: 13,
            unique_static_classes: false,
            object_box_px: 24.0,
            volume_min: [-5.0, -3.0, 6.0],
            volume_max: [5.0, 3.0, 14.0],
            min_separation: 0.5,
            ..WorldSpec::default()
        })
        .unwrap();
        full += world.detections.len();
        kept += oracle_merge(&world.truth).len() + world.truth.dynamics().count() * n_frames as usize;
        detections.extend(world.detections);
    }
    (detections, 100.0 * (1.0 - kept as f64 / full as f64))
}

fn reduction_metric() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let (detections, oracle_pct) = reduction_corpus_detections();
    prism25d::graph::write_detections(&detections, path("d.jsonl")).unwrap();
    let bin = env!("CARGO_BIN_EXE_prism25d");
    let steps: [&[String]; 3] = [
        &["ingest".into(), "--detections".into(), path("d.jsonl"), "--out".into(), path("g.json"), "--max-frames".into(), "4".into()],
        &["compact".into(), "--graphs".into(), path("g.json"), "--out".into(), path("c.json")],
        &["stats".into(), "--before".into(), path("g.json"), "--after".into(), path("c.json"), "--out".into(), path("s.json")],
    ];
    for args in steps {
        let out = std::process::Command::new(bin).args(args).output().unwrap();
        if !out.status.success() {
            return outcome(false, format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(path("s.json")).unwrap()).unwrap();
    let pct = stats["reduction_pct"].as_f64().unwrap();
    outcome(
        (pct - C3_TARGET_PCT).abs() <= C3_TOL_PCT && (pct - oracle_pct).abs() < 1e-9,
        format!(
            "reduction_pct {pct:.4} (oracle {oracle_pct:.4}, target {C3_TARGET_PCT} +/- {C3_TOL_PCT}); full {:.2}, static {:.2}, dynamic {:.2}",
            stats["full"].as_f64().unwrap(),
            stats["static"].as_f64().unwrap(),
            stats["dynamic"].as_f64().unwrap()
        ),
    )
}

fn registration_recovery() -> Outcome {
    let params = MatchParams::default();
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for i in 0..C4_WORLDS {
        let camera = if i % 2 == 0 {
            CameraMotion::Translating {
                velocity: [0.1 + 0.01 * (i % 5) as f64, 0.02, -0.05],
            }
        } else {
            CameraMotion::Orbiting {
                rate: 0.02 + 0.002 * (i % 7) as f64,
                pivot: [0.0, 0.0, 6.0],
            }
        };
        let world = generate_world(&WorldSpec {
            seed: 40_000 + i as u64,
            camera,
            ..WorldSpec::default()
        })
        .unwrap();
        let estimated = estimate_poses(&world.graph().unwrap(), &params).unwrap();
        if estimated.len() != world.truth.poses.len() {
            return outcome(false, format!("world {i}: {} poses estimated", estimated.len()));
        }
        for (e, t) in estimated.iter().zip(&world.truth.poses) {
            worst_r = worst_r.max(e.pose.rotation_distance(&t.pose));
            worst_t = worst_t.max(e.pose.translation_distance(&t.pose));
        }
    }
    outcome(
        worst_r < C4_TOL && worst_t < C4_TOL,
        format!("worst rotation error {worst_r:.2e}, translation {worst_t:.2e} (tol {C4_TOL:.0e})"),
    )
}

fn encoder_variants(
    enc: &GraphEncoder,
    store: &ParamStore,
    input: &EncoderInput,
) -> [Cols; 4] {
    let mut tape = Tape::new();
    let f = enc.project_nodes(&mut tape, store, input).unwrap().features;
    let weights = NodeGeometry::from_input(input).level_weights(&enc.config.kernel).unwrap();
    let std = standard_attention(&mut tape, store, f, &enc.standard[0]).unwrap();
    let ker = kernel_attention(&mut tape, store, f, &weights[0], &enc.kernel_values).unwrap();
    let hier = hierarchical_attention(&mut tape, store, f, &weights, &enc.kernel_values, &enc.level_mlps).unwrap();
    let comb = enc.combined_encoding(&mut tape, store, f, &weights).unwrap();
    [std, ker, hier, comb].map(|v| tensor_cols(tape.value(v)))
}

fn property_suite() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut note = |ok: bool, what: String| {
        if !ok && failures.len() < 5 {
            failures.push(what);
        }
    };
    let (mut worst_row, mut worst_perm, mut worst_eta) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..C5_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + case as u64);
        let n = rng.random_range(1..9);
        let input = random_input(&mut rng, n, 4, 2, 3.0);

        // Kernel: symmetry, self-similarity, monotone in bandwidth.
        let (a, b) = (&input.nodes[0], &input.nodes[n - 1]);
        let s = rng.random_range(0.01..10.0);
        let level = KernelLevel::tied(s);
        let kab = kernel(&a.position, &a.timestamps, &b.position, &b.timestamps, &level);
        let kba = kernel(&b.position, &b.timestamps, &a.position, &a.timestamps, &level);
        note(kab == kba, format!("case {case}: kernel asymmetric"));
        note(
            kernel(&a.position, &a.timestamps, &a.position, &a.timestamps, &level) == 1.0,
            format!("case {case}: self-similarity"),
        );
        let narrower = KernelLevel::tied(s * rng.random_range(0.1..1.0));
        let k_narrow = kernel(&a.position, &a.timestamps, &b.position, &b.timestamps, &narrower);
        note(k_narrow <= kab, format!("case {case}: kernel grew as bandwidth shrank"));

        // Attention rows: stochastic, self-weight non-decreasing as bandwidth shrinks.
        let geo = NodeGeometry::from_input(&input);
        let wide = geo.attention_weights(&level).unwrap();
        let tight = geo.attention_weights(&narrower).unwrap();
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| wide.get(i, j)).sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            note(
                tight.get(i, i) >= wide.get(i, i) - 1e-15,
                format!("case {case}: self-weight fell as bandwidth shrank"),
            );
        }

        // All four encoders are permutation equivariant.
        let mut store = ParamStore::new();
        let heads = rng.random_range(1..3);
        let enc = GraphEncoder::new(
            encoder_config(&DEFAULT_BANDWIDTHS, heads, 4 * heads, 4, 2, true),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = encoder_variants(&enc, &store, &input);
        let moved = encoder_variants(&enc, &store, &permuted(&input, &perm));
        for (b, m) in base.iter().zip(&moved) {
            let reordered: Cols = perm.iter().map(|&old| b[old].clone()).collect();
            worst_perm = worst_perm.max(max_diff(&reordered, m));
        }

        // One level with an identity MLP is plain kernel attention.
        let mut one_store = ParamStore::new();
        let one = GraphEncoder::new(encoder_config(&[s], heads, 4 * heads, 4, 2, false), &mut one_store, &mut rng).unwrap();
        one.level_mlps[0].set_identity(&mut one_store);
        let mut tape = Tape::new();
        let f = one.project_nodes(&mut tape, &one_store, &input).unwrap().features;
        let w = geo.level_weights(&one.config.kernel).unwrap();
        let hier = hierarchical_attention(&mut tape, &one_store, f, &w, &one.kernel_values, &one.level_mlps).unwrap();
        let plain = kernel_attention(&mut tape, &one_store, f, &w[0], &one.kernel_values).unwrap();
        worst_eta = worst_eta.max(tape.value(hier).max_abs_diff(tape.value(plain)));
    }
    note(worst_row <= C5_STOCHASTIC_TOL, format!("row sums off by {worst_row:.1e}"));
    note(worst_perm <= C5_EQUIVARIANCE_TOL, format!("permutation error {worst_perm:.1e}"));
    note(worst_eta == 0.0, format!("single-level reduction error {worst_eta:.1e}"));
    let detail = format!(
        "{C5_CASES} cases; row-sum error {worst_row:.1e}, permutation error {worst_perm:.1e}, single-level error {worst_eta:.1e}"
    );
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {}", failures.join("; ")))
    }
}

fn gradient_fidelity() -> Outcome {
    let node = |id: u32, kind: ClassKind, position: [f64; 3], t: f64, feature: Vec<f64>| EncoderNode {
        node_id: id,
        kind,
        feature,
        position,
        timestamps: vec![t],
    };
    let input = EncoderInput {
        video_id: "micro".into(),
        nodes: vec![
            node(0, ClassKind::Static, [0.0, 0.1, 5.0], 0.0, vec![0.3, -0.8, 0.5]),
            node(1, ClassKind::Static, [0.4, -0.2, 5.3], 0.25, vec![-0.6, 0.2, 0.9]),
            node(2, ClassKind::Dynamic, [0.2, 0.0, 5.1], 0.5, vec![0.7, 0.4, -0.3, 0.1, 0.05]),
        ],
    };
    let instances = vec![
        QaInstance {
            video_id: "micro".into(),
            question: vec![1, 40],
            candidates: vec![vec![10], vec![11], vec![12]],
            gt_index: 1,
        },
        QaInstance {
            video_id: "micro".into(),
            question: vec![3, 10],
            candidates: vec![vec![70], vec![71], vec![11]],
            gt_index: 0,
        },
    ];
    let cfg = ModelConfig {
        encoder: encoder_config(&DEFAULT_BANDWIDTHS, 2, 4, 3, 2, true),
        vocab_size: VOCAB_SIZE,
        seed: 6,
    };
    let data = Dataset::new(vec![input], instances, &cfg).unwrap();
    let mut model = QaModel::new(cfg).unwrap();
    let template = model.clone();
    let batch: Vec<&QaInstance> = data.instances.iter().collect();
    let report = gradient_check(&mut model.store, C6_STEP, |t, s| {
        let mut m = template.clone();
        m.store = s.clone();
        m.batch_loss(t, &data, &batch).unwrap()
    });
    outcome(
        report.worst < C6_TOL && report.checked == model.store.num_scalars(),
        format!(
            "{} scalars, worst relative error {:.2e} at {} (tol {C6_TOL:.0e})",
            report.checked, report.worst, report.detail
        ),
    )
}

struct QaData {
    train: Dataset,
    val: Dataset,
}

fn qa_data(cfg: &ModelConfig) -> QaData {
    QaData {
        train: dataset(&nearest_static_corpus(0, QA_TRAIN_WORLDS), cfg),
        val: dataset(&nearest_static_corpus(1, QA_VAL_WORLDS), cfg),
    }
}

fn train_run(sigmas: &[f64], seed: u64, data: &QaData) -> (f64, f64) {
    let mut model = fresh_model(qa_model_config(sigmas, seed));
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: QA_LR,
            ..AdamConfig::default()
        },
        batch_size: QA_BATCH,
        epochs: QA_EPOCHS,
        seed,
    };
    let hist = train(&mut model, &data.train, Some(&data.val), &cfg).unwrap();
    let last = hist.last().unwrap();
    (last.train_accuracy, last.val_accuracy.unwrap())
}

fn learning_signal(first: &mut Option<(f64, f64)>) -> Outcome {
    let data = qa_data(&qa_model_config(&DEFAULT_BANDWIDTHS, 0));
    let (tr, va) = train_run(&DEFAULT_BANDWIDTHS, 0, &data);
    *first = Some((tr, va));
    outcome(
        tr >= C7_MIN_TRAIN && va >= C7_MIN_VAL,
        format!(
            "{} train / {} held-out questions, {QA_EPOCHS} epochs: train {tr:.3} (need {C7_MIN_TRAIN}), held-out {va:.3} (need {C7_MIN_VAL})",
            data.train.len(),
            data.val.len()
        ),
    )
}

fn hierarchy_ablation(seed0_four: Option<(f64, f64)>) -> Outcome {
    // Kernel weights are precomputed per dataset, so each arm gets its own.
    let data_four = qa_data(&qa_model_config(&DEFAULT_BANDWIDTHS, 0));
    let data_one = qa_data(&qa_model_config(&[C8_SINGLE_SIGMA], 0));
    let mut four = Vec::new();
    let mut one = Vec::new();
    for seed in C8_SEEDS {
        let four_val = match (seed, seed0_four) {
            (0, Some((_, v))) => v,
            _ => train_run(&DEFAULT_BANDWIDTHS, seed, &data_four).1,
        };
        four.push(four_val);
        one.push(train_run(&[C8_SINGLE_SIGMA], seed, &data_one).1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m4, m1) = (mean(&four), mean(&one));
    outcome(
        m4 >= m1,
        format!("held-out mean over seeds {C8_SEEDS:?}: 4-level {m4:.3} {four:?} vs 1-level {m1:.3} {one:?}"),
    )
}

fn determinism_and_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let registry = builtin_registry();
    let spec = CorpusSpec {
        world: WorldSpec {
            seed: 9,
            n_static: 3,
            n_dynamic: 1,
            ..WorldSpec::default()
        },
        n_worlds: 8,
        task: QaTask::NearestStatic,
        questions_per_world: 1,
        cameras: vec![mixed_camera(0), mixed_camera(1)],
    };
    let mut problems = Vec::new();
    let mut same = |a: &std::path::Path, b: &std::path::Path, what: &str| {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            problems.push(what.to_owned());
        }
    };

    let mut trained_values = Vec::new();
    for tag in ["a", "b"] {
        let corpus = generate_corpus(&spec).unwrap();
        let graphs: Vec<SceneGraph25D> = corpus.worlds.iter().map(|w| w.graph().unwrap()).collect();
        save_graphs(&graphs, &registry, p(&format!("graphs_{tag}.json"))).unwrap();
        let compacted: Vec<SceneGraph25D> = graphs
            .iter()
            .map(|g| prism25d::compactor::register_and_compact(g, &MatchParams::default()).unwrap())
            .collect();
        save_graphs(&compacted, &registry, p(&format!("compact_{tag}.json"))).unwrap();

        let cfg = ModelConfig {
            encoder: encoder_config(&DEFAULT_BANDWIDTHS, 2, 8, 16, 4, true),
            vocab_size: VOCAB_SIZE,
            seed: 4,
        };
        let data = dataset(&corpus, &cfg);
        let mut model = QaModel::new(cfg).unwrap();
        let hist = train(
            &mut model,
            &data,
            None,
            &TrainConfig {
                epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        model.save(p(&format!("model_{tag}.ckpt"))).unwrap();
        trained_values.push(model.store.flat_values());
        std::fs::write(p(&format!("metrics_{tag}.json")), serde_json::to_vec(&hist).unwrap()).unwrap();
    }
    same(&p("graphs_a.json"), &p("graphs_b.json"), "graphs");
    same(&p("compact_a.json"), &p("compact_b.json"), "compacted graphs");
    same(&p("model_a.ckpt"), &p("model_b.ckpt"), "checkpoints");
    same(&p("metrics_a.json"), &p("metrics_b.json"), "metrics");

    let graphs = load_graphs(p("compact_a.json")).unwrap();
    save_graphs(&graphs.graphs, &registry, p("compact_c.json")).unwrap();
    same(&p("compact_a.json"), &p("compact_c.json"), "graph re-save");
    let model = QaModel::load(p("model_a.ckpt")).unwrap();
    model.save(p("model_c.ckpt")).unwrap();
    same(&p("model_a.ckpt"), &p("model_c.ckpt"), "checkpoint re-save");

    let original: Vec<SceneGraph25D> = generate_corpus(&spec)
        .unwrap()
        .worlds
        .iter()
        .map(|w| w.graph().unwrap())
        .collect();
    if load_graphs(p("graphs_a.json")).unwrap().graphs != original {
        problems.push("graph values after load".into());
    }
    if model.store.flat_values() != trained_values[0] {
        problems.push("checkpoint values after load".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "graphs, compacted graphs, checkpoints and metrics byte-identical across runs; graph and checkpoint files re-save bit-exactly".into()
        } else {
            format!("differs: {}", problems.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let mut r = Runner::new();
    r.run(1, "merge-oracle equivalence", Some(C1_BUDGET), merge_oracle_equivalence);
    r.run(2, "noise robustness envelope", None, noise_envelope);
    r.run(3, "node-reduction metric", Some(C3_BUDGET), reduction_metric);
    r.run(4, "registration recovery", Some(C4_BUDGET), registration_recovery);
    r.run(5, "kernel and attention properties", Some(C5_BUDGET), property_suite);
    r.run(6, "gradient fidelity", Some(C6_BUDGET), gradient_fidelity);
    let mut seed0 = None;
    r.run(7, "end-to-end learning signal", Some(C7_BUDGET), || learning_signal(&mut seed0));
    r.run(8, "hierarchy ablation direction", None, || hierarchy_ablation(seed0));
    r.run(9, "determinism and round-trips", Some(C9_BUDGET), determinism_and_round_trips);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
