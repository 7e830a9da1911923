//! Acceptance run over the ten criteria. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! Pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3 9`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use mmnets::data::{make_opponent_splits, make_splits, OpponentConfig, SceneConfig, OPPONENT_CLASSES};
use mmnets::gradsuite::{self, SUITE_TOLERANCE};
use mmnets::losses::{self, Scores, Slot};
use mmnets::metrics::{depth_metrics, segmentation_metrics, OpponentOracle, DEPTH_EPS};
use mmnets::networks::{
    count_required_networks, decode, encode, ArchConfig, MmNets, Modality, ModalitySpec, SideInfo, Strategy,
};
use mmnets::tensor::{PoolIndices, Shape, Tape, Tensor};
use mmnets::trainer::eval::{evaluate, EvalOptions, Evaluation, Route};
use mmnets::trainer::{
    decode_checkpoint, encode_checkpoint, run_schedule, stage_end_alignment, MonitorConfig, StageConfig, TaskData,
    TaskSpec, TrainState, DESK_BATCH, DESK_ITERATIONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const SCENE_TRAIN: usize = 2000;
const SCENE_TEST: usize = 200;
const CLASSES: usize = 8;
/// Reduced opponent schedule so that three seeds, each trained with and
/// without pseudo-pairs, fit the 20 minute budget.
const OPPONENT_ITERATIONS: [u64; 3] = [1000, 1000, 500];
const OPPONENT_TRAIN: usize = 2000;
const OPPONENT_TEST: usize = 200;
const MONITOR: MonitorConfig = MonitorConfig {
    log_every: 500,
    samples: 32,
};
/// Scene snapshots straddling the stage 1/2 boundary, for the resume check.
const SCENE_SNAPSHOTS: [u64; 2] = [1900, 2100];
/// Iterations into stage 3 at which the opponent pseudo-pair branch is
/// snapshotted.
const OPPONENT_PP_PREFIX: u64 = 50;

struct Verdict {
    id: u8,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        id,
        pass,
        detail: detail.into(),
    }
}

fn report(v: &Verdict) {
    println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

// Criterion 1 -------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let t0 = Instant::now();
    let results = gradsuite::run_suite(0..10).expect("suite runs");
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let failed: BTreeSet<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.case).collect();
    let cases = gradsuite::case_names().len();
    verdict(
        1,
        failed.is_empty() && worst < SUITE_TOLERANCE && secs < 60.0,
        format!("{cases} cases x 10 seeds, max rel error {worst:.2e}, {secs:.1}s, failing: {failed:?}"),
    )
}

// Criterion 2 -------------------------------------------------------------

fn t64(shape: Shape, v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

/// Confusion matrix by direct counting, then IoU per class present.
fn brute_seg(pred: &[usize], gt: &[usize], k: usize) -> (Vec<Option<f64>>, f64, f64) {
    let mut conf = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        conf[g][p] += 1;
    }
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf[c][c];
            let fn_: usize = (0..k).filter(|&j| j != c).map(|j| conf[c][j]).sum();
            let fp: usize = (0..k).filter(|&j| j != c).map(|j| conf[j][c]).sum();
            let denom = tp + fn_ + fp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    let global = (0..k).map(|c| conf[c][c]).sum::<usize>() as f64 / pred.len() as f64;
    (iou, miou, global)
}

/// Threshold accuracies and RMSEs straight from their definitions.
fn brute_depth(pred: &[f32], gt: &[f32]) -> [f64; 5] {
    let n = pred.len() as f64;
    let (mut d, mut lin, mut log) = ([0.0; 3], 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = ((p as f64).max(DEPTH_EPS), (g as f64).max(DEPTH_EPS));
        let ratio = (p / g).max(g / p);
        for (j, thr) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *thr {
                d[j] += 1.0;
            }
        }
        lin += (p - g) * (p - g);
        log += (p.ln() - g.ln()).powi(2);
    }
    [d[0] / n, d[1] / n, d[2] / n, (lin / n).sqrt(), (log / n).sqrt()]
}

fn oracle_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let row = Shape::new(1, 1, 1, 3);
    let zeros = t64(row, vec![0.0; 3]);
    check(losses::berhu_loss(&t64(row, vec![1.0, 2.0, 10.0]), &zeros).unwrap(), 29.0 / 3.0);
    check(losses::berhu_loss(&t64(row, vec![5.0; 3]), &zeros).unwrap(), 13.0);

    let uniform = t64(Shape::new(1, 4, 2, 2), vec![0.0; 16]);
    check(losses::cross_entropy_loss(&uniform, &[0, 1, 2, 3], Scores::Logits).unwrap(), 4f64.ln());
    let half = t64(Shape::new(1, 2, 1, 2), vec![0.5; 4]);
    check(losses::cross_entropy_loss(&half, &[0, 1], Scores::Probs).unwrap(), 2f64.ln());

    let s = segmentation_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    for (got, want) in [(s.per_class_iou[0].unwrap(), 0.5), (s.per_class_iou[1].unwrap(), 2.0 / 3.0), (s.miou, 7.0 / 12.0), (s.global, 0.75)] {
        check(got, want);
    }
    let gt = [0.2f32, 0.5, 0.7, 0.4];
    let scaled: Vec<f32> = gt.iter().map(|g| 1.3 * g).collect();
    let d = depth_metrics(&scaled, &gt, DEPTH_EPS).unwrap();
    for (got, want) in [(d.delta1, 0.0), (d.delta2, 1.0), (d.delta3, 1.0)] {
        check(got, want);
    }

    // Random maps against the brute-force oracles.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let k = rng.gen_range(2..9);
        let pred: Vec<usize> = (0..256).map(|_| rng.gen_range(0..k)).collect();
        let gt: Vec<usize> = (0..256).map(|_| rng.gen_range(0..k)).collect();
        let s = segmentation_metrics(&pred, &gt, k).unwrap();
        let (iou, miou, global) = brute_seg(&pred, &gt, k);
        for (a, b) in s.per_class_iou.iter().zip(&iou) {
            assert_eq!(a.is_some(), b.is_some(), "class presence differs");
            check(a.unwrap_or(0.0), b.unwrap_or(0.0));
        }
        check(s.miou, miou);
        check(s.global, global);

        let g: Vec<f32> = (0..256).map(|_| rng.gen_range(0.05..1.0)).collect();
        let p: Vec<f32> = g.iter().map(|v| v * rng.gen_range(0.5f32..2.0)).collect();
        let m = depth_metrics(&p, &g, DEPTH_EPS).unwrap();
        for (got, want) in [m.delta1, m.delta2, m.delta3, m.rmse_lin, m.rmse_log].iter().zip(brute_depth(&p, &g)) {
            check(*got, want);
        }
    }
    verdict(2, worst <= 1e-6, format!("max abs deviation {worst:.2e} over hand examples and 50 random maps"))
}

// Criterion 3 -------------------------------------------------------------

fn pool_and_rgb_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pool_ok = 0;
    for _ in 0..100 {
        let (n, c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), 2 * rng.gen_range(1..9), 2 * rng.gen_range(1..9));
        let x = Tensor::<f64>::randn(Shape::new(n, c, h, w), 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (y, idx) = t.maxpool2d(xv, 2, 2).unwrap();
        let u = t.unpool(y, &idx, (h, w)).unwrap();
        let (yv, uv) = (t.value(y).clone(), t.value(u).clone());
        // Every pooled value lands on its argmax and nowhere else is written.
        let mut expect = vec![0.0; x.len()];
        for (plane, (vals, ids)) in yv.data().chunks(yv.shape().plane()).zip(idx.flat_index().chunks(yv.shape().plane())).enumerate() {
            for (&v, &i) in vals.iter().zip(ids) {
                assert_eq!(v, x.data()[plane * h * w + i as usize]);
                expect[plane * h * w + i as usize] = v;
            }
        }
        let (y2, _) = {
            let uc = t.constant(uv.clone());
            t.maxpool2d(uc, 2, 2).unwrap()
        };
        let repool_same = t.value(y2).data().iter().zip(yv.data()).all(|(a, b)| a == b || (*b < 0.0 && *a == 0.0));
        if uv.data() == expect.as_slice() && repool_same {
            pool_ok += 1;
        }
    }

    let arch = ArchConfig {
        init_sigma: 0.3,
        ..ArchConfig::default()
    };
    let specs = [ModalitySpec::rgb(), ModalitySpec::depth(), ModalitySpec::seg(CLASSES)];
    let nets = MmNets::<f32>::build(&specs, &arch, Some(Modality::Rgb), 11).unwrap();
    let dec = nets.decoder(Modality::Rgb).unwrap();
    let mut rgb_ok = 0;
    for i in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + i);
        let m = [Modality::Rgb, Modality::Depth, Modality::Seg][i as usize % 3];
        let ch = nets.spec(m).unwrap().channels;
        let img = |r: &mut ChaCha8Rng| Tensor::<f32>::uniform(Shape::new(1, ch, 32, 32), 0.0, 1.0, r);
        let (a, b) = (img(&mut r), img(&mut r));
        let enc = nets.encoder(m).unwrap();
        let ca = encode(&nets.store, enc, &a, 0.0, &mut r).unwrap();
        let cb = encode(&nets.store, enc, &b, 0.0, &mut r).unwrap();
        let mut swapped = ca.clone();
        swapped.index_stack = cb.index_stack.iter().map(Arc::clone).collect::<Vec<Arc<PoolIndices>>>();
        swapped.skip_features = cb.skip_features.clone();
        if ca.index_stack != cb.index_stack && decode(&nets.store, dec, &ca).unwrap() == decode(&nets.store, dec, &swapped).unwrap() {
            rgb_ok += 1;
        }
    }
    verdict(
        3,
        pool_ok == 100 && rgb_ok == 100,
        format!("pool/unpool exact on {pool_ok}/100 inputs; RGB decoder index-invariant on {rgb_ok}/100 codes"),
    )
}

// Criterion 9 -------------------------------------------------------------

fn counting() -> Verdict {
    let pw = count_required_networks(11, Strategy::Pairwise);
    let mm = count_required_networks(11, Strategy::MixAndMatch);
    verdict(9, pw == (55, 55) && mm == (11, 11), format!("pairwise {pw:?}, mix-and-match {mm:?}"))
}

// Scene experiments (criteria 4, 5, 7, 8, 10) -------------------------------

struct SceneRun {
    seed: u64,
    side: SideInfo,
    eval: Evaluation,
    /// Mean alignment factor at the end of each stage.
    af: Vec<f64>,
    snapshots: BTreeMap<u64, Vec<u8>>,
    final_ckpt: Vec<u8>,
    secs: f64,
}

fn scene_data(seed: u64) -> TaskData {
    let split = make_splits(SCENE_TRAIN, SCENE_TEST, seed, &SceneConfig::default());
    TaskData::from_scenes(&split, CLASSES).unwrap()
}

fn scene_arch(side: SideInfo) -> ArchConfig {
    ArchConfig {
        side_info: side,
        ..ArchConfig::default()
    }
}

fn scene_stages() -> Vec<StageConfig> {
    StageConfig::schedule(DESK_ITERATIONS, Modality::Rgb)
}

fn d2s() -> Route {
    Route::Direct {
        from: Slot::Second,
        to: Slot::First,
    }
}

fn d2r2s() -> Route {
    Route::Cascade {
        from: Slot::Second,
        to: Slot::First,
    }
}

fn fused_d() -> Route {
    Route::Fused {
        partner: Slot::Second,
        to: Slot::First,
        alpha: 0.2,
    }
}

/// Trains with `stop_at` pauses at each snapshot so encoded states can be
/// kept without disturbing the run.
fn train_until(state: &mut TrainState, stages: &[StageConfig], data: &TaskData, points: &[u64]) -> BTreeMap<u64, Vec<u8>> {
    let mut snaps = BTreeMap::new();
    for &p in points {
        run_schedule(state, stages, data, &MONITOR, Some(p), |_| {}).unwrap();
        snaps.insert(p, encode_checkpoint(state));
    }
    run_schedule(state, stages, data, &MONITOR, None, |_| {}).unwrap();
    snaps
}

fn run_scene(seed: u64, side: SideInfo, snapshot_at: &[u64]) -> SceneRun {
    let t0 = Instant::now();
    let data = scene_data(seed);
    let task = TaskSpec::scenes(CLASSES);
    let stages = scene_stages();
    let mut state = TrainState::new(task.clone(), &scene_arch(side), DESK_BATCH, seed).unwrap();
    let snapshots = train_until(&mut state, &stages, &data, snapshot_at);
    let af = stage_end_alignment(&state.history, &stages)
        .into_iter()
        .map(|a| a.map_or(f64::NAN, |a| a.mean()))
        .collect();
    let eval = evaluate(&state.nets, &task, &data.test, None, None, &EvalOptions::default()).unwrap();
    let run = SceneRun {
        seed,
        side,
        eval,
        af,
        snapshots,
        final_ckpt: encode_checkpoint(&state),
        secs: t0.elapsed().as_secs_f64(),
    };
    let miou = |r| run.eval.seg(r).map_or(f64::NAN, |s| s.miou);
    println!(
        "  scenes seed {seed} {side}: D→S {:.4}  D→R→S {:.4}  (R,D)→S {:.4}  AF per stage {:.3?}  {:.0}s",
        miou(d2s()),
        miou(d2r2s()),
        miou(fused_d()),
        run.af,
        run.secs
    );
    run
}

fn miou(run: &SceneRun, route: Route) -> f64 {
    run.eval.seg(route).expect("route scored").miou
}

fn zero_pair_ordering(runs: &[&SceneRun]) -> Verdict {
    let gaps: Vec<f64> = runs.iter().map(|r| 100.0 * (miou(r, d2s()) - miou(r, d2r2s()))).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let minutes = runs.iter().map(|r| r.secs).sum::<f64>() / 60.0;
    verdict(
        4,
        mean >= 10.0 && minutes <= 45.0,
        format!("D→S minus D→R→S mIoU per seed {gaps:.1?} points, mean {mean:.1} (need >= 10); {minutes:.1} min (limit 45)"),
    )
}

fn side_info_ordering(all: &[SceneRun]) -> Verdict {
    let by = |seed: u64, side: SideInfo| {
        let r = all.iter().find(|r| r.seed == seed && r.side == side).expect("run exists");
        miou(r, d2s())
    };
    let mut ordered = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let (p, n, s) = (by(seed, SideInfo::PoolIndices), by(seed, SideInfo::None), by(seed, SideInfo::Skip));
        if p > n && n > s {
            ordered += 1;
        }
        detail.push(format!("seed {seed}: indices {:.1} none {:.1} skip {:.1}", 100.0 * p, 100.0 * n, 100.0 * s));
    }
    verdict(5, ordered >= 2, format!("strict order in {ordered}/3 seeds; {}", detail.join("; ")))
}

fn fusion_gain(runs: &[&SceneRun]) -> Verdict {
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (100.0 * miou(r, fused_d()), 100.0 * miou(r, d2s()))).collect();
    let ok = pairs.iter().all(|(f, d)| f >= d);
    verdict(7, ok, format!("(R,D)→S vs D→S mIoU per seed {pairs:.1?}"))
}

fn alignment_dynamics(runs: &[&SceneRun]) -> Verdict {
    let ok = runs.iter().all(|r| r.af.len() >= 2 && r.af[1] > r.af[0]);
    let detail: Vec<String> = runs.iter().map(|r| format!("seed {}: {:.3} -> {:.3}", r.seed, r.af[0], r.af[1])).collect();
    verdict(8, ok, format!("mean AF end of stage 1 -> end of stage 2: {}", detail.join("; ")))
}

// Opponent experiment (criterion 6, part of 10) -----------------------------

struct OpponentRun {
    with_pp: f64,
    without_pp: f64,
    /// State at the end of stage 2, shared by both branches.
    fork: Vec<u8>,
    /// Pseudo-pair branch a few iterations into stage 3.
    pp_prefix: Vec<u8>,
    secs: f64,
}

struct OpponentSetup {
    data: TaskData,
    oracle: OpponentOracle,
    task: TaskSpec,
    arch: ArchConfig,
}

fn opponent_setup(seed: u64) -> OpponentSetup {
    let split = make_opponent_splits(OPPONENT_TRAIN, OPPONENT_TEST, seed, &OpponentConfig::default());
    let imgs: Vec<&Tensor<f32>> = split.d_13.iter().map(|s| &s.theta3).collect();
    let labels: Vec<usize> = split.d_13.iter().map(|s| s.class_label as usize).collect();
    let oracle = OpponentOracle::fit(&Tensor::stack(&imgs).unwrap(), &labels, OPPONENT_CLASSES).unwrap();
    OpponentSetup {
        data: TaskData::from_opponent(&split).unwrap(),
        oracle,
        task: TaskSpec::opponent(),
        arch: ArchConfig::default(),
    }
}

fn opponent_stages(pseudo_pairs: bool) -> Vec<StageConfig> {
    let mut stages = StageConfig::schedule(OPPONENT_ITERATIONS, Modality::Theta1);
    if !pseudo_pairs {
        stages[2].pseudo_pairs = false;
        stages[2].weights.pp = 0.0;
    }
    stages
}

fn theta2_to_theta3(setup: &OpponentSetup, state: &TrainState) -> f64 {
    let opts = EvalOptions {
        cascade: false,
        fusion: false,
        ..EvalOptions::default()
    };
    let ev = evaluate(
        &state.nets,
        &setup.task,
        &setup.data.test,
        setup.data.test_classes.as_deref(),
        Some(&setup.oracle),
        &opts,
    )
    .unwrap();
    ev.accuracy(Route::Direct {
        from: Slot::First,
        to: Slot::Second,
    })
    .expect("Θ2→Θ3 scored")
}

fn run_opponent(seed: u64) -> OpponentRun {
    let t0 = Instant::now();
    let setup = opponent_setup(seed);
    let fork_at = OPPONENT_ITERATIONS[0] + OPPONENT_ITERATIONS[1];
    let with = opponent_stages(true);
    let mut pp = TrainState::new(setup.task.clone(), &setup.arch, DESK_BATCH, seed).unwrap();
    let snaps = train_until(&mut pp, &with, &setup.data, &[fork_at, fork_at + OPPONENT_PP_PREFIX]);
    let mut no_pp = TrainState::new(setup.task.clone(), &setup.arch, DESK_BATCH, seed).unwrap();
    decode_checkpoint(&snaps[&fork_at], &mut no_pp).unwrap();
    run_schedule(&mut no_pp, &opponent_stages(false), &setup.data, &MONITOR, None, |_| {}).unwrap();
    let run = OpponentRun {
        with_pp: theta2_to_theta3(&setup, &pp),
        without_pp: theta2_to_theta3(&setup, &no_pp),
        fork: snaps[&fork_at].clone(),
        pp_prefix: snaps[&(fork_at + OPPONENT_PP_PREFIX)].clone(),
        secs: t0.elapsed().as_secs_f64(),
    };
    println!(
        "  opponent seed {seed}: Θ2→Θ3 accuracy with PP {:.3}, without {:.3}  {:.0}s",
        run.with_pp, run.without_pp, run.secs
    );
    run
}

fn pseudo_pair_gain(runs: &[OpponentRun]) -> Verdict {
    let gains: Vec<f64> = runs.iter().map(|r| 100.0 * (r.with_pp - r.without_pp)).collect();
    let minutes = runs.iter().map(|r| r.secs).sum::<f64>() / 60.0;
    verdict(
        6,
        gains.iter().all(|&g| g >= 5.0) && minutes <= 20.0,
        format!("PP minus no-PP oracle accuracy per seed {gains:.1?} points (need >= 5 each); {minutes:.1} min (limit 20)"),
    )
}

// Criterion 10 ------------------------------------------------------------

fn determinism(scene: &SceneRun, opponent: Option<&OpponentRun>) -> Verdict {
    let data = scene_data(scene.seed);
    let task = TaskSpec::scenes(CLASSES);
    let stages = scene_stages();
    let arch = scene_arch(scene.side);
    let [early, late] = SCENE_SNAPSHOTS;

    // Fresh rerun of the prefix.
    let mut rerun = TrainState::new(task.clone(), &arch, DESK_BATCH, scene.seed).unwrap();
    run_schedule(&mut rerun, &stages, &data, &MONITOR, Some(late), |_| {}).unwrap();
    let rerun_same = encode_checkpoint(&rerun) == scene.snapshots[&late];

    // Resume from the early snapshot inside a state built from another seed.
    let mut resumed = TrainState::new(task.clone(), &arch, DESK_BATCH, 9999).unwrap();
    decode_checkpoint(&scene.snapshots[&early], &mut resumed).unwrap();
    run_schedule(&mut resumed, &stages, &data, &MONITOR, Some(late), |_| {}).unwrap();
    let resume_same = encode_checkpoint(&resumed) == scene.snapshots[&late];

    // Evaluation of the final checkpoint reproduces the reported metrics.
    let mut reloaded = TrainState::new(task.clone(), &arch, DESK_BATCH, 9999).unwrap();
    decode_checkpoint(&scene.final_ckpt, &mut reloaded).unwrap();
    let ev = evaluate(&reloaded.nets, &task, &data.test, None, None, &EvalOptions::default()).unwrap();
    let eval_same = ev == scene.eval;

    let pp_same = opponent.map(|o| {
        let setup = opponent_setup(0);
        let mut st = TrainState::new(setup.task.clone(), &setup.arch, DESK_BATCH, 9999).unwrap();
        decode_checkpoint(&o.fork, &mut st).unwrap();
        let stop = OPPONENT_ITERATIONS[0] + OPPONENT_ITERATIONS[1] + OPPONENT_PP_PREFIX;
        run_schedule(&mut st, &opponent_stages(true), &setup.data, &MONITOR, Some(stop), |_| {}).unwrap();
        encode_checkpoint(&st) == o.pp_prefix
    });
    verdict(
        10,
        rerun_same && resume_same && eval_same && pp_same != Some(false),
        format!(
            "rerun to {late} bitwise {rerun_same}; resume {early}->{late} bitwise {resume_same}; re-evaluation identical {eval_same}; \
             pseudo-pair stage resume bitwise {}",
            pp_same.map_or("not run".to_string(), |b| b.to_string())
        ),
    )
}

fn main() {
    let wanted: BTreeSet<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u8| wanted.is_empty() || wanted.contains(&id);
    mmnets::parallel::init_threads(1);
    let t0 = Instant::now();
    let mut verdicts = Vec::new();
    let mut add = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };

    if want(1) {
        add(gradient_suite());
    }
    if want(2) {
        add(oracle_equivalence());
    }
    if want(3) {
        add(pool_and_rgb_invariance());
    }
    if want(9) {
        add(counting());
    }

    let scenes_needed = [4, 5, 7, 8, 10].into_iter().any(want);
    let mut scene_runs = Vec::new();
    if scenes_needed {
        for seed in SEEDS {
            let snaps: &[u64] = if seed == 0 { &SCENE_SNAPSHOTS } else { &[] };
            scene_runs.push(run_scene(seed, SideInfo::PoolIndices, snaps));
        }
        let main: Vec<&SceneRun> = scene_runs.iter().collect();
        if want(4) {
            add(zero_pair_ordering(&main));
        }
        if want(7) {
            add(fusion_gain(&main));
        }
        if want(8) {
            add(alignment_dynamics(&main));
        }
    }
    let mut opponent_runs = Vec::new();
    if want(6) || want(10) {
        for seed in SEEDS {
            opponent_runs.push(run_opponent(seed));
            if !want(6) {
                break;
            }
        }
        if want(6) {
            add(pseudo_pair_gain(&opponent_runs));
        }
    }
    if want(10) {
        add(determinism(&scene_runs[0], opponent_runs.first()));
    }
    if want(5) {
        for seed in SEEDS {
            for side in [SideInfo::None, SideInfo::Skip] {
                scene_runs.push(run_scene(seed, side, &[]));
            }
        }
        add(side_info_ordering(&scene_runs));
    }

    verdicts.sort_by_key(|v| v.id);
    println!("\nacceptance summary ({:.1} min)", t0.elapsed().as_secs_f64() / 60.0);
    for v in &verdicts {
        report(v);
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
