//! Parallel versus sequential execution of the batch-parallel kernels.
//!
//! Each workload runs twice, once with the rayon path enabled and once with
//! the runtime switch off, which takes the same code path as a build without
//! the `parallel` feature.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmnets::data::{make_splits, SceneConfig};
use mmnets::networks::{ArchConfig, Modality};
use mmnets::parallel;
use mmnets::tensor::{Shape, Tape, Tensor};
use mmnets::trainer::{run_schedule, MonitorConfig, StageConfig, TaskData, TaskSpec, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(Shape::new(6, 16, 32, 32), 0.0, 1.0, &mut rng);
    let w = Tensor::<f32>::randn(Shape::new(32, 16, 3, 3), 0.0, 0.1, &mut rng);
    let b = Tensor::<f32>::zeros(Shape::new(1, 32, 1, 1));
    let mut g = c.benchmark_group("conv2d_fwd_bwd_6x16x32x32");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.leaf(x.clone(), true), t.leaf(w.clone(), true), t.leaf(b.clone(), true));
                let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
                let loss = t.mean(y);
                t.backward(loss).unwrap()
            })
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

fn scene_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("make_splits_64");
    g.sample_size(10);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| make_splits(48, 16, 7, &SceneConfig::default()))
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

fn training_iterations(c: &mut Criterion) {
    let split = make_splits(48, 16, 1, &SceneConfig::default());
    let data = TaskData::from_scenes(&split, 8).unwrap();
    let arch = ArchConfig::default();
    let stages = StageConfig::schedule([5, 0, 0], Modality::Rgb);
    let monitor = MonitorConfig { log_every: 0, samples: 0 };
    let mut g = c.benchmark_group("train_5_iterations");
    g.sample_size(10);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut st = TrainState::new(TaskSpec::scenes(8), &arch, 6, 1).unwrap();
                run_schedule(&mut st, &stages, &data, &monitor, None, |_| {}).unwrap();
                st.iteration
            })
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, conv_forward_backward, scene_generation, training_iterations);
criterion_main!(benches);
