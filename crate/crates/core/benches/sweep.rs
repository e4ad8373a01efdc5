use criterion::{black_box, criterion_group, criterion_main, Criterion};
use loopstage_core::agents::train::{train_maze, QConfig};
use loopstage_core::env::{make_env, Action, EnvSpec};
use loopstage_core::sweep::{annotation_sweep, optimality_sweep};

fn training(c: &mut Criterion) {
    c.bench_function("train_maze_5x5_200_episodes", |b| {
        b.iter(|| train_maze(5, black_box(3), 200, QConfig::default()).unwrap())
    });
    c.bench_function("optimality_sweep_3_sizes_10_seeds", |b| {
        let seeds: Vec<u64> = (0..10).collect();
        b.iter(|| optimality_sweep(&[3, 4, 5], &seeds, 200, QConfig::default()).unwrap())
    });
    c.bench_function("annotation_sweep_20_pairs", |b| {
        let seeds: Vec<u64> = (0..20).collect();
        b.iter(|| annotation_sweep(5, &seeds, 0.5, 200, QConfig::default()).unwrap())
    });
}

fn stepping(c: &mut Criterion) {
    c.bench_function("coverage_team_100_steps", |b| {
        let mut env = make_env(&EnvSpec::new("coverage_team")).unwrap();
        let joint = [Action::discrete(1), Action::discrete(2)];
        b.iter(|| {
            env.reset(black_box(1)).unwrap();
            for _ in 0..100 {
                if env.step(&joint).unwrap().done() {
                    break;
                }
            }
        })
    });
}

criterion_group!(benches, training, stepping);
criterion_main!(benches);
