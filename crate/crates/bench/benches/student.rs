use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use skd_bench::{desk_student, synthetic_set};
use skd_core::distiller::{finetune, Objective};
use skd_core::{SelectionMask, Supervision, TrainConfig};

fn bench_forward(c: &mut Criterion) {
    let set = synthetic_set(10, 30);
    let model = desk_student(&set);
    let x = set.records()[0].degraded_inputs[0].clone();
    c.bench_function("forward/desk_default", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
}

fn bench_gradient(c: &mut Criterion) {
    let set = synthetic_set(10, 5);
    let model = desk_student(&set);
    let mask = SelectionMask::full(set.len());
    let objective = Objective::new(Supervision::Sc);
    c.bench_function("loss_and_gradient/sc_200_samples", |b| {
        b.iter(|| objective.loss_and_gradient(&model, &set, Some(&mask)).unwrap())
    });
}

fn bench_epoch(c: &mut Criterion) {
    let set = synthetic_set(10, 30);
    let config = TrainConfig {
        supervision: Supervision::Dc,
        epochs: 1,
        ..TrainConfig::default()
    };
    c.bench_function("finetune/one_epoch_dc", |b| {
        b.iter(|| {
            let mut model = desk_student(&set);
            finetune(&mut model, &set, None, &config).unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_gradient, bench_epoch);
criterion_main!(benches);
