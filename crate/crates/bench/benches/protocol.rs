use criterion::{criterion_group, criterion_main, Criterion};
use obft_bench::fixture;
use obft_core::model::{forward_plain, Mode};
use obft_core::obfmat::KeySpec;
use obft_core::partition::{partition_model, KeyPolicy};
use obft_core::zones::{serve_zones, DataOwner, ServeMode};
use std::hint::black_box;

fn bench_forward(c: &mut Criterion) {
    let f = fixture::<f32>("toy", 64, 0);
    let (model, _) = partition_model(
        &f.params,
        Some(&f.adapters),
        KeyPolicy::PerBlock,
        KeySpec::Orthogonal,
        0,
    )
    .unwrap();
    let mut session = serve_zones(model, &ServeMode::InProcess).unwrap();
    let mut owner = DataOwner::new("bench", b"secret".to_vec());
    session.register_owner(owner.token());
    let env = owner.seal(&f.batch);
    let token = owner.token().clone();

    let mut g = c.benchmark_group("toy_forward");
    g.sample_size(20);
    g.bench_function("plain", |b| {
        b.iter(|| {
            forward_plain(
                &f.params,
                Some(&f.adapters),
                black_box(&f.batch),
                Mode::Eval,
            )
            .unwrap()
        })
    });
    g.bench_function("protected_in_process", |b| {
        b.iter(|| {
            session
                .forward_protected(black_box(&env), &token, Mode::Eval)
                .unwrap()
        })
    });
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let f = fixture::<f32>("toy", 64, 1);
    let (model, _) = partition_model(
        &f.params,
        Some(&f.adapters),
        KeyPolicy::PerBlock,
        KeySpec::Orthogonal,
        1,
    )
    .unwrap();
    let mut session = serve_zones(model, &ServeMode::InProcess).unwrap();
    let mut owner = DataOwner::new("bench", b"secret".to_vec());
    session.register_owner(owner.token());
    let env = owner.seal(&f.batch);
    let token = owner.token().clone();
    let mut g = c.benchmark_group("toy_train_step");
    g.sample_size(10);
    g.bench_function("protected_in_process", |b| {
        b.iter(|| {
            session
                .train_step_protected(&env, &token, 0.0, Mode::Train { seed: 0 })
                .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_forward, bench_train_step);
criterion_main!(benches);
