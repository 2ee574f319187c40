use criterion::{black_box, criterion_group, criterion_main, Criterion};

use kvroute_bench::{bench_example, bench_model, bench_tokens};
use kvroute_core::graph::build_graph;
use kvroute_core::mask::{PressKind, Regime};
use kvroute_core::press::{press_adaptive, press_chunk, score_expected_attention};
use kvroute_core::sweep::{sweep_example, SweepSettings};

fn forward_pass(c: &mut Criterion) {
    let model = bench_model();
    let tokens = bench_tokens(128);
    c.bench_function("forward_128_tokens", |b| {
        b.iter(|| model.forward(black_box(&tokens), None).unwrap())
    });
}

fn score_and_press(c: &mut Criterion) {
    let model = bench_model();
    let tokens = bench_tokens(128);
    let out = model.forward(&tokens, None).unwrap();
    let scores = score_expected_attention(&out.attention, None).unwrap();

    c.bench_function("press_chunk_alpha_0_5", |b| {
        b.iter(|| press_chunk(black_box(&scores), 0.5, 4).unwrap())
    });
    c.bench_function("press_adaptive_alpha_0_5", |b| {
        b.iter(|| press_adaptive(black_box(&scores), 0.5).unwrap())
    });
}

fn graph_and_reachability(c: &mut Criterion) {
    let model = bench_model();
    let tokens = bench_tokens(128);
    let out = model.forward(&tokens, None).unwrap();
    let epsilon = 1.0 / tokens.len() as f64;

    c.bench_function("build_graph_128_tokens", |b| {
        b.iter(|| build_graph(black_box(&out.attention), epsilon).unwrap())
    });

    let graph = build_graph(&out.attention, epsilon).unwrap();
    let q = tokens.len() - 1;
    c.bench_function("reachable_from_last", |b| {
        b.iter(|| graph.reachable(black_box(q), 0).unwrap())
    });
}

fn end_to_end_example(c: &mut Criterion) {
    let model = bench_model();
    let example = bench_example();
    let alphas = [0.0, 0.5, 0.9];
    let settings = SweepSettings::default();

    c.bench_function("sweep_example_3_alphas", |b| {
        b.iter(|| {
            sweep_example(
                black_box(&model),
                black_box(&example),
                &[PressKind::Chunk],
                &[Regime::Agnostic],
                &alphas,
                &settings,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    pipeline,
    forward_pass,
    score_and_press,
    graph_and_reachability,
    end_to_end_example
);
criterion_main!(pipeline);
