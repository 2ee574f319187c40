//! Shared fixtures for the pipeline benchmarks: a mid-sized toy model and a
//! representative generated example, built once per benchmark.

use kvroute_core::attention::ToyModel;
use kvroute_core::config::ModelConfig;
use kvroute_core::synthdata::{gen_knowledge_manipulation, EntityPool, SynthExample};

pub fn bench_model() -> ToyModel {
    let cfg = ModelConfig {
        num_layers: 4,
        num_query_heads: 8,
        num_kv_heads: 4,
        head_dim: 16,
        max_seq: 512,
        bytes_per_element: 2,
        seed: 97,
    };
    ToyModel::build(&cfg).expect("benchmark model config is valid")
}

pub fn bench_example() -> SynthExample {
    gen_knowledge_manipulation(&EntityPool::canonical(), 1, 97)
        .expect("benchmark example generates")
        .remove(0)
}

pub fn bench_tokens(n: usize) -> Vec<u32> {
    (0..n as u32).map(|i| 131 + i * 7).collect()
}
