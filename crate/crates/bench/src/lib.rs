//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphground::config::Config;
use graphground::matcher::{EdgeScores, MatchInstance};
use graphground::synth::{self, Split};
use graphground::train::Example;

/// Random instance with `n` phrases, `k` candidates and a chain of edges.
pub fn chain_instance(n: usize, k: usize, beta: f64, seed: u64) -> MatchInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = Array2::from_shape_fn((n, k), |_| rng.random_range(0.0..1.0));
    let edges = (1..n)
        .map(|j| EdgeScores { subject: j - 1, object: j, scores: Array2::from_shape_fn((k, k), |_| rng.random_range(0.0..1.0)) })
        .collect();
    MatchInstance { nodes, edges, beta }
}

/// The first `count` validation examples of the default benchmark.
pub fn default_examples(count: usize) -> Vec<Example> {
    let mut config = Config::default();
    config.data.val = count;
    synth::examples(&synth::load_split(&config, Split::Val).expect("generated split")).expect("valid examples")
}
