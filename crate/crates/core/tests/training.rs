use graphground::config::{LossWeights, ModelConfig, OptimizerConfig, Toggles, WorldConfig};
use graphground::gradcheck::check_op;
use graphground::loss::{loss_terms, stage1_loss, stage2_loss};
use graphground::model::Model;
use graphground::synth::{self, Split};
use graphground::tape::Tape;
use graphground::train::{train_stage_one, train_two_stage, Example};
use graphground::Error;

fn small_config() -> ModelConfig {
    ModelConfig { word_dim: 8, hidden: 8, spatial_dim: 4, mask_grid: 8, mask_source_grid: 16, top_k: 3, ..ModelConfig::default() }
}

fn small_optimizer(iters: usize) -> OptimizerConfig {
    OptimizerConfig {
        stage1_iters: iters,
        stage2_iters: iters,
        stage1_milestones: vec![iters * 2 / 3],
        stage2_milestones: vec![iters * 2 / 3],
        batch_size: 2,
        ..OptimizerConfig::default()
    }
}

fn data(count: usize) -> Vec<Example> {
    let world = WorldConfig { phrases: [2, 3], ..WorldConfig::default() };
    synth::examples(&synth::generate_split(9, Split::Train, count, &world).unwrap()).unwrap()
}

#[test]
fn zero_graph_weights_reduce_stage_two_to_stage_one() {
    let model = Model::new(small_config(), synth::vocabulary()).unwrap();
    let zero = LossWeights { node_match: 0.0, edge_match: 0.0, node_reg: 0.0, ..LossWeights::default() };
    for ex in data(10) {
        let mut tape = Tape::new(&model.store);
        let fwd = model.forward(&mut tape, &ex.input, &Toggles::FULL, true).unwrap();
        let terms = loss_terms(&mut tape, &fwd, &ex.input, &ex.gt, 0.5).unwrap();
        let one = stage1_loss(&mut tape, &terms, &zero);
        let two = stage2_loss(&mut tape, &terms, &zero);
        assert_eq!(tape.scalar(one).to_bits(), tape.scalar(two).to_bits());
    }
}

#[test]
fn scene_without_relations_has_no_edge_loss() {
    let model = Model::new(small_config(), synth::vocabulary()).unwrap();
    let mut ex = data(1).remove(0);
    ex.input.relations.clear();
    let mut tape = Tape::new(&model.store);
    let fwd = model.forward(&mut tape, &ex.input, &Toggles::FULL, true).unwrap();
    let terms = loss_terms(&mut tape, &fwd, &ex.input, &ex.gt, 0.5).unwrap();
    assert!(terms.edge_match.is_none_or(|v| tape.scalar(v) == 0.0));
}

#[test]
fn stage_one_leaves_graph_matching_untouched() {
    let mut model = Model::new(small_config(), synth::vocabulary()).unwrap();
    let before = model.clone();
    train_stage_one(&mut model, &data(6), &Toggles::FULL, &LossWeights::default(), &small_optimizer(5), 0.5).unwrap();
    let trained = model.stage_one_params();
    let mut moved = 0;
    for id in model.store.ids() {
        let same = model.store.get(id) == before.store.get(id);
        if trained.contains(&id) {
            moved += usize::from(!same);
        } else {
            assert!(same, "{} changed in stage one", model.store.name(id));
        }
    }
    assert!(moved > 0);
}

#[test]
fn training_is_deterministic() {
    let train = data(8);
    let run = || {
        let mut model = Model::new(small_config(), synth::vocabulary()).unwrap();
        let report = train_two_stage(&mut model, &train, &Toggles::FULL, &LossWeights::default(), &small_optimizer(6), 0.5).unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id), b.store.get(id));
    }
}

#[test]
fn training_lowers_the_loss() {
    let train = data(12);
    let mut model = Model::new(small_config(), synth::vocabulary()).unwrap();
    let log = train_stage_one(&mut model, &train, &Toggles::FULL, &LossWeights::default(), &small_optimizer(120), 0.5).unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&log.losses[..30]), mean(&log.losses[90..]));
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn exploding_updates_abort() {
    let mut model = Model::new(small_config(), synth::vocabulary()).unwrap();
    let opt = OptimizerConfig { lr: 1e200, clip_norm: 0.0, ..small_optimizer(10) };
    let err = train_stage_one(&mut model, &data(4), &Toggles::FULL, &LossWeights::default(), &opt, 0.5).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

/// End-to-end losses chain every operation, so a handful of entries carry
/// gradients near 1e-9 whose finite differences sit at the roundoff floor.
/// Each tensor must meet the relative bound or stay within 1e-9 absolute.
#[test]
fn composite_losses_match_finite_differences() {
    for op in ["stage1", "stage2"] {
        for seed in 0..5 {
            let report = check_op(op, seed).unwrap();
            for t in &report.tensors {
                assert!(
                    t.max_rel_error <= 1e-4 || t.max_abs_error <= 1e-9,
                    "{op} seed {seed} {}: rel {:.3e} abs {:.3e}",
                    t.name,
                    t.max_rel_error,
                    t.max_abs_error
                );
            }
        }
    }
}
