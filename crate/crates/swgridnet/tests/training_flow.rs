//! End-to-end flows through the training engine: run a real (tiny)
//! training loop to disk, reload the checkpoint, and confirm that what
//! came back is indistinguishable from what was trained — then that
//! identical seeds reproduce every artifact byte for byte.

use std::fs;
use std::path::Path;

use swgridnet::checkpoint;
use swgridnet::data::{generate_synth, SynthData, SynthSpec};
use swgridnet::model::{NetworkConfig, SwGridNetwork};
use swgridnet::train::{
    cycle_ends, ensemble_predict, ensemble_probabilities, evaluate, label_accuracy,
    RunArtifacts, TrainConfig, TrainSession,
};

fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        dims: 2,
        side: 2,
        base_channels: 4,
        blocks: 1,
        unit_depth: 1,
        classes: 2,
        image_size: 8,
        input_channels: 3,
    }
}

fn tiny_data() -> SynthData {
    generate_synth(&SynthSpec {
        classes: 2,
        train_per_class: 8,
        test_per_class: 4,
        image_size: 8,
        channels: 3,
        noise: 0.05,
        seed: 11,
    })
    .unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr_max: 0.05,
        lr_min: 0.0,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 8,
        restart_period: 2,
        restart_mult: 2,
        epochs: 3,
        seed: 3,
        augment: false,
        augment_pad: 0,
        anneal_per_iteration: false,
    }
}

fn run_once(dir: &Path) -> (SwGridNetwork<f32>, RunArtifacts) {
    let net = SwGridNetwork::<f32>::seeded(tiny_network_config(), 21).unwrap();
    let data = tiny_data();
    let mut session = TrainSession::new(&net, tiny_train_config()).unwrap();
    let artifacts = session.run(&data.train, &data.test, dir, |_| {}).unwrap();
    (net, artifacts)
}

/// The metrics CSV with the wall-clock column (the only timing-dependent
/// field) stripped from every row.
fn metrics_without_wall_clock(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let (rest, _wall) = line.rsplit_once(',').unwrap();
        out.push_str(rest);
        out.push('\n');
    }
    out
}

#[test]
fn run_writes_expected_artifacts_and_checkpoint_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (net, artifacts) = run_once(dir.path());

    let cfg = tiny_train_config();
    assert_eq!(artifacts.rows.len(), cfg.epochs);
    for (i, row) in artifacts.rows.iter().enumerate() {
        assert_eq!(row.epoch, i);
        assert!(row.train_loss.is_finite() && row.test_loss.is_finite());
        assert!((0.0..=1.0).contains(&row.train_acc));
        assert!((0.0..=1.0).contains(&row.test_acc));
    }
    // Snapshots land exactly at annealing-cycle boundaries inside the run.
    let boundaries = cycle_ends(&cfg);
    assert_eq!(boundaries, vec![2]);
    assert_eq!(artifacts.snapshots.len(), 1);
    assert!(artifacts.snapshots[0].ends_with("snapshot-epoch0002.ckpt"));
    assert!(artifacts.snapshots[0].is_file());
    assert!(artifacts.final_checkpoint.ends_with("final.ckpt"));
    assert!(dir.path().join("metrics.csv").is_file());

    // The reloaded network must be functionally identical, not merely close:
    // the checkpoint stores exact f32 words.
    let reloaded = checkpoint::load(&artifacts.final_checkpoint).unwrap();
    assert_eq!(reloaded.config(), net.config());
    let data = tiny_data();
    let (loss_a, acc_a) = evaluate(&net, &data.test, 8).unwrap();
    let (loss_b, acc_b) = evaluate(&reloaded, &data.test, 8).unwrap();
    assert_eq!(loss_a.to_bits(), loss_b.to_bits());
    assert_eq!(acc_a, acc_b);
}

#[test]
fn identical_seeds_reproduce_every_artifact() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (_, art_a) = run_once(dir_a.path());
    let (_, art_b) = run_once(dir_b.path());

    // Metrics match except for wall-clock timing, which is the one
    // legitimately non-deterministic column.
    assert_eq!(
        metrics_without_wall_clock(&dir_a.path().join("metrics.csv")),
        metrics_without_wall_clock(&dir_b.path().join("metrics.csv"))
    );
    for (a, b) in art_a.rows.iter().zip(&art_b.rows) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }

    // Checkpoints are byte-identical.
    assert_eq!(
        fs::read(&art_a.final_checkpoint).unwrap(),
        fs::read(&art_b.final_checkpoint).unwrap()
    );
    assert_eq!(art_a.snapshots.len(), art_b.snapshots.len());
    for (a, b) in art_a.snapshots.iter().zip(&art_b.snapshots) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}

#[test]
fn ensemble_of_identical_models_matches_the_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, artifacts) = run_once(dir.path());
    let data = tiny_data();

    let copies: Vec<SwGridNetwork<f32>> =
        (0..3).map(|_| checkpoint::load(&artifacts.final_checkpoint).unwrap()).collect();
    let refs: Vec<&SwGridNetwork<f32>> = copies.iter().collect();

    let single = ensemble_predict(&refs[..1], &data.test, 4).unwrap();
    let ensemble = ensemble_predict(&refs, &data.test, 4).unwrap();
    assert_eq!(single, ensemble, "averaging identical models must not change labels");

    // Averaged probabilities stay a proper distribution per record.
    let probs = ensemble_probabilities(&refs, &data.test, 4).unwrap();
    let classes = copies[0].config().classes;
    assert_eq!(probs.len(), data.test.len() * classes);
    for row in probs.chunks(classes) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "probability row sums to {sum}");
    }

    let acc = label_accuracy(&ensemble, &data.test).unwrap();
    let (_, eval_acc) = evaluate(&copies[0], &data.test, 4).unwrap();
    assert_eq!(acc, eval_acc);
}
