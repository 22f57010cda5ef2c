//! Two-stage training on a small synthetic corpus.

use std::sync::Arc;

use mgcrs_core::backbone::{Backbone, BackboneConfig, OptimConfig};
use mgcrs_core::corpus::{generate_synthetic, Corpus, SynthConfig, Task};
use mgcrs_core::train::*;
use mgcrs_core::vocab::Vocabulary;
use mgcrs_core::Error;

fn corpus() -> Corpus {
    let cfg = SynthConfig {
        n_dialogues: 12,
        turns_per_dialogue: 4,
        ..SynthConfig::default()
    };
    generate_synthetic(5, &cfg)
}

fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 16,
        heads: 2,
        ff: 32,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.1,
        ..BackboneConfig::default()
    }
}

fn train_config(e1: usize, e2: usize) -> TrainConfig {
    TrainConfig {
        e1,
        e2,
        batch_size: 8,
        optim: OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn vocab(c: &Corpus) -> Arc<Vocabulary> {
    Arc::new(corpus_vocabulary(c, 1).unwrap())
}

#[test]
fn zero_epochs_leave_parameters_at_initialisation() {
    let c = corpus();
    let v = vocab(&c);
    let bc = backbone_config();
    let (theta, run) = multitask_train(&c, v.clone(), &bc, &train_config(0, 0), None, &mut no_hook).unwrap();
    assert!(run.epoch_losses.is_empty());
    assert_eq!(theta.digest(), Backbone::<f32>::new("theta", bc, v).unwrap().digest());
}

#[test]
fn multitask_loss_decreases() {
    let c = corpus();
    let mut records = Vec::new();
    let (_, run) = multitask_train(
        &c,
        vocab(&c),
        &backbone_config(),
        &train_config(4, 0),
        Some(&c),
        &mut |r: &EpochRecord| records.push(r.clone()),
    )
    .unwrap();
    assert_eq!(run.epoch_losses.len(), 4);
    assert_eq!(run.dev_losses.len(), 4);
    assert!(run.epoch_losses[3] < run.epoch_losses[0]);
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.stage == Stage::Multitask && r.dev_loss.is_some()));
}

#[test]
fn prompt_tuning_leaves_the_shared_model_untouched() {
    let c = corpus();
    let tc = train_config(1, 2);
    let (theta, _) = multitask_train(&c, vocab(&c), &backbone_config(), &tc, None, &mut no_hook).unwrap();
    let before = theta.digest();
    let (tuned, run) = prompt_tune(&theta, Task::T, &c, &tc, None, &mut no_hook).unwrap();
    assert_eq!(theta.digest(), before);
    assert_ne!(tuned.digest(), before);
    assert_eq!(tuned.name, task_checkpoint_name(Task::T));
    assert_eq!(run.stage, Stage::PromptTune(Task::T));
    assert_eq!(run.epoch_losses.len(), 2);
}

#[test]
fn variants_produce_their_checkpoint_sets() {
    let c = corpus();
    let v = vocab(&c);
    let bc = backbone_config();
    let tc = train_config(1, 1);
    let cases = [(AblationVariant::Full, 5, true), (AblationVariant::NoPl, 1, true), (AblationVariant::NoMtl, 4, false)];
    for (variant, count, has_theta) in cases {
        let (set, runs) = ablation_variant(&c, v.clone(), &bc, &tc, variant, &mut no_hook).unwrap();
        assert_eq!(set.len(), count, "{variant:?}");
        assert_eq!(set.theta.is_some(), has_theta);
        for task in Task::ALL {
            assert!(set.model_for(task).is_some());
        }
        if variant == AblationVariant::NoMtl {
            assert!(runs.iter().all(|r| r.epoch_losses.len() == 2));
        }
    }
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let c = corpus();
    let run = || {
        let (set, runs) =
            ablation_variant(&c, vocab(&c), &backbone_config(), &train_config(2, 1), AblationVariant::Full, &mut no_hook)
                .unwrap();
        let digests: Vec<String> = set.all().map(|m| m.digest()).collect();
        let losses: Vec<Vec<f64>> = runs.into_iter().map(|r| r.epoch_losses).collect();
        (digests, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_give_different_models() {
    let c = corpus();
    let train = |seed| {
        let tc = TrainConfig {
            seed,
            ..train_config(1, 0)
        };
        multitask_train(&c, vocab(&c), &backbone_config(), &tc, None, &mut no_hook).unwrap().0.digest()
    };
    assert_ne!(train(1), train(2));
}

#[test]
fn checkpoint_sets_round_trip() {
    let c = corpus();
    let (set, _) = ablation_variant(
        &c,
        vocab(&c),
        &backbone_config(),
        &train_config(1, 1),
        AblationVariant::Full,
        &mut no_hook,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let back = CheckpointSet::load(dir.path()).unwrap();
    let names = |s: &CheckpointSet| s.all().map(|m| (m.name.clone(), m.digest())).collect::<Vec<_>>();
    assert_eq!(names(&back), names(&set));
    let empty = tempfile::tempdir().unwrap();
    assert!(CheckpointSet::load(empty.path()).is_err());
}

#[test]
fn experiment_directory_records_config_and_epochs() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        backbone: backbone_config(),
        train: train_config(2, 0),
    };
    let exp = Experiment::create(dir.path(), &cfg, &c).unwrap();
    multitask_train(&c, vocab(&c), &cfg.backbone, &cfg.train, None, &mut |r: &EpochRecord| {
        exp.record_epoch(r).unwrap()
    })
    .unwrap();
    exp.log("done").unwrap();
    let reopened = Experiment::open(dir.path()).unwrap();
    assert_eq!(reopened.config().unwrap(), cfg);
    assert_eq!(reopened.corpus_digest().unwrap().len(), 64);
    assert_eq!(reopened.epochs().unwrap().len(), 2);
    assert!(reopened.checkpoints_dir().is_dir());
    assert_eq!(reopened.catalog().unwrap(), c.item_catalog);
    assert!(Experiment::open(&dir.path().join("nope")).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    let c = corpus();
    let v = vocab(&c);
    let tc = TrainConfig {
        batch_size: 0,
        ..train_config(1, 0)
    };
    assert!(matches!(
        multitask_train(&c, v.clone(), &backbone_config(), &tc, None, &mut no_hook),
        Err(Error::Config(_))
    ));
    let empty = Corpus {
        dialogues: Vec::new(),
        ..c.clone()
    };
    assert!(multitask_train(&empty, v, &backbone_config(), &train_config(1, 0), None, &mut no_hook).is_err());
}

#[test]
fn segment_dropout_removes_upstream_segments() {
    use mgcrs_core::vocab::{GOAL, ITEM, TOPIC};
    let c = corpus();
    let v = vocab(&c);
    let with = |tag: &str, pairs: &[mgcrs_core::serialize::SerializedPair]| {
        pairs.iter().filter(|p| p.input_text.contains(tag)).count()
    };
    let full = task_pairs(&c, &v, Task::D, &train_config(1, 0)).unwrap();
    let tc = TrainConfig {
        segment_dropout: 0.5,
        ..train_config(1, 0)
    };
    let dropped = task_pairs(&c, &v, Task::D, &tc).unwrap();
    assert_eq!(dropped.len(), full.len());
    assert_eq!(with(GOAL, &full), full.len());
    for tag in [GOAL, TOPIC, ITEM] {
        let kept = with(tag, &dropped);
        assert!(kept > 0 && kept < with(tag, &full), "{tag}: {kept}");
    }
    for (a, b) in full.iter().zip(&dropped) {
        assert_eq!(a.target_text, b.target_text);
    }
    assert_eq!(dropped, task_pairs(&c, &v, Task::D, &tc).unwrap());
    let g = task_pairs(&c, &v, Task::G, &tc).unwrap();
    assert_eq!(g, task_pairs(&c, &v, Task::G, &train_config(1, 0)).unwrap());
    let bad = TrainConfig {
        segment_dropout: 1.0,
        ..train_config(1, 0)
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
