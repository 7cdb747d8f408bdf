mod common;

use dbsfm::model::{init_params, ModelConfig, ParamSubset, Tape};
use dbsfm::spectral::WelchConfig;
use dbsfm::synthgen::CohortConfig;
use dbsfm::tokenizer::{plan_mask, token_freqs, MaskPlan, Sequence, Symptom};
use dbsfm::training::{
    chronological_split, finetune, fit_scaling, masked_batch_loss, pretrain, AdamWConfig, FinetuneConfig,
    PretrainConfig, StopReason,
};
use dbsfm::Error;

fn freqs() -> Vec<f64> {
    token_freqs(&WelchConfig::default())
}

fn cohort_sequences(n: usize, days: f64, seed: u64) -> Vec<Sequence> {
    common::cohort(
        &CohortConfig {
            n_subjects: n,
            days,
            ..CohortConfig::default()
        },
        seed,
    )
    .into_iter()
    .flat_map(|s| s.sequences)
    .collect()
}

#[test]
fn one_sequence_one_epoch_is_one_step() {
    let seqs = cohort_sequences(2, 1.0 / 48.0, 1);
    assert_eq!(seqs.len(), 2);
    let hyper = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let out = pretrain(&seqs[..1], &freqs(), &ModelConfig::default(), &hyper, 3).unwrap();
    assert_eq!(out.report.optimizer_steps, 1);
    assert_eq!(out.report.epochs_run, 1);
    assert!(out.report.train_loss[0].is_finite());
    assert_eq!(out.report.stop_reason, StopReason::MaxEpochs);
}

#[test]
fn pretraining_learns_and_is_reproducible() {
    // 6 subjects x 40 sequences.
    let seqs = cohort_sequences(6, 40.0 / 48.0, 2);
    assert_eq!(seqs.len(), 240);
    let hyper = PretrainConfig {
        epochs: 50,
        ..PretrainConfig::default()
    };
    let cfg = ModelConfig::default();
    let a = pretrain(&seqs, &freqs(), &cfg, &hyper, 5).unwrap();
    let l = &a.report.train_loss;
    assert_eq!(l.len(), 50);
    assert!(l[49] < 0.5 * l[0], "first {} last {}", l[0], l[49]);
    let b = pretrain(&seqs, &freqs(), &cfg, &hyper, 5).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.report.train_loss), bits(&b.report.train_loss));
    assert_eq!(bits(&a.report.val_loss), bits(&b.report.val_loss));
}

#[test]
fn scaling_comes_from_training_split_only() {
    let mut seqs = cohort_sequences(2, 0.25, 3);
    let hyper = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let cfg = ModelConfig::default();
    let (train, val) = chronological_split(&seqs, hyper.val_fraction);
    assert!(!val.is_empty());
    let a = pretrain(&seqs, &freqs(), &cfg, &hyper, 1).unwrap();
    let refs: Vec<&Sequence> = train.iter().map(|&i| &seqs[i]).collect();
    assert_eq!(a.scaling, fit_scaling(&refs, &freqs(), 0.0).unwrap());
    for &i in &val {
        for tok in &mut seqs[i].tokens {
            for v in &mut tok.features[..124] {
                *v += 5.0;
            }
        }
    }
    let b = pretrain(&seqs, &freqs(), &cfg, &hyper, 1).unwrap();
    assert_eq!(a.scaling, b.scaling);
}

#[test]
fn batch_order_does_not_change_loss() {
    let seqs = cohort_sequences(2, 1.0 / 24.0, 4);
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 2).unwrap();
    let plans: Vec<MaskPlan> = (0..2).map(|i| plan_mask(15, 0.3, 40 + i)).collect();
    let w = vec![1.0; 125];
    let loss = |order: [usize; 2]| {
        let batch: Vec<(&Sequence, &MaskPlan)> = order.iter().map(|&i| (&seqs[i], &plans[i])).collect();
        let mut tape = Tape::new();
        let l = masked_batch_loss(&mut tape, &params, &cfg, &batch, &w).unwrap();
        tape.value(l).data[0]
    };
    assert!((loss([0, 1]) - loss([1, 0])).abs() < 1e-12);
}

fn constant_labels(mut seqs: Vec<Sequence>, v: f64) -> Vec<Sequence> {
    for s in &mut seqs {
        s.labels = Some(vec![[v, v]; s.len()]);
    }
    seqs
}

#[test]
fn finetune_converges_toward_constant_labels() {
    let seqs = constant_labels(cohort_sequences(2, 0.25, 5), 2.5);
    let cfg = ModelConfig::default();
    let ckpt = init_params(&cfg, 7).unwrap();
    let hyper = FinetuneConfig {
        max_epochs: 20,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let (_, report) = finetune(&ckpt, &cfg, &seqs, &[Symptom::Bradykinesia], &hyper, 1).unwrap();
    let best = report.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best < report.initial_val_loss, "{report:?}");
}

#[test]
fn frozen_backbone_is_bit_identical() {
    let seqs = cohort_sequences(2, 0.25, 6);
    let cfg = ModelConfig::default();
    let ckpt = init_params(&cfg, 8).unwrap();
    let hyper = FinetuneConfig {
        max_epochs: 3,
        freeze_backbone: true,
        ..FinetuneConfig::default()
    };
    let (params, _) = finetune(&ckpt, &cfg, &seqs, &[Symptom::Dyskinesia], &hyper, 1).unwrap();
    for (name, t) in ckpt.iter() {
        assert_eq!(params.get(name).unwrap(), t, "{name}");
    }
    assert!(params.has_head(Symptom::Dyskinesia));
    assert!(!params.has_head(Symptom::Bradykinesia));

    let thawed = FinetuneConfig {
        freeze_backbone: false,
        ..hyper
    };
    let (params, _) = finetune(&ckpt, &cfg, &seqs, &[Symptom::Dyskinesia], &thawed, 1).unwrap();
    assert!(ckpt.iter().any(|(n, t)| ParamSubset::Encoder.contains(n) && params.get(n).unwrap() != t));
    for (name, t) in ckpt.iter().filter(|(n, _)| n.starts_with("recon.")) {
        assert_eq!(params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let seqs = cohort_sequences(2, 0.5, 7);
    let cfg = ModelConfig::default();
    let ckpt = init_params(&cfg, 9).unwrap();
    let hyper = FinetuneConfig {
        max_epochs: 40,
        patience: 2,
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let (params, report) = finetune(&ckpt, &cfg, &seqs, &[Symptom::Bradykinesia], &hyper, 4).unwrap();
    assert!(report.best_epoch >= 1 && report.best_epoch <= report.epochs_run);
    let best = report.val_loss[report.best_epoch - 1];
    assert!(report.val_loss.iter().all(|&v| v >= best));
    if report.stop_reason == StopReason::EarlyStop {
        assert_eq!(report.epochs_run, report.best_epoch + 2);
    }
    let truncated = FinetuneConfig {
        max_epochs: report.best_epoch,
        ..hyper
    };
    let (replay, _) = finetune(&ckpt, &cfg, &seqs, &[Symptom::Bradykinesia], &truncated, 4).unwrap();
    assert_eq!(params, replay);
}

#[test]
fn finetune_rejects_bad_inputs() {
    let mut seqs = cohort_sequences(2, 1.0 / 24.0, 8);
    let cfg = ModelConfig::default();
    let ckpt = init_params(&cfg, 1).unwrap();
    let hyper = FinetuneConfig::default();
    let other = ModelConfig {
        d_model: 32,
        ..ModelConfig::default()
    };
    assert!(matches!(
        finetune(&ckpt, &other, &seqs, &[Symptom::Bradykinesia], &hyper, 1),
        Err(Error::Config(_))
    ));
    seqs[1].labels = None;
    assert!(matches!(
        finetune(&ckpt, &cfg, &seqs, &[Symptom::Bradykinesia], &hyper, 1),
        Err(Error::Validation(_))
    ));
    assert!(pretrain(&[], &freqs(), &cfg, &PretrainConfig::default(), 1).is_err());
}
