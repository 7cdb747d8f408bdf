//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dbsfm::harness::{run_loso, train_fold, write_cv_outputs, CvConfig, CvSummary, FoldOutcome, LosoSetup, SubjectData};
use dbsfm::loss_scaling::{alignment_residual, scaled_masked_mae, scaling_vector, MeanLogProfile};
use dbsfm::model::{
    encoder_forward, init_params, param_count, read_checkpoint, write_checkpoint, ModelConfig, ParamStore,
    ParamSubset, Tape,
};
use dbsfm::seed::derive_seed;
use dbsfm::spectral::{welch_psd, WelchConfig};
use dbsfm::synthgen::CohortConfig;
use dbsfm::tensor::Matrix;
use dbsfm::tokenizer::{plan_mask, token_freqs, MaskPlan, Sequence};
use dbsfm::training::{masked_batch_loss, per_column_masked_mae, pretrain, FinetuneConfig, PretrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn names(prefix: &str, store: &ParamStore) -> ParamSubset {
    ParamSubset::Names(store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect())
}

fn c1_parameter_count() -> Outcome {
    let cfg = ModelConfig::default();
    let store = init_params(&cfg, 0).unwrap();
    let count = |p: &str| param_count(&store, &names(p, &store)).unwrap();
    let terms = [
        ("projection", count("proj."), 8064),
        ("positions", count("pos_enc"), 1024),
        ("cls", count("cls"), 64),
        ("layer0", count("layer0."), 21088),
        ("layer1", count("layer1."), 21088),
        ("final norm", count("final_ln."), 128),
    ];
    let total = param_count(&store, &ParamSubset::Encoder).unwrap();
    let bad: Vec<String> = terms
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n} {got}!={want}"))
        .collect();
    check(
        total == 51456 && bad.is_empty(),
        format!("encoder parameters {total}, decomposition mismatches: {bad:?}"),
    )
}

fn c2_gradient_check() -> Outcome {
    let cfg = ModelConfig {
        seq_positions: 4,
        ..ModelConfig::toy()
    };
    let mut params = init_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (_, t) in params.iter_mut() {
        for v in &mut t.data {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let seqs = [
        common::toy_sequence("A", 3, 3, 0, |t, j| ((t * 3 + j) as f64 * 0.7).sin() * 2.0),
        common::toy_sequence("A", 3, 3, 360, |t, j| ((t * 5 + j * 2) as f64 * 0.3).cos() + 0.5),
    ];
    let plans = [
        MaskPlan {
            masked_indices: vec![1],
            seed_used: 0,
        },
        MaskPlan {
            masked_indices: vec![0, 2],
            seed_used: 0,
        },
    ];
    let batch: Vec<(&Sequence, &MaskPlan)> = seqs.iter().zip(&plans).collect();
    let weights = [0.4, 1.1, 0.8];
    let loss_of = |p: &ParamStore| {
        let mut tape = Tape::new();
        let l = masked_batch_loss(&mut tape, p, &cfg, &batch, &weights).unwrap();
        tape.value(l).data[0]
    };
    let mut tape = Tape::new();
    let l = masked_batch_loss(&mut tape, &params, &cfg, &batch, &weights).unwrap();
    let grads = tape.backward(l, &params).unwrap();

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let n = params.get(name).unwrap().data.len();
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data[i] += h;
            let up = loss_of(&p);
            p.get_mut(name).unwrap().data[i] -= 2.0 * h;
            let down = loss_of(&p);
            *slot = (up - down) / (2.0 * h);
        }
        let an = &grads.get(name).unwrap().data;
        let scale = an.iter().chain(&fd).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
        let err = an.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs())) / scale;
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    check(
        worst.0 < 1e-5,
        format!("{} tensors, max relative error {:.2e} ({})", names.len(), worst.0, worst.1),
    )
}

fn c3_spectral() -> Outcome {
    let cfg = WelchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let windows = 100;
    let mut mean = vec![0.0; cfg.n_bins()];
    for _ in 0..windows {
        let x: Vec<f64> = (0..30_000).map(|_| rng.sample(StandardNormal)).collect();
        for (m, p) in mean.iter_mut().zip(welch_psd(&x, &cfg).unwrap().power) {
            *m += p / windows as f64;
        }
    }
    // Unit-variance white noise: one-sided density 2/fs, half that at DC and Nyquist.
    let last = mean.len() - 1;
    let flat = mean.iter().enumerate().fold(0.0f64, |m, (i, p)| {
        let want = if i == 0 || i == last { 1.0 / cfg.fs_hz } else { 2.0 / cfg.fs_hz };
        m.max((p / want - 1.0).abs())
    });

    let sine: Vec<f64> = (0..30_000)
        .map(|n| (2.0 * std::f64::consts::PI * 10.0 * n as f64 / cfg.fs_hz + 0.3).sin())
        .collect();
    let p = welch_psd(&sine, &cfg).unwrap().power;
    let total: f64 = p.iter().sum();
    let near: f64 = p[8..=12].iter().sum();
    check(
        flat < 0.2 && near / total >= 0.95,
        format!("white-noise max deviation {:.3}, sine power within 2 Hz {:.4}", flat, near / total),
    )
}

fn c4_loss_scaling() -> Outcome {
    let freqs = [1.0, 10.0, 100.0];
    let k = scaling_vector(&MeanLogProfile { p: vec![0.0; 3] }, &freqs, 0.0).unwrap().k;
    let k_err = k.iter().zip([0.0, 1.0, 2.0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let f124: Vec<f64> = (1..=124).map(f64::from).collect();
    let p: Vec<f64> = f124.iter().map(|f| 3.7 - f.log10()).collect();
    let resid = alignment_residual(&MeanLogProfile { p }, &f124).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = Matrix::from_vec(15, 125, (0..15 * 125).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
    let pred = Matrix::from_vec(15, 125, (0..15 * 125).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
    let mask = [0usize, 4, 7, 11, 14];
    let got = scaled_masked_mae(&target, &pred, &[1.0; 125], &mask).unwrap();
    let plain = mask
        .iter()
        .flat_map(|&r| target.row(r).iter().zip(pred.row(r)).map(|(a, b)| (a - b).abs()))
        .sum::<f64>()
        / (mask.len() * 125) as f64;
    check(
        k_err < 1e-12 && resid < 1e-9 && (got - plain).abs() < 1e-12,
        format!(
            "k error {k_err:.1e}, residual {resid:.1e}, unit-weight vs plain MAE {:.1e}",
            (got - plain).abs()
        ),
    )
}

fn c5_frequency_bias() -> Outcome {
    let cohort_cfg = CohortConfig {
        n_subjects: 4,
        days: 1.0,
        beta_range: [1.5, 1.5],
        ..CohortConfig::default()
    };
    let data = common::cohort(&cohort_cfg, 31);
    let train: Vec<Sequence> = data[..3].iter().flat_map(|s| s.sequences.clone()).collect();
    let test = &data[3].sequences;
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 16,
        n_heads: 2,
        n_layers: 1,
        ..ModelConfig::default()
    };
    let freqs = token_freqs(&WelchConfig::default());
    let plans: Vec<MaskPlan> = (0..test.len()).map(|i| plan_mask(15, 0.3, derive_seed(77, "eval", i as u64))).collect();
    let items: Vec<(&Sequence, &MaskPlan)> = test.iter().zip(&plans).collect();
    let high_mae = |scaled: bool| {
        let hyper = PretrainConfig {
            epochs: 30,
            scaled_loss: scaled,
            ..PretrainConfig::default()
        };
        let out = pretrain(&train, &freqs, &cfg, &hyper, 13).unwrap();
        let cols = per_column_masked_mae(&out.params, &cfg, &items, 64).unwrap();
        let hi: Vec<f64> = freqs.iter().zip(&cols).filter(|(f, _)| **f >= 50.0).map(|(_, e)| *e).collect();
        hi.iter().sum::<f64>() / hi.len() as f64
    };
    let scaled = high_mae(true);
    let plain = high_mae(false);
    check(
        scaled < plain,
        format!("held-out MAE over bins >= 50 Hz: scaled {scaled:.4}, unscaled {plain:.4}"),
    )
}

fn c6_masking() -> Outcome {
    let draws = 10_000;
    let mut freq = [0usize; 15];
    let mut wrong = 0;
    for i in 0..draws {
        let plan = plan_mask(15, 0.3, derive_seed(2, "mask", i));
        if plan.masked_indices.len() != 5 {
            wrong += 1;
        }
        for &t in &plan.masked_indices {
            freq[t] += 1;
        }
    }
    let dev = freq
        .iter()
        .map(|&c| (c as f64 / draws as f64 - 1.0 / 3.0).abs())
        .fold(0.0f64, f64::max);
    check(
        wrong == 0 && dev <= 0.02,
        format!("{wrong} plans without 5 masks, max position-frequency deviation {dev:.4}"),
    )
}

fn c7_recovery(summary: &CvSummary) -> Outcome {
    let brady = &summary.stats[0];
    let perm_ok = summary.stats.iter().all(|s| s.mean_abs_r_permuted.is_some_and(|v| v < 0.15));
    let perms: Vec<String> = summary
        .stats
        .iter()
        .map(|s| format!("{} {:.3}", s.symptom.name(), s.mean_abs_r_permuted.unwrap_or(f64::NAN)))
        .collect();
    check(
        summary.n_failed == 0 && brady.mean_r.is_some_and(|r| r >= 0.5) && perm_ok,
        format!(
            "bradykinesia mean r {:.3} +- {:.3} over {} folds, dyskinesia mean r {:.3}, permutation mean |r|: {}",
            brady.mean_r.unwrap_or(f64::NAN),
            brady.std_r.unwrap_or(f64::NAN),
            brady.n_defined,
            summary.stats[1].mean_r.unwrap_or(f64::NAN),
            perms.join(", ")
        ),
    )
}

fn small_setup_parts() -> (ModelConfig, Vec<f64>, PretrainConfig, FinetuneConfig, CvConfig) {
    (
        ModelConfig::default(),
        token_freqs(&WelchConfig::default()),
        PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
        FinetuneConfig {
            max_epochs: 3,
            ..FinetuneConfig::default()
        },
        CvConfig {
            permutation_control: true,
            ..CvConfig::default()
        },
    )
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn c8_determinism(small: &[SubjectData]) -> Outcome {
    let (model, freqs, pre, ft, cv) = small_setup_parts();
    let setup = LosoSetup {
        model: &model,
        freqs: &freqs,
        pretrain: &pre,
        finetune: &ft,
        cv: &cv,
        seed: 4,
    };
    let a = run_loso(small, &setup, 1).unwrap();
    let b = run_loso(small, &setup, 2).unwrap();
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    write_cv_outputs(&a, da.path()).unwrap();
    write_cv_outputs(&b, db.path()).unwrap();
    let files = dir_bytes(da.path());
    let same_outputs = files == dir_bytes(db.path());

    let train: Vec<Sequence> = small.iter().flat_map(|s| s.sequences.clone()).collect();
    let p1 = pretrain(&train, &freqs, &model, &pre, 21).unwrap();
    let p2 = pretrain(&train, &freqs, &model, &pre, 21).unwrap();
    let curves = p1.report == p2.report && p1.params == p2.params;

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, &p1.params).unwrap();
    let (cfg2, loaded) = read_checkpoint(buf.as_slice()).unwrap();
    let x = train[0].feature_matrix();
    let fa = encoder_forward(&x, None, &p1.params, &model).unwrap();
    let fb = encoder_forward(&x, None, &loaded, &cfg2).unwrap();
    let bits = |m: &Matrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let forward = bits(&fa.embeddings) == bits(&fb.embeddings);
    check(
        same_outputs && curves && forward,
        format!(
            "{} output files identical: {same_outputs}, loss curves identical: {curves}, checkpoint forward bit-identical: {forward}",
            files.len()
        ),
    )
}

fn c9_leakage(small: &[SubjectData]) -> Outcome {
    let (model, freqs, pre, ft, cv) = small_setup_parts();
    let setup = LosoSetup {
        model: &model,
        freqs: &freqs,
        pretrain: &pre,
        finetune: &ft,
        cv: &cv,
        seed: 8,
    };
    let held = small[2].subject_id.clone();
    let mut mutated = small.to_vec();
    for seq in &mut mutated[2].sequences {
        for tok in &mut seq.tokens {
            for v in &mut tok.features {
                *v = -*v * 3.0 + 1.0;
            }
        }
        if let Some(l) = seq.labels.as_mut() {
            for row in l.iter_mut() {
                *row = [row[1] * 7.0, -row[0]];
            }
        }
    }
    let a = train_fold(small, &held, &setup).unwrap();
    let b = train_fold(&mutated, &held, &setup).unwrap();
    let same = a.pretrained == b.pretrained
        && a.heads.iter().zip(&b.heads).all(|(x, y)| x.1 == y.1)
        && a.permuted_heads.iter().zip(&b.permuted_heads).all(|(x, y)| x.1 == y.1)
        && a.heads.len() == 2
        && a.permuted_heads.len() == 2;
    check(same, format!("fold {held} parameters bit-identical after mutating its data: {same}"))
}

fn c10_plateau(summary: &CvSummary) -> Outcome {
    let mut worst = 0.0f64;
    for f in &summary.folds {
        let FoldOutcome::Ok(r) = f else { continue };
        let v = &r.pretrain.val_loss;
        let total = r.pretrain.initial_val_loss - v[v.len() - 1];
        let tail_start = v[(v.len() * 3) / 4 - 1];
        let tail = tail_start - v[v.len() - 1];
        worst = worst.max(tail / total);
    }
    check(
        worst < 0.05 && summary.n_failed == 0,
        format!("largest last-quarter improvement {:.2}% of total validation decrease", worst * 100.0),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {tag} {name} ({:.1} s): {detail}", t.elapsed().as_secs_f64());
    ok
}

fn main() {
    let mut ok = true;
    ok &= run(1, "parameter count", c1_parameter_count);
    ok &= run(2, "gradient correctness", c2_gradient_check);
    ok &= run(3, "spectral oracles", c3_spectral);
    ok &= run(4, "loss-scaling identities", c4_loss_scaling);
    ok &= run(5, "frequency-bias direction", c5_frequency_bias);
    ok &= run(6, "masking contract", c6_masking);

    let small = common::cohort(
        &CohortConfig {
            n_subjects: 3,
            days: 0.25,
            ..CohortConfig::default()
        },
        12,
    );
    let t = Instant::now();
    let summary = catch_unwind(|| {
        let data = common::cohort(&CohortConfig::default(), 2024);
        let total: usize = data.iter().map(|s| s.sequences.len()).sum();
        assert_eq!(total, 768, "default cohort sequence count");
        let model = ModelConfig::default();
        let freqs = token_freqs(&WelchConfig::default());
        let pre = PretrainConfig {
            epochs: 50,
            ..PretrainConfig::default()
        };
        let ft = FinetuneConfig::default();
        let cv = CvConfig {
            permutation_control: true,
            ..CvConfig::default()
        };
        let setup = LosoSetup {
            model: &model,
            freqs: &freqs,
            pretrain: &pre,
            finetune: &ft,
            cv: &cv,
            seed: 7,
        };
        run_loso(&data, &setup, 1).unwrap()
    });
    let loso_s = t.elapsed().as_secs_f64();
    ok &= run(7, "planted recovery", || {
        let s = summary.as_ref().map_err(|_| "cohort cross-validation panicked".to_string())?;
        c7_recovery(s).map(|d| format!("{d}; LOSO wall time {loso_s:.0} s"))
    });
    ok &= run(8, "determinism and persistence", || c8_determinism(&small));
    ok &= run(9, "leakage guard", || c9_leakage(&small));
    ok &= run(10, "validation plateau", || {
        let s = summary.as_ref().map_err(|_| "cohort cross-validation panicked".to_string())?;
        c10_plateau(s)
    });
    if !ok {
        std::process::exit(1);
    }
}
