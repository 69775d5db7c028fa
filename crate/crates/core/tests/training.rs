use distlab_core::dataset::{synthetic_blobs, Dataset, LabeledVector};
use distlab_core::model::{grad_params, init_params, write_params, ModelConfig, Params};
use distlab_core::training::{
    accuracy, epoch_order, evaluate, load_model, mean_loss, model_id, save_model,
    screen_mutants, train, MutationOperator, MutationSpec, ScreenVerdict, TrainConfig,
    TrainedModel,
};
use distlab_core::Error;

fn blobs() -> (Dataset, Dataset, ModelConfig) {
    let ls = synthetic_blobs(60, 8, 3, 1).unwrap();
    let ts = synthetic_blobs(30, 8, 3, 2).unwrap();
    (ls, ts, ModelConfig::new(8, 6, 3))
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        learning_rate: 0.2,
        seed: 5,
        loss_delta_tol: 1e-4,
        patience: 2,
    }
}

fn mutant(op: MutationOperator) -> MutationSpec {
    MutationSpec::new(op, "")
}

/// Plain minibatch SGD written out directly, without the mutation hook.
fn reference_sgd(cfg: &TrainConfig, mcfg: ModelConfig, ls: &Dataset) -> Params {
    let mut p = init_params(mcfg, cfg.seed).unwrap();
    let mut prev: Option<f64> = None;
    let mut calm = 0;
    for epoch in 1..=cfg.max_epochs {
        for chunk in epoch_order(cfg.seed, epoch, ls.len()).chunks(cfg.batch_size) {
            let batch: Vec<LabeledVector> = chunk.iter().map(|&i| ls.items()[i].clone()).collect();
            let g = grad_params(&p, &batch).unwrap();
            for (pt, gt) in p.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, b) in pt.iter_mut().zip(gt) {
                    *a -= cfg.learning_rate * b;
                }
            }
        }
        let loss = mean_loss(&p, ls).unwrap();
        if let Some(prev) = prev {
            calm = if (loss - prev).abs() < cfg.loss_delta_tol { calm + 1 } else { 0 };
        }
        prev = Some(loss);
        if calm >= cfg.patience {
            break;
        }
    }
    p.round_to_f32();
    p
}

#[test]
fn unmutated_trainer_matches_reference_sgd_bit_for_bit() {
    let (ls, ts, mcfg) = blobs();
    let c = cfg(30);
    let m = train(&c, &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    let r = reference_sgd(&c, mcfg, &ls);
    assert_eq!(write_params(&m.params), write_params(&r));
    assert_eq!(m.model_id, model_id(&r));
}

#[test]
fn training_is_deterministic() {
    let (ls, ts, mcfg) = blobs();
    let ops = [
        MutationOperator::None,
        MutationOperator::FreezeHiddenFraction {
            fraction: 0.5,
            seed: 3,
        },
        MutationOperator::StaleGradientEvery { k: 3 },
    ];
    for op in ops {
        let a = train(&cfg(10), &mcfg, &ls, &ts, &mutant(op)).unwrap();
        let b = train(&cfg(10), &mcfg, &ls, &ts, &mutant(op)).unwrap();
        assert_eq!(a, b, "{op}");
    }
    let mut other = cfg(10);
    other.seed = 6;
    let a = train(&cfg(10), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    let b = train(&other, &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    assert_ne!(a.model_id, b.model_id);
}

#[test]
fn blobs_are_learned() {
    let (ls, ts, mcfg) = blobs();
    let m = train(&cfg(40), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    assert!(accuracy(&m.params, &ts).unwrap() >= 0.95);
    let first = m.metrics.rows.first().unwrap().loss_train;
    let last = m.metrics.last().unwrap().loss_train;
    assert!(last < first, "{first} -> {last}");
    let init = init_params(mcfg, 5).unwrap();
    assert!(mean_loss(&m.params, &ls).unwrap() < mean_loss(&init, &ls).unwrap());
}

#[test]
fn metrics_rows_match_final_model() {
    let (ls, ts, mcfg) = blobs();
    let m = train(&cfg(12), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    let rows = &m.metrics.rows;
    assert!(!rows.is_empty() && rows.len() <= 12);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
    }
    // The log is taken before the final f32 rounding, so allow for it.
    let (loss, acc) = evaluate(&m.params, &ls).unwrap();
    let last = m.metrics.last().unwrap();
    assert!((loss - last.loss_train).abs() < 1e-5);
    assert!((acc - last.acc_train).abs() <= 1.0 / ls.len() as f64);
}

#[test]
fn converges_with_patience() {
    let (ls, ts, mcfg) = blobs();
    let mut c = cfg(200);
    c.loss_delta_tol = 1e-2;
    let m = train(&c, &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    assert!(m.converged);
    let rows = &m.metrics.rows;
    let n = rows.len();
    assert!(n > c.patience);
    for w in rows[n - 1 - c.patience..].windows(2) {
        assert!((w[1].loss_train - w[0].loss_train).abs() < c.loss_delta_tol);
    }
    let short = train(&cfg(1), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    assert!(!short.converged);
}

#[test]
fn skipping_output_bias_keeps_it_at_zero() {
    let (ls, ts, mcfg) = blobs();
    let op = MutationOperator::SkipBiasUpdate { layer: 2 };
    let m = train(&cfg(10), &mcfg, &ls, &ts, &mutant(op)).unwrap();
    assert!(m.params.b2.iter().all(|&b| b == 0.0));
    assert!(m.params.b1.iter().any(|&b| b != 0.0));
    let op = MutationOperator::SkipBiasUpdate { layer: 1 };
    let m = train(&cfg(10), &mcfg, &ls, &ts, &mutant(op)).unwrap();
    assert!(m.params.b1.iter().all(|&b| b == 0.0));
}

#[test]
fn zero_scaled_layer_keeps_its_initial_weights() {
    let (ls, ts, mcfg) = blobs();
    let c = cfg(5);
    let init = init_params(mcfg, c.seed).unwrap();
    let op = MutationOperator::ScaleGradient {
        layer: 1,
        factor: 0.0,
    };
    let m = train(&c, &mcfg, &ls, &ts, &mutant(op)).unwrap();
    let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    assert_eq!(as_f32(&m.params.w1), as_f32(&init.w1));
    assert_eq!(as_f32(&m.params.b1), as_f32(&init.b1));
    assert_ne!(as_f32(&m.params.w2), as_f32(&init.w2));
}

#[test]
fn frozen_units_keep_their_initial_weights() {
    let (ls, ts, mcfg) = blobs();
    let c = cfg(5);
    let init = init_params(mcfg, c.seed).unwrap();
    let op = MutationOperator::FreezeHiddenFraction {
        fraction: 0.5,
        seed: 1,
    };
    let m = train(&c, &mcfg, &ls, &ts, &mutant(op)).unwrap();
    let d = mcfg.input_dim;
    let unchanged = (0..mcfg.hidden_dim)
        .filter(|&u| {
            (0..d).all(|j| m.params.w1[u * d + j] as f32 == init.w1[u * d + j] as f32)
                && m.params.b1[u] as f32 == init.b1[u] as f32
        })
        .count();
    // Half the units are frozen; a trained unit that never fires keeps its
    // weights too.
    assert!(unchanged >= 3, "{unchanged}");
}

#[test]
fn scale_factor_one_and_none_agree() {
    let (ls, ts, mcfg) = blobs();
    let op = MutationOperator::ScaleGradient {
        layer: 2,
        factor: 1.0,
    };
    let a = train(&cfg(6), &mcfg, &ls, &ts, &mutant(op)).unwrap();
    let b = train(&cfg(6), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn divergence_is_reported() {
    let (ls, ts, mcfg) = blobs();
    let mut c = cfg(5);
    c.learning_rate = 1e300;
    let err = train(&c, &mcfg, &ls, &ts, &MutationSpec::none()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}

#[test]
fn model_file_round_trip_reproduces_accuracy_bit_for_bit() {
    let (ls, ts, mcfg) = blobs();
    let m = train(&cfg(8), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dstw");
    save_model(&m, &path).unwrap();
    let back: TrainedModel = load_model(&path).unwrap();
    assert_eq!(back, m);
    let a = evaluate(&m.params, &ts).unwrap();
    let b = evaluate(&back.params, &ts).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
}

#[test]
fn tampered_model_file_is_rejected() {
    let (ls, ts, mcfg) = blobs();
    let m = train(&cfg(3), &mcfg, &ls, &ts, &MutationSpec::none()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dstw");
    save_model(&m, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(load_model(&path).is_err());
}

#[test]
fn screen_accepts_harmless_and_rejects_destructive_mutants() {
    let (ls, ts, mcfg) = blobs();
    let mut c = cfg(60);
    c.loss_delta_tol = 1e-3;
    let candidates = vec![
        MutationSpec::none(),
        mutant(MutationOperator::ScaleGradient {
            layer: 2,
            factor: 1.0,
        }),
        mutant(MutationOperator::ScaleGradient {
            layer: 2,
            factor: 0.0,
        }),
        mutant(MutationOperator::ScaleGradient {
            layer: 2,
            factor: 1e300,
        }),
    ];
    let entries = screen_mutants(&candidates, &c, &mcfg, &ls, &ts).unwrap();
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[0].verdict, ScreenVerdict::Accept);
    assert_eq!(entries[0].acc_gap, Some(0.0));
    assert_eq!(entries[1].verdict, ScreenVerdict::Accept);
    // A frozen output layer cannot beat chance on three balanced classes.
    assert_eq!(entries[2].verdict, ScreenVerdict::Reject);
    assert!(matches!(entries[3].verdict, ScreenVerdict::Failed(_)), "{:?} {:?}", entries[3].verdict, entries[3].model.as_ref().map(|m| m.params.b2.clone()));
    assert!(entries[3].model.is_none());
}

#[test]
fn mutation_specs_parse_and_print() {
    for text in [
        "NONE",
        "FREEZE_HIDDEN_FRACTION(0.5,7)",
        "SKIP_BIAS_UPDATE(2)",
        "SCALE_GRADIENT(1,0.5)",
        "STALE_GRADIENT_EVERY(4)",
    ] {
        let spec: MutationSpec = text.parse().unwrap();
        assert_eq!(spec.trainer_id(), text);
    }
    for bad in ["SCALE_GRADIENT(3,1)", "STALE_GRADIENT_EVERY(1)", "FREEZE_HIDDEN_FRACTION(1.5)", "BOGUS"] {
        assert!(bad.parse::<MutationSpec>().is_err(), "{bad}");
    }
    let json = serde_json::to_value(MutationSpec::new(
        MutationOperator::ScaleGradient {
            layer: 1,
            factor: 2.0,
        },
        "layer one learns faster",
    ))
    .unwrap();
    assert_eq!(json["operator"], "SCALE_GRADIENT");
    assert_eq!(json["layer"], 1);
}
