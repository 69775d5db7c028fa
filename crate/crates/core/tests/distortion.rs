use distlab_core::dataset::{synthetic_blobs, Dataset};
use distlab_core::distortion::{
    distort_one, generate_dataset, iterate_generation, objective, DistortConfig, DistortMode,
    GenerationSchedule,
};
use distlab_core::model::{input_distance, predict, ModelConfig, Params};
use distlab_core::training::{mean_loss, train, MutationSpec, TrainConfig, TrainedModel};

/// Two inputs, two ReLU units that stay active on the whole unit square,
/// two classes. The objective is convex on the box, so the grid minimum is
/// a reliable oracle for the descent.
fn toy_model() -> Params {
    Params::from_parts(
        ModelConfig::new(2, 2, 2),
        vec![1.0, 0.5, -0.5, 1.0],
        vec![0.6, 0.6],
        vec![2.0, -1.0, -1.0, 2.0],
        vec![0.0, 0.0],
    )
    .unwrap()
}

fn grid_min(w: &Params, seed: &[f64], target: usize, lambda: f64) -> f64 {
    let n = 200;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let x = [i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64];
            best = best.min(objective(w, &x, seed, target, lambda).unwrap());
        }
    }
    best
}

#[test]
fn descent_reaches_grid_minimum() {
    let w = toy_model();
    let cfg = DistortConfig {
        max_steps: 1000,
        grad_norm_tol: 1e-9,
        ..DistortConfig::default()
    };
    for lambda in [0.0, 0.05, 1.0] {
        for (seed, target) in [([0.3, 0.6], 0), ([0.8, 0.2], 1), ([0.5, 0.5], 1), ([0.9, 0.9], 0)] {
            let cfg = DistortConfig { lambda, ..cfg };
            let (x, trace) = distort_one(&w, &seed, target, &cfg).unwrap();
            let oracle = grid_min(&w, &seed, target, lambda);
            assert!(
                trace.final_objective <= oracle + 1e-3,
                "lambda {lambda} seed {seed:?}: {} vs grid {oracle}",
                trace.final_objective
            );
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
            let recomputed = objective(&w, &x, &seed, target, lambda).unwrap();
            assert!((recomputed - trace.final_objective).abs() < 1e-12);
            assert!(trace.final_objective <= trace.initial_objective);
        }
    }
}

#[test]
fn objective_terms() {
    let w = toy_model();
    let s = [0.2, 0.7];
    let at_seed = objective(&w, &s, &s, 1, 3.0).unwrap();
    let no_lambda = objective(&w, &s, &s, 1, 0.0).unwrap();
    assert_eq!(at_seed, no_lambda);
    let x = [0.5, 0.3];
    let a = objective(&w, &x, &s, 1, 0.0).unwrap();
    let b = objective(&w, &x, &s, 1, 2.0).unwrap();
    assert!((b - a - 2.0 * input_distance(&x, &s).unwrap()).abs() < 1e-12);
}

#[test]
fn seeds_outside_box_and_bad_targets_are_rejected() {
    let w = toy_model();
    let cfg = DistortConfig::default();
    assert!(distort_one(&w, &[1.5, 0.0], 0, &cfg).is_err());
    assert!(distort_one(&w, &[0.5, 0.5], 2, &cfg).is_err());
    assert!(distort_one(&w, &[0.5], 0, &cfg).is_err());
    let bad = DistortConfig {
        lambda: -1.0,
        ..cfg
    };
    assert!(distort_one(&w, &[0.5, 0.5], 0, &bad).is_err());
}

fn blob_model() -> (Dataset, Dataset, TrainedModel) {
    let ls = synthetic_blobs(40, 16, 4, 11).unwrap();
    let ts = synthetic_blobs(20, 16, 4, 12).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 16,
        learning_rate: 0.2,
        seed: 1,
        loss_delta_tol: 1e-4,
        patience: 2,
    };
    let m = train(&cfg, &ModelConfig::new(16, 8, 4), &ls, &ts, &MutationSpec::none()).unwrap();
    (ls, ts, m)
}

fn mean_shift(a: &Dataset, b: &Dataset) -> f64 {
    a.items()
        .iter()
        .zip(b.items())
        .map(|(x, y)| input_distance(&x.pixels, &y.pixels).unwrap().sqrt())
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn huge_lambda_leaves_data_in_place() {
    let (ls, _, m) = blob_model();
    let cfg = DistortConfig {
        lambda: 1e6,
        ..DistortConfig::default()
    };
    let out = generate_dataset(&ls, &m, &cfg).unwrap();
    let max_dev = ls
        .items()
        .iter()
        .zip(out.items())
        .flat_map(|(a, b)| a.pixels.iter().zip(&b.pixels).map(|(p, q)| (p - q).abs()))
        .fold(0.0f32, f32::max);
    assert!(max_dev <= 1e-3, "{max_dev}");
}

#[test]
fn smaller_lambda_moves_further() {
    let (ls, _, m) = blob_model();
    let sample = Dataset::new(
        ls.items()[..100].to_vec(),
        ls.input_dim(),
        ls.num_classes(),
        ls.lineage().clone(),
    )
    .unwrap();
    let mut prev = f64::INFINITY;
    for lambda in [0.001, 0.01, 0.1, 1.0, 10.0] {
        let cfg = DistortConfig {
            lambda,
            ..DistortConfig::default()
        };
        let shift = mean_shift(&sample, &generate_dataset(&sample, &m, &cfg).unwrap());
        assert!(shift <= prev, "lambda {lambda}: {shift} > {prev}");
        prev = shift;
    }
}

#[test]
fn generated_dataset_keeps_tags_and_records_lineage() {
    let (ls, _, m) = blob_model();
    let cfg = DistortConfig::default();
    let out = generate_dataset(&ls, &m, &cfg).unwrap();
    assert_eq!(out.len(), ls.len());
    for (a, b) in ls.items().iter().zip(out.items()) {
        assert_eq!(a.tag, b.tag);
    }
    assert_eq!(out.lineage().generation, 1);
    assert_eq!(out.lineage().generator_model_id.as_deref(), Some(m.model_id.as_str()));
    assert_eq!(out.lineage().lambda, Some(cfg.lambda));
    // Generated data is what the generating model fits better.
    assert!(mean_loss(&m.params, &out).unwrap() < mean_loss(&m.params, &ls).unwrap());
    assert_eq!(generate_dataset(&ls, &m, &cfg).unwrap(), out);
}

#[test]
fn generation_requires_same_label_mode() {
    let (ls, _, m) = blob_model();
    let cfg = DistortConfig {
        mode: DistortMode::Targeted { target: 1 },
        ..DistortConfig::default()
    };
    assert!(generate_dataset(&ls, &m, &cfg).is_err());
}

#[test]
fn targeted_distortion_pushes_towards_target() {
    let (ls, _, m) = blob_model();
    let cfg = DistortConfig {
        lambda: 0.0,
        max_steps: 500,
        mode: DistortMode::Targeted { target: 2 },
        ..DistortConfig::default()
    };
    let moved = ls
        .items()
        .iter()
        .filter(|i| i.tag != 2)
        .take(20)
        .filter(|i| {
            let (x, _) = distort_one(&m.params, &i.pixels, 2, &cfg).unwrap();
            predict(&m.params, &x).unwrap() == 2
        })
        .count();
    assert!(moved >= 18, "{moved}");
}

#[test]
fn iterated_generation_reports_rounds() {
    let (ls, ts, m) = blob_model();
    let sched = GenerationSchedule {
        rounds: 2,
        distort: DistortConfig::default(),
        train: m.train_config.clone(),
        mutation: MutationSpec::none(),
    };
    let out = iterate_generation(&ls, &ts, &m.model_config, &sched).unwrap();
    assert_eq!(out.rounds.len(), 3);
    assert_eq!(out.rounds[0].model, m);
    assert!(out.rounds[0].mean_loss_prev_model.is_none());
    for (k, r) in out.rounds.iter().enumerate() {
        assert_eq!(r.round, k);
        assert_eq!(r.dataset.lineage().generation as usize, k);
    }
    for k in 1..3 {
        let prev = &out.rounds[k - 1];
        let cur = &out.rounds[k];
        assert_eq!(
            cur.dataset.lineage().generator_model_id.as_deref(),
            Some(prev.model.model_id.as_str())
        );
        let l = cur.mean_loss_prev_model.unwrap();
        assert!(l < mean_loss(&prev.model.params, &prev.dataset).unwrap());
    }
    let csv = out.summary_csv();
    assert!(csv.starts_with("round,acc_ts,acc_self,mean_loss_prev_model,K_c_flag\n"));
    assert_eq!(csv.lines().count(), 4);
    let zero_rounds = GenerationSchedule { rounds: 0, ..sched };
    assert!(iterate_generation(&ls, &ts, &m.model_config, &zero_rounds).is_err());
}
