use morphprobe_core::conllu::Split;
use morphprobe_core::embedding::{synth_embeddings, Dataset, LayerId, TokenBatch};
use morphprobe_core::eval::{micro_f1, tally};
use morphprobe_core::labels::{build_label_space, LabelSpace, TargetVector};
use morphprobe_core::probe::{
    dataset_loss, predict, train, ProbeError, ProbeKind, ProbeModel, TrainConfig,
};
use morphprobe_core::synth::SyntheticLexicon;
use morphprobe_core::Corpus;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of the batch loss.
fn numeric_gradient(model: &ProbeModel, batch: &TokenBatch, h: f64) -> Vec<f64> {
    (0..model.params.len())
        .map(|i| {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            (plus.batch_loss(batch).unwrap() - minus.batch_loss(batch).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn random_instance(seed: u64, kind: ProbeKind) -> (ProbeModel, TokenBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=8);
    let n_labels = rng.random_range(1..=5);
    let rows = rng.random_range(1..=4);
    let mut model = ProbeModel::init(kind, dim, n_labels, seed);
    model.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
    let batch = TokenBatch {
        rows,
        dim,
        n_labels,
        inputs: (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: (0..rows * n_labels)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect(),
    };
    (model, batch)
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn linear_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (model, batch) = random_instance(seed, ProbeKind::Linear);
        let (_, analytic) = model.loss_and_gradient(&batch).unwrap();
        let numeric = numeric_gradient(&model, &batch, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "seed {seed}: relative error {err}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (model, batch) = random_instance(100 + seed, ProbeKind::Mlp1 { hidden: 3 });
        // skip draws with a hidden pre-activation near the ReLU kink
        let (d, h) = (model.dim, 3);
        let near_kink = (0..batch.rows).any(|r| {
            (0..h).any(|k| {
                let w = &model.params[k * d..(k + 1) * d];
                let pre: f64 = model.params[h * d + k]
                    + w.iter().zip(batch.input(r)).map(|(a, b)| a * b).sum::<f64>();
                pre.abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let (_, analytic) = model.loss_and_gradient(&batch).unwrap();
        let numeric = numeric_gradient(&model, &batch, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "seed {seed}: relative error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn linear_loss_gradient_agrees_with_forward_loss(seed in 0u64..10_000) {
        let (model, batch) = random_instance(seed, ProbeKind::Linear);
        let (loss, _) = model.loss_and_gradient(&batch).unwrap();
        prop_assert!((loss - model.batch_loss(&batch).unwrap()).abs() < 1e-12);
    }
}

struct Synthetic {
    space: LabelSpace,
    train: Dataset,
    dev: Dataset,
    dev_targets: Vec<TargetVector>,
    dev_corpus: Corpus,
}

fn synthetic(noise: f64, n_train_sentences: usize) -> Synthetic {
    let lex = SyntheticLexicon::generate(2000, 11);
    let train_c = lex.sample_corpus("syn", Split::Train, n_train_sentences, 10, 12);
    let dev_c = lex.sample_corpus("syn", Split::Dev, 100, 10, 12);
    let space = build_label_space(&[&train_c], 1, None).unwrap();
    let layer = [LayerId::new(6).unwrap()];
    let tr = synth_embeddings(&train_c, &space, 64, 5, noise, &layer).unwrap();
    let dv = synth_embeddings(&dev_c, &space, 64, 5, noise, &layer).unwrap();
    let train_t = space.encode_corpus(&train_c);
    let dev_t = space.encode_corpus(&dev_c);
    Synthetic {
        train: Dataset::new(&tr[0], &train_t, space.len()).unwrap(),
        dev: Dataset::new(&dv[0], &dev_t, space.len()).unwrap(),
        dev_targets: dev_t,
        space,
        dev_corpus: dev_c,
    }
}

#[test]
fn separable_data_reaches_perfect_train_f1() {
    let s = synthetic(0.0, 200);
    let config = TrainConfig {
        epochs: 50,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let (model, _) = train(&s.train, &s.train, ProbeKind::Linear, &config).unwrap();
    let preds: Vec<TargetVector> = (0..s.train.len())
        .map(|i| {
            let x: Vec<f64> = s.train.input(i).iter().map(|&v| f64::from(v)).collect();
            let scores = morphprobe_core::probe::forward(&model, &x, 1).unwrap();
            s.space.threshold_scores(&scores, 0.5).unwrap()
        })
        .collect();
    let gold: Vec<TargetVector> = (0..s.train.len())
        .map(|i| s.train.target(i).to_vec().into())
        .collect();
    let f1 = micro_f1(&tally(&preds, &gold, &s.space).unwrap()).f1;
    assert_eq!(f1, 1.0);
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let s = synthetic(0.1, 100);
    let config = TrainConfig {
        epochs: 8,
        shuffle_seed: 3,
        init_seed: 4,
        ..TrainConfig::default()
    };
    let (m1, r1) = train(&s.train, &s.dev, ProbeKind::Linear, &config).unwrap();
    let (m2, r2) = train(&s.train, &s.dev, ProbeKind::Linear, &config).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(r1.dev_loss.len(), 8);
    let best = r1
        .dev_loss
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, l)| if l < acc.1 { (i, l) } else { acc });
    assert_eq!(r1.selected_epoch, best.0);
    assert_eq!(r1.best_dev_loss, best.1);
    // the returned snapshot reproduces the recorded loss exactly
    assert_eq!(dataset_loss(&m1, &s.dev).unwrap(), r1.best_dev_loss);

    let other_init = TrainConfig {
        init_seed: 5,
        ..config
    };
    let (m3, _) = train(&s.train, &s.dev, ProbeKind::Linear, &other_init).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn patience_stops_early() {
    let s = synthetic(0.1, 50);
    // dev targets are the complement of the train targets, so fitting the
    // training data makes dev loss worse
    let n = s.train.len();
    let inputs: Vec<f32> = (0..n).flat_map(|i| s.train.input(i).to_vec()).collect();
    let flipped: Vec<TargetVector> = (0..n)
        .map(|i| s.train.target(i).iter().map(|&b| !b).collect::<Vec<_>>().into())
        .collect();
    let dev = Dataset::from_rows(64, s.space.len(), inputs, &flipped).unwrap();
    let config = TrainConfig {
        epochs: 50,
        patience: Some(2),
        ..TrainConfig::default()
    };
    let (_, record) = train(&s.train, &dev, ProbeKind::Linear, &config).unwrap();
    assert!(record.dev_loss.len() < 50);
    assert_eq!(record.dev_loss.len(), record.selected_epoch + 3);
}

#[test]
fn mlp_trains_and_predicts() {
    let s = synthetic(0.1, 100);
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let (model, record) = train(&s.train, &s.dev, ProbeKind::Mlp1 { hidden: 32 }, &config).unwrap();
    assert!(record.dev_loss.last().unwrap() < record.dev_loss.first().unwrap());
    let lex = SyntheticLexicon::generate(2000, 11);
    let dev_c = lex.sample_corpus("syn", Split::Dev, 100, 10, 12);
    assert_eq!(dev_c, s.dev_corpus);
    let cache = &synth_embeddings(&dev_c, &s.space, 64, 5, 0.1, &[LayerId::new(6).unwrap()]).unwrap()[0];
    let preds = predict(&model, cache, &s.space, 0.5).unwrap();
    assert_eq!(preds.predicted.len(), s.dev_targets.len());
    assert!(preds.scores.iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn all_zero_model_prediction_boundaries() {
    let s = synthetic(0.1, 10);
    let model = ProbeModel::zeros(ProbeKind::Linear, 64, s.space.len());
    let cache = &synth_embeddings(&s.dev_corpus, &s.space, 64, 5, 0.1, &[LayerId::new(0).unwrap()]).unwrap()[0];
    let at_half = predict(&model, cache, &s.space, 0.5).unwrap();
    assert!(at_half.predicted.iter().all(|p| p.count_ones() == s.space.len()));
    let above = predict(&model, cache, &s.space, 0.51).unwrap();
    assert!(above.predicted.iter().all(|p| p.count_ones() == 0));
    let wrong_dim = ProbeModel::zeros(ProbeKind::Linear, 32, s.space.len());
    assert!(matches!(
        predict(&wrong_dim, cache, &s.space, 0.5),
        Err(ProbeError::DimMismatch { expected: 32, found: 64 })
    ));
}

#[test]
fn wrong_dimension_is_rejected_at_training_time() {
    let s = synthetic(0.1, 10);
    let narrow = Dataset::from_rows(32, s.space.len(), vec![0.0; 32], &[TargetVector::zeros(s.space.len())]).unwrap();
    let err = train(&s.train, &narrow, ProbeKind::Linear, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, ProbeError::DimMismatch { expected: 64, found: 32 }));
}

#[test]
fn divergent_training_reports_non_finite_loss() {
    let rows = 4;
    let inputs = vec![f32::INFINITY; rows * 2];
    let targets = vec![TargetVector::from(vec![true]); rows];
    let data = Dataset::from_rows(2, 1, inputs, &targets).unwrap();
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let r = train(&data, &data, ProbeKind::Linear, &config);
    assert!(matches!(
        r,
        Err(ProbeError::NonFiniteLoss { .. }) | Err(ProbeError::NonFiniteGradient { .. })
    ), "{r:?}");
}
