use gpdmm_core::{posterior_from_scores, Dataset, LatentConfig, Sequence, TrainOptions, TrainedGpdmm};
use nalgebra::DMatrix;

fn wave(cycles: f64, shift: f64, len: usize, dims: usize) -> DMatrix<f64> {
    DMatrix::from_fn(len, dims, |t, d| {
        let u = t as f64 / (len - 1) as f64;
        (std::f64::consts::TAU * cycles * u + shift + d as f64).sin() * (1.0 + 0.2 * d as f64)
    })
}

fn dataset(sizes: &[usize]) -> Dataset {
    let labels: Vec<String> = (0..sizes.len()).map(|c| format!("c{c}")).collect();
    let mut seqs = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            let v = wave(1.0 + c as f64, 0.1 * k as f64, 24, 3);
            seqs.push(Sequence::new(v, labels[c].clone(), format!("c{c}_{k}"), 0.1).unwrap());
        }
    }
    Dataset::new("mix", seqs, labels).unwrap()
}

fn quick() -> TrainOptions {
    TrainOptions {
        rounds: 2,
        steps_per_phase: 10,
        polish_steps: 0,
        infer_steps: 30,
        ..TrainOptions::default()
    }
}

fn config() -> LatentConfig {
    LatentConfig {
        reduction_dims: 2,
        ..LatentConfig::default()
    }
}

#[test]
fn priors_follow_class_sizes() {
    let (model, log) = TrainedGpdmm::train(&dataset(&[2, 1, 1]), &config(), &quick()).unwrap();
    assert_eq!(model.priors, vec![0.5, 0.25, 0.25]);
    assert_eq!(model.experts.len(), 3);
    assert!(log.iter().all(|e| e.objective.is_finite()));
}

#[test]
fn posterior_normalizes_and_hint_overrides() {
    let data = dataset(&[1, 1, 1]);
    let (model, _) = TrainedGpdmm::train(&data, &config(), &quick()).unwrap();
    let prefix = data.sequences[2].values.rows(0, 10).into_owned();
    let r = model.classify(&prefix).unwrap();
    assert!((r.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(r.posterior.iter().all(|p| (0.0..=1.0).contains(p)));

    let hinted = model.generate(&prefix, Some(0), 5).unwrap();
    assert_eq!(hinted.class_used, 0);
    assert!(hinted.classification.is_none());
    assert_eq!(hinted.observations.shape(), (5, 3));
    assert_eq!(hinted.latent.nrows(), 5);

    let free = model.generate(&prefix, None, 5).unwrap();
    assert_eq!(free.class_used, free.classification.unwrap().predicted);
    assert!(model.generate(&prefix, Some(3), 5).is_err());

    let empty = model.generate(&prefix, None, 0).unwrap();
    assert_eq!(empty.observations.shape(), (0, 3));
}

#[test]
fn single_class_is_certain() {
    let data = dataset(&[2]);
    let (model, _) = TrainedGpdmm::train(&data, &config(), &quick()).unwrap();
    assert_eq!(model.priors, vec![1.0]);
    let r = model.classify(&data.sequences[0].values.rows(0, 8).into_owned()).unwrap();
    assert_eq!(r.posterior, vec![1.0]);
    assert_eq!(r.predicted, 0);
}

#[test]
fn pooled_model_has_one_expert() {
    let opts = TrainOptions {
        pooled_dynamics: true,
        ..quick()
    };
    let (model, _) = TrainedGpdmm::train(&dataset(&[1, 1]), &config(), &opts).unwrap();
    assert_eq!(model.experts.len(), 1);
    assert!(std::ptr::eq(model.expert_for(0), model.expert_for(1)));
}

#[test]
fn early_stop_observer_halts_training() {
    let mut seen = Vec::new();
    let opts = TrainOptions { rounds: 5, ..quick() };
    TrainedGpdmm::train_observed(&dataset(&[1, 1]), &config(), &opts, |round, snap| {
        seen.push((round, snap.objective().unwrap()));
        round < 2
    })
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2]);
    assert!(seen.iter().all(|s| s.1.is_finite()));
}

#[test]
fn short_prefix_rejected() {
    let data = dataset(&[1, 1]);
    let cfg = LatentConfig {
        markov_order: 2,
        ..config()
    };
    let (model, _) = TrainedGpdmm::train(&data, &cfg, &quick()).unwrap();
    assert!(model.classify(&data.sequences[0].values.rows(0, 2).into_owned()).is_err());
    assert!(model.classify(&DMatrix::zeros(5, 4)).is_err());
}

#[test]
fn zero_prior_class_never_wins() {
    let r = posterior_from_scores(&[0.0, 1.0], &[100.0, -100.0]).unwrap();
    assert_eq!(r.predicted, 1);
    assert_eq!(r.posterior, vec![0.0, 1.0]);
}
