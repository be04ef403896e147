use gpdmm::experiment::{iteration_seed, run_iteration, sample_candidates, validation_better, validation_tied, Stat};
use gpdmm::model_io::{model_from_str, model_to_string};
use gpdmm::{evaluate, mccv_split, run_mccv, run_search, synth_generate, train_run, RunConfig, SynthSpec};
use gpdmm_core::{Dataset, MetricsReport};

fn small() -> (Dataset, RunConfig) {
    let data = synth_generate(&SynthSpec::separable(4, 30, 4), 1).unwrap();
    let cfg = RunConfig {
        reduction_dims: 3,
        rounds: 3,
        steps_per_phase: 10,
        polish_steps: 10,
        infer_steps: 30,
        patience: 2,
        n_validation: 1,
        n_test: 2,
        iterations: 2,
        budget: 3,
        ..RunConfig::default()
    };
    (data, cfg)
}

#[test]
fn model_document_round_trips_exactly() {
    let (data, cfg) = small();
    let split = mccv_split(&data, 0, 1, 2).unwrap();
    let run = train_run(&data, &split, &cfg).unwrap();
    let text = model_to_string(&run.model);
    assert!(text.starts_with("GPDMM1\n"));
    let back = model_from_str(&text).unwrap();
    assert_eq!(back, run.model);
    assert_eq!(model_to_string(&back), text);

    let probe = data.sequences[split.test[0]].slice(0, 12);
    let a = run.model.generate(&probe, None, 5).unwrap();
    let b = back.generate(&probe, None, 5).unwrap();
    assert_eq!(a.observations, b.observations);

    assert!(model_from_str("GPDMM2\n{}").unwrap_err().contains("GPDMM1"));
    assert!(model_from_str("GPDMM1").is_err());
}

#[test]
fn one_iteration_is_train_plus_eval() {
    let (data, cfg) = small();
    let report = run_iteration(&data, &cfg, 0, iteration_seed(cfg.seed, 0)).unwrap();
    let split = mccv_split(&data, cfg.seed, cfg.n_validation, cfg.n_test).unwrap();
    assert_eq!(report.split, split);
    let run = train_run(&data, &split, &cfg).unwrap();
    let ev = evaluate(&run.model, &data, &split.test, cfg.prefix_fraction, None).unwrap();
    assert_eq!(report.test, ev.report);
    assert_eq!(report.best_round, run.best_round);
    assert!(report.best_round.unwrap() <= cfg.rounds);
}

#[test]
fn mccv_aggregates_every_iteration() {
    let (data, cfg) = small();
    let r = run_mccv(&data, &cfg).unwrap();
    assert_eq!(r.iterations.len(), 2);
    assert_eq!(r.iterations[1].split_seed, cfg.seed + 1);
    let f1 = r.aggregate.f1.as_ref().unwrap();
    assert_eq!(f1.n, 2);
    let mean = (r.iterations[0].test.f1_macro + r.iterations[1].test.f1_macro) / 2.0;
    assert!((f1.mean - mean).abs() < 1e-15);
    for it in &r.iterations {
        assert!(it.best_round.unwrap() <= it.rounds_run);
        for o in &it.outcomes {
            let p = o.posterior.as_ref().unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn stats_use_sample_deviation() {
    let s = Stat::of(&[Some(1.0), None, Some(3.0)]).unwrap();
    assert_eq!((s.mean, s.n), (2.0, 2));
    assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(Stat::of(&[Some(4.0)]).unwrap().sd, 0.0);
    assert!(Stat::of(&[None]).is_none());
}

#[test]
fn search_is_ranked_and_deterministic() {
    let (data, mut cfg) = small();
    cfg.iterations = 1;
    cfg.search.reduction_dims = [2, 3];
    let a = run_search(&data, &cfg).unwrap();
    assert_eq!(a.entries.len(), 3);
    for (i, e) in a.entries.iter().enumerate() {
        assert_eq!(e.rank, i + 1);
    }
    for w in a.entries.windows(2) {
        let (x, y) = (w[0].validation_f1.unwrap_or(-1.0), w[1].validation_f1.unwrap_or(-1.0));
        assert!(x >= y);
        if x == y {
            let (dx, dy) = (w[0].validation_frechet_avg.unwrap_or(f64::INFINITY), w[1].validation_frechet_avg.unwrap_or(f64::INFINITY));
            assert!(dx <= dy);
        }
    }
    assert_eq!(a, run_search(&data, &cfg).unwrap());
}

#[test]
fn candidates_respect_the_space() {
    let (_, mut cfg) = small();
    cfg.budget = 50;
    let c = sample_candidates(&cfg, 5);
    assert_eq!(c.len(), 50);
    assert_eq!(c, sample_candidates(&cfg, 5));
    for k in &c {
        assert!((1..=3).contains(&k.fourier_order));
        assert!((2..=5).contains(&k.reduction_dims));
        assert!((1..=2).contains(&k.markov_order));
        assert!((0.1..=10.0).contains(&k.emission_variance));
        assert!(k.fitc_fraction.is_none() || k.fitc_fraction == Some(0.5));
    }
    let mut one = cfg.clone();
    one.budget = 1;
    assert_eq!(sample_candidates(&one, 5)[0], c[0]);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let (data, cfg) = small();
    let split = mccv_split(&data, 0, 1, 2).unwrap();
    let run = train_run(&data, &split, &cfg).unwrap();
    let other = synth_generate(&SynthSpec::separable(5, 30, 4), 1).unwrap();
    assert!(evaluate(&run.model, &other, &[0], 0.4, None).is_err());
}

fn report(f1: f64, d: Option<f64>) -> MetricsReport {
    MetricsReport {
        f1_macro: f1,
        frechet_avg: d,
        dampening_ratio: None,
        ldj_ratio: None,
        excluded_classes: 0,
        per_class: Vec::new(),
    }
}

#[test]
fn validation_ordering_and_ties() {
    let best = report(1.0, Some(0.1));
    assert!(validation_better(&report(1.0, Some(0.09)), &best));
    assert!(validation_better(&report(1.0, Some(5.0)), &report(0.9, Some(0.1))));
    assert!(validation_better(&report(1.0, Some(5.0)), &report(1.0, None)));
    assert!(!validation_better(&report(1.0, None), &best));

    assert!(validation_tied(&report(1.0, Some(0.1005)), &best));
    assert!(!validation_tied(&report(1.0, Some(0.102)), &best));
    assert!(!validation_tied(&report(0.9, Some(0.1)), &best));
    assert!(!validation_tied(&report(1.0, None), &best));
}
