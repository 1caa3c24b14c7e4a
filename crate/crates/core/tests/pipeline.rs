mod common;

use gridseq_core::data::{build_training_set, collect_random_walks};
use gridseq_core::grid::Contingencies;
use gridseq_core::pipeline::eval::{default_edges, power_histogram, solution_dot};
use gridseq_core::pipeline::{
    contingency_suite, evaluate, oracle_search, train, EvalConfig, InferenceMode, Scenario, TrainConfig,
};
use gridseq_nn::AdamWConfig;

fn quick_model(g: &gridseq_core::grid::FeederGraph) -> (gridseq_core::model::DhModel, f64) {
    let trajs = collect_random_walks(g, &Contingencies::new(), 100, 1).unwrap();
    let data = build_training_set(&trajs, g.n_cells(), 2).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        batch_size: 8,
        k: 4,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        dropout: 0.0,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(&data, g.n_cells(), g.n_switches(), &cfg, |_, _, _| Ok(())).unwrap();
    (out.model, out.rtg_init)
}

#[test]
fn argmax_trials_are_identical_and_sampling_is_seeded() {
    let g = common::fixture("synth123.feeder");
    let (m, rtg) = quick_model(&g);
    let cont = Contingencies::new();
    let cfg = EvalConfig {
        n_trials: 6,
        ..Default::default()
    };
    let r = evaluate(&m, &g, &cont, &cfg, None, rtg).unwrap();
    assert_eq!(r.std_return, 0.0);
    assert_eq!(r.sdpr, 0.0);
    assert!(r.trials.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(r.rtg0, rtg);
    assert_eq!(r.n_optimal, 0, "no oracle means no optimality claims");
    assert!(r.trials.iter().all(|t| t.replay.is_clean()));

    let cfg = EvalConfig {
        n_trials: 6,
        mode: InferenceMode::Sample,
        seed: 3,
        rtg0: Some(50000.0),
    };
    let a = evaluate(&m, &g, &cont, &cfg, None, rtg).unwrap();
    let b = evaluate(&m, &g, &cont, &cfg, None, rtg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rtg0, 50000.0);
    assert!(a.trials.iter().all(|t| t.replay.is_clean()));

    let bins = power_histogram(
        &a.trials.iter().map(|t| t.restored_power).collect::<Vec<_>>(),
        &default_edges(7210.0, 10),
    );
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 6);
    assert!(evaluate(&m, &g, &cont, &EvalConfig { n_trials: 0, ..cfg }, None, rtg).is_err());
}

#[test]
fn contingency_suite_edge_cases() {
    let g = common::fixture("ieee13.feeder");
    let (m, rtg) = quick_model(&g);
    let cfg = EvalConfig {
        n_trials: 2,
        ..Default::default()
    };
    assert!(contingency_suite(&m, &g, &[], &cfg, rtg).unwrap().is_empty());

    let scenarios = vec![
        Scenario {
            name: "none".into(),
            contingencies: Contingencies::new(),
        },
        Scenario {
            name: "all".into(),
            contingencies: (0..g.n_switches()).collect(),
        },
    ];
    let reports = contingency_suite(&m, &g, &scenarios, &cfg, rtg).unwrap();
    let plain = evaluate(
        &m,
        &g,
        &Contingencies::new(),
        &cfg,
        Some(&oracle_search(&g, &Contingencies::new(), g.horizon).unwrap()),
        rtg,
    )
    .unwrap();
    assert_eq!(reports[0].report, plain);
    let all = &reports[1];
    assert_eq!(all.report.apr, 0.0);
    assert!(all.report.trials.iter().all(|t| t.actions.is_empty() && t.terminated_early));
    assert!(all.solution.is_empty());
    let dot = solution_dot(&g, &all.scenario.contingencies, &all.solution);
    assert_eq!(dot.matches("style=dashed").count(), g.n_switches());

    let bad = vec![Scenario {
        name: "bad".into(),
        contingencies: [99].into_iter().collect(),
    }];
    assert!(contingency_suite(&m, &g, &bad, &cfg, rtg).is_err());
}
