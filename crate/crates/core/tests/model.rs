mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridseq_core::data::{build_training_set, collect_random_walks, ModifiedTrajectory};
use gridseq_core::grid::{Contingencies, FeederGraph};
use gridseq_core::model::{
    action_tokens, check_action_layout, ActionItem, DhModel, GuidanceItem, ModelConfig, Token, TokenType,
};
use gridseq_core::pipeline::train::{sample_batch, step_rng};
use gridseq_core::pipeline::{
    load_checkpoint, rollout, save_checkpoint, train, Checkpoint, InferenceMode, PipelineError, RolloutOptions,
    TrainConfig,
};
use gridseq_nn::{AdamWConfig, Tape};

fn ieee13_data(n: usize, q: usize) -> (FeederGraph, Vec<ModifiedTrajectory>) {
    let g = common::fixture("ieee13.feeder");
    let trajs = collect_random_walks(&g, &Contingencies::new(), n, 7).unwrap();
    let data = build_training_set(&trajs, g.n_cells(), q).unwrap();
    (g, data)
}

fn tiny_model(g: &FeederGraph, q: usize, k: usize, seed: u64) -> DhModel {
    let mut c = ModelConfig::new(g.n_cells(), g.n_switches(), q, k);
    c.embed_dim = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.dropout = 0.0;
    c.seed = seed;
    c.rtg_scale = 30000.0;
    let mut m = DhModel::new(c).unwrap();
    // move away from the near-zero initialization so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        m.params.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    m
}

fn loss_value(m: &DhModel, g: &[GuidanceItem], a: &[ActionItem]) -> f64 {
    let mut tape = Tape::new();
    let l = m.loss(&mut tape, g, a, None).unwrap();
    tape.value(l.total)[[0, 0]]
}

/// Max over every parameter scalar of |analytic - central difference| / max(|analytic|, |numeric|, floor).
fn gradcheck(m: &mut DhModel, g: &[GuidanceItem], a: &[ActionItem], step: f64, floor: f64) -> f64 {
    let mut tape = Tape::new();
    let l = m.loss(&mut tape, g, a, None).unwrap();
    let grads = tape.backward(l.total).param_grads(&tape, &m.params);
    let ids: Vec<_> = m.params.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let cols = m.params.get(id).ncols();
        for idx in 0..m.params.get(id).len() {
            let (r, c) = (idx / cols, idx % cols);
            let orig = m.params.get(id)[[r, c]];
            m.params.get_mut(id)[[r, c]] = orig + step;
            let up = loss_value(m, g, a);
            m.params.get_mut(id)[[r, c]] = orig - step;
            let down = loss_value(m, g, a);
            m.params.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[id.0][[r, c]];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

#[test]
fn gradient_check_both_loss_terms() {
    let (g, data) = ieee13_data(40, 2);
    let mut m = tiny_model(&g, 2, 3, 1);
    let usable: Vec<usize> = (0..data.len()).collect();
    let (gi, ai) = sample_batch(&data, &usable, &m.config, 3, &mut step_rng(5, 0));
    let err_g = gradcheck(&mut m, &gi, &[], 1e-3, 1e-4);
    let err_a = gradcheck(&mut m, &[], &ai, 1e-3, 1e-4);
    let err_joint = gradcheck(&mut m, &gi, &ai, 1e-3, 1e-4);
    assert!(err_g < 1e-4, "guidance term relative error {err_g:e}");
    assert!(err_a < 1e-4, "action term relative error {err_a:e}");
    assert!(err_joint < 1e-4, "joint loss relative error {err_joint:e}");
}

fn hidden(m: &DhModel, seqs: &[&[Token]]) -> Array2<f64> {
    let mut tape = Tape::new();
    let (x, seg) = m.encode(&mut tape, seqs).unwrap();
    let h = m.trunk(&mut tape, x, &seg, None);
    tape.value(h).clone()
}

fn perturb(t: &Token, rng: &mut ChaCha8Rng, n_switches: usize) -> Token {
    let noise = |v: &Vec<f64>, rng: &mut ChaCha8Rng| v.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    match t {
        Token::Goal(v) => Token::Goal(noise(v, rng)),
        Token::State(v) => Token::State(noise(v, rng)),
        Token::Offset(v) => Token::Offset(noise(v, rng)),
        Token::Action(_) | Token::NullAction => Token::Action(rng.gen_range(0..n_switches)),
        Token::Rtg(_) | Token::NullRtg => Token::Rtg(rng.gen_range(-1.0..1.0)),
        Token::NullState => Token::NullState,
    }
}

#[test]
fn causality_probe() {
    let (g, data) = ieee13_data(40, 2);
    let m = tiny_model(&g, 2, 3, 2);
    let usable: Vec<usize> = (0..data.len()).collect();
    let (gi, ai) = sample_batch(&data, &usable, &m.config, 4, &mut step_rng(9, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<&[Token]> = gi
        .iter()
        .map(|x| x.tokens.as_slice())
        .chain(ai.iter().map(|x| x.tokens.as_slice()))
        .collect();
    let mut worst: f64 = 0.0;
    for tokens in &seqs {
        let base = hidden(&m, &[tokens]);
        for cut in 0..tokens.len() - 1 {
            let mut altered = tokens.to_vec();
            for t in altered.iter_mut().skip(cut + 1) {
                *t = perturb(t, &mut rng, g.n_switches());
            }
            let h = hidden(&m, &[&altered]);
            for r in 0..=cut {
                for c in 0..h.ncols() {
                    worst = worst.max((h[[r, c]] - base[[r, c]]).abs());
                }
            }
            let tail_moved = (cut + 1..tokens.len()).any(|r| (0..h.ncols()).any(|c| h[[r, c]] != base[[r, c]]));
            assert!(tail_moved, "perturbing the suffix must change it");
        }
    }
    assert!(worst < 1e-6, "future tokens leaked into the past: {worst:e}");

    // packing sequences together must not let them see each other
    let packed = hidden(&m, &seqs);
    let mut row = 0;
    for tokens in &seqs {
        let alone = hidden(&m, &[tokens]);
        for r in 0..alone.nrows() {
            for c in 0..alone.ncols() {
                assert!((packed[[row + r, c]] - alone[[r, c]]).abs() < 1e-6);
            }
        }
        row += alone.nrows();
    }
}

fn quick_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        q: 2,
        k: 3,
        seed,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        dropout: 0.0,
        optimizer: AdamWConfig {
            lr: 3e-3,
            warmup_steps: 10,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn overfits_a_handful_of_trajectories() {
    let (g, data) = ieee13_data(6, 2);
    let out = train(&data, g.n_cells(), g.n_switches(), &quick_config(400, 0), |_, _, _| Ok(())).unwrap();
    let first = out.trace[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let last = out.trace[out.trace.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(last < 0.3 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let (g, data) = ieee13_data(30, 2);
    let run = |seed| train(&data, g.n_cells(), g.n_switches(), &quick_config(25, seed), |_, _, _| Ok(())).unwrap();
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a.model.params.values(), b.model.params.values());
    assert_eq!(a.trace, b.trace);
    assert_ne!(a.model.params.values(), c.model.params.values());
}

#[test]
fn rollouts_never_see_rtg_when_guidance_is_pinned() {
    let (g, data) = ieee13_data(200, 2);
    let out = train(&data, g.n_cells(), g.n_switches(), &quick_config(60, 1), |_, _, _| Ok(())).unwrap();
    let cont = Contingencies::new();
    let opts = |rtg0: f64, pinned| RolloutOptions {
        mode: InferenceMode::Argmax,
        seed: 0,
        rtg0,
        pinned_subgoals: pinned,
    };
    for rtg0 in [1000.0, 27536.296, 90000.0] {
        let r1 = rollout(&out.model, &g, &cont, &opts(rtg0, None)).unwrap();
        let pinned = Some(r1.subgoals.clone());
        let r2 = rollout(&out.model, &g, &cont, &opts(rtg0 * 2.0, pinned.clone())).unwrap();
        let r3 = rollout(&out.model, &g, &cont, &opts(-rtg0, pinned)).unwrap();
        assert_eq!(r1.trial.actions, r2.trial.actions);
        assert_eq!(r1.trial.actions, r3.trial.actions);
    }
    // every sampled training window is RTG-free
    let usable: Vec<usize> = (0..data.len()).collect();
    for step in 0..50 {
        let (_, ai) = sample_batch(&data, &usable, &out.model.config, 16, &mut step_rng(1, step));
        for a in &ai {
            check_action_layout(&a.tokens, 2).unwrap();
            assert!(a.tokens.iter().all(|t| t.kind() != TokenType::Rtg));
        }
    }
    let sample = data[0].action_sample(0, 3);
    assert!(action_tokens(&sample).iter().all(|t| t.kind() != TokenType::Rtg));
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let (g, data) = ieee13_data(30, 2);
    let cfg = quick_config(20, 3);
    let out = train(&data, g.n_cells(), g.n_switches(), &cfg, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.json");
    let ckpt = Checkpoint::new(&g, &out.model, Some(&out.optimizer), Some(&cfg), out.rtg_init);
    save_checkpoint(&p, &ckpt).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ckpt);
    let m = back.to_model().unwrap();
    assert_eq!(m.params.values(), out.model.params.values());
    let opt = back.to_optimizer(&m).unwrap().unwrap();
    assert_eq!(opt.step_count(), 20);
    assert_eq!(back.rng.step, 20);

    let opts = RolloutOptions {
        mode: InferenceMode::Sample,
        seed: 8,
        rtg0: 20000.0,
        pinned_subgoals: None,
    };
    let a = rollout(&out.model, &g, &Contingencies::new(), &opts).unwrap();
    let b = rollout(&m, &g, &Contingencies::new(), &opts).unwrap();
    assert_eq!(a.trial, b.trial);

    let other = common::fixture("synth123.feeder");
    assert!(matches!(back.check_feeder(&other, false), Err(PipelineError::FeederMismatch { .. })));
    assert!(back.check_feeder(&other, true).is_ok());
    assert!(back.check_feeder(&g, false).is_ok());

    let text = std::fs::read_to_string(&p).unwrap().replacen("\"format_version\":1", "\"format_version\":7", 1);
    std::fs::write(&p, text).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(PipelineError::Checkpoint(_))));
}

#[test]
fn intermediate_checkpoints_fire_on_schedule() {
    let (g, data) = ieee13_data(10, 2);
    let mut cfg = quick_config(10, 0);
    cfg.checkpoint_every = 4;
    let mut seen = Vec::new();
    train(&data, g.n_cells(), g.n_switches(), &cfg, |step, _, opt| {
        assert_eq!(opt.step_count() as usize, step);
        seen.push(step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![4, 8]);
}

