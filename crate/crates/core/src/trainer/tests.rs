use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::theory::{clipped_surrogate, grpo_identity_check, log_likelihood_objective_grad};
use super::*;
use crate::decoder::{construct_next, verify, Drafter, TailMode};
use crate::oracle::{encode_ranking, SyntheticConfig, SyntheticOracle};
use crate::policy::{PolicyConfig, PolicyKind};

const K: usize = 5;

fn oracle() -> SyntheticOracle {
    SyntheticOracle::new(SyntheticConfig {
        k: K,
        temperature: 0.7,
        interaction_scale: 0.6,
        ..SyntheticConfig::default()
    })
}

fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        kind: PolicyKind::Transformer,
        k: K,
        d_model: 8,
        n_heads: 2,
        ff_dim: 12,
        max_rounds: 5,
        focus_prior: false,
    }
}

fn params(seed: u64) -> PolicyParams {
    PolicyParams::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Output layer replaced by fixed, widely separated biases.
fn saturated(order: &Ranking, gap: f64) -> PolicyParams {
    let mut p = params(1);
    p.segment_mut("out_w").iter_mut().for_each(|v| *v = 0.0);
    let b = p.segment_mut("out_b");
    for (m, &item) in order.as_slice().iter().enumerate() {
        b[item] = gap * (K - m) as f64;
    }
    p
}

fn ctx(i: u64) -> QueryContext {
    QueryContext::new(format!("q{i}"), K, 100 + i)
}

fn sampled_trajectory(p: &PolicyParams, seed: u64) -> Trajectory {
    let o = oracle();
    let drafter = PolicyDrafter::sampled(p, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for q in 0..50 {
        let t = run_episode(&o, &ctx(q), &drafter, 4, &mut rng).unwrap();
        if t.rounds.len() >= 2 {
            return t;
        }
    }
    panic!("no multi-round trajectory found");
}

#[test]
fn advantage_examples() {
    assert_eq!(
        compute_advantages(&[1.0, 0.0], 0.0, AdvantageMode::Group).unwrap(),
        vec![1.0, -1.0]
    );
    assert_eq!(
        compute_advantages(&[1.0, 0.0], 0.5, AdvantageMode::Reference).unwrap(),
        vec![0.5, -0.5]
    );
    assert!(compute_advantages(&[1.0], 0.0, AdvantageMode::Group).is_err());
}

#[test]
fn group_advantage_sum_two_ways() {
    let r = [0.3, -0.7, 0.11, 0.9, 0.25];
    let adv = compute_advantages(&r, 0.0, AdvantageMode::Group).unwrap();
    let direct: f64 = adv.iter().sum();
    let loo: f64 = (0..r.len())
        .map(|i| {
            let others: f64 = r.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
            others / (r.len() - 1) as f64
        })
        .sum();
    let two_way = r.iter().sum::<f64>() - loo;
    assert!((direct - two_way).abs() < 1e-12);
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { group_size: 1, ..TrainConfig::default() },
        TrainConfig { budget: 0, ..TrainConfig::default() },
        TrainConfig { beta_kl: -0.1, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

/// A query whose first-token ranking leaves at least three positions to draft.
fn open_query() -> QueryContext {
    let o = oracle();
    (0..200)
        .map(ctx)
        .find(|c| stage1_example(&o, c).unwrap().fixed + 3 <= K)
        .expect("some query has a long tail")
}

#[test]
fn zero_output_layer_gives_log2_per_pair() {
    let mut p = params(2);
    p.segment_mut("out_w").iter_mut().for_each(|v| *v = 0.0);
    let ex = stage1_example(&oracle(), &open_query()).unwrap();
    let free = K - ex.fixed;
    let (loss, _) = stage1_loss(&p, &[ex]).unwrap();
    let pairs = (free * (free - 1) / 2) as f64;
    assert!((loss - pairs * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn stage1_loss_decreases_on_a_fixed_query() {
    let o = oracle();
    let mut p = params(3);
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, p.len());
    let mut last = f64::INFINITY;
    let c = open_query();
    for step in 0..50 {
        let loss = stage1_step(&mut p, &c, &o, &mut adam).unwrap();
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
    }
}

#[test]
fn saturated_scores_have_near_zero_loss_and_gradient() {
    let ex = stage1_example(&oracle(), &ctx(2)).unwrap();
    let p = saturated(&ex.target, 60.0);
    let (loss, grad) = stage1_loss(&p, &[ex]).unwrap();
    assert!(loss >= 0.0 && loss < 1e-3);
    assert!(grad.norm() < 1e-3);
}

#[test]
fn stage1_example_uses_the_first_token_ranking() {
    let o = oracle();
    let c = ctx(3);
    let ex = stage1_example(&o, &c).unwrap();
    assert_eq!(ex.history.len(), 1);
    let (sigma, s) = &ex.history.rounds()[0];
    assert_eq!(*sigma, Ranking::argsort_desc(&o.first_token_distribution(&c).unwrap()));
    s.check_against(sigma, 1e-9).unwrap();
    assert_eq!(ex.target, o.target_ranking(&c).unwrap());
}

#[test]
fn rollout_examples_start_at_the_first_token_state() {
    let o = oracle();
    let c = open_query();
    let first = stage1_example(&o, &c).unwrap();
    let all = stage1_rollout_examples(&o, &c, 4).unwrap();
    assert!(!all.is_empty() && all.len() <= 3);
    assert_eq!(all[0].history, first.history);
    assert_eq!((all[0].focus_row, all[0].fixed), (first.focus_row, first.fixed));
    for pair in all.windows(2) {
        assert_eq!(pair[1].history.len(), pair[0].history.len() + 1);
        assert!(pair[1].fixed > pair[0].fixed);
    }
}

#[test]
fn reference_rollout_is_deterministic() {
    let o = oracle();
    let snap = ReferenceSnapshot::take(&params(4));
    let first = reference_rollout(&snap, &ctx(5), &o, 5).unwrap();
    for _ in 0..5 {
        assert_eq!(reference_rollout(&snap, &ctx(5), &o, 5).unwrap(), first);
    }
}

#[test]
fn reference_return_matches_resimulation() {
    let o = oracle();
    let p = params(5);
    let snap = ReferenceSnapshot::take(&p);
    for q in 0..10 {
        let c = ctx(q);
        let budget = 4;
        let (_, r_ref) = reference_rollout(&snap, &c, &o, budget).unwrap();

        // hand-rolled serving loop
        let mut ledger = BudgetLedger::new(budget);
        let id = Ranking::identity(K);
        let s_id = encode_ranking(&o, &c, &id, &mut ledger).unwrap();
        let mut current = Ranking::argsort_desc(s_id.row(0));
        let mut history = EncodingHistory::new();
        let mut s_cur = if current == id {
            s_id
        } else {
            encode_ranking(&o, &c, &current, &mut ledger).unwrap()
        };
        history.push(current.clone(), s_cur.clone());
        let drafter = PolicyDrafter::greedy(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        loop {
            let v = verify(&current, &s_cur).unwrap();
            if v.is_fully_consistent(K) {
                break;
            }
            let scores = drafter.tail_scores(&history, v.kept()).unwrap();
            current = construct_next(&current, &v, &scores, TailMode::Greedy, &mut rng);
            if ledger.is_exhausted() {
                break;
            }
            s_cur = encode_ranking(&o, &c, &current, &mut ledger).unwrap();
            history.push(current.clone(), s_cur.clone());
        }
        let expected = episode_reward(&current, &o.target_ranking(&c).unwrap()).unwrap();
        assert_eq!(r_ref, expected, "query {q}");
    }
}

#[test]
fn zero_advantages_and_no_kl_leave_params_unchanged() {
    let o = oracle();
    let batch: Vec<QueryContext> = (0..3).map(ctx).collect();
    for mode in [AdvantageMode::Reference, AdvantageMode::Group] {
        // gaps this wide make every Gumbel draw agree with the greedy tail
        let mut p = saturated(&Ranking::identity(K), 1e3);
        let before = p.values.clone();
        let snap = ReferenceSnapshot::take(&p);
        let cfg = TrainConfig {
            beta_kl: 0.0,
            group_size: 4,
            advantage_mode: mode,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(cfg.adam, p.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = rpo_update(&mut p, &snap, &batch, &o, &cfg, &mut adam, &mut rng).unwrap();
        assert_eq!(stats.mean_advantage, 0.0);
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(p.values, before);
    }
}

#[test]
fn kl_is_zero_at_the_snapshot() {
    let o = oracle();
    let mut p = params(6);
    let snap = ReferenceSnapshot::take(&p);
    // a budget below K leaves room for disagreement, so advantages are nonzero
    let cfg = TrainConfig { group_size: 4, budget: 2, ..TrainConfig::default() };
    let mut adam = Adam::new(cfg.adam, p.len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<QueryContext> = (0..4).map(ctx).collect();
    let stats = rpo_update(&mut p, &snap, &batch, &o, &cfg, &mut adam, &mut rng).unwrap();
    assert_eq!(stats.kl, 0.0);
    assert_ne!(p.values, snap.params.values);
}

#[test]
fn kl_is_non_negative_away_from_the_snapshot() {
    let p = params(7);
    let other = params(8);
    let traj = sampled_trajectory(&p, 3);
    let part = trajectory_objective(&p, &other, &traj, 0.0, 1.0, 1.0, Likelihood::BradleyTerry).unwrap();
    assert!(part.kl_sum > 0.0);
    assert!((part.value + part.kl_sum / traj.rounds.len() as f64).abs() < 1e-12);
}

fn finite_difference_check(beta: f64) {
    let p = params(9);
    let reference = params(10);
    let traj = sampled_trajectory(&p, 4);
    let adv = 0.37;
    let analytic = trajectory_objective(&p, &reference, &traj, adv, beta, 1.0, Likelihood::BradleyTerry).unwrap().grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.values[i] += h;
        let mut minus = p.clone();
        minus.values[i] -= h;
        let fp = trajectory_objective(&plus, &reference, &traj, adv, beta, 1.0, Likelihood::BradleyTerry).unwrap().value;
        let fm = trajectory_objective(&minus, &reference, &traj, adv, beta, 1.0, Likelihood::BradleyTerry).unwrap().value;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.0[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn trajectory_gradient_matches_finite_differences_without_kl() {
    finite_difference_check(0.0);
}

#[test]
fn trajectory_gradient_matches_finite_differences_with_kl() {
    finite_difference_check(0.1);
}

#[test]
fn single_round_gradient_is_advantage_times_log_prob_gradient() {
    let p = params(11);
    let mut traj = sampled_trajectory(&p, 5);
    traj.rounds.truncate(1);
    let adv = -0.8;
    let got = trajectory_objective(&p, &p, &traj, adv, 0.0, 1.0, Likelihood::BradleyTerry).unwrap().grad;
    let (_, g, _) = round_log_prob_grad(&p, &traj, 0).unwrap();
    for (a, b) in got.0.iter().zip(&g.0) {
        assert!((a - adv * b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let o = oracle();
    let mut p = params(12);
    p.segment_mut("out_b")[0] = f64::NAN;
    let before: Vec<u64> = p.values.iter().map(|v| v.to_bits()).collect();
    let snap = ReferenceSnapshot::take(&params(12));
    let cfg = TrainConfig { group_size: 2, ..TrainConfig::default() };
    let mut adam = Adam::new(cfg.adam, p.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = vec![ctx(0)];
    let err = rpo_update(&mut p, &snap, &batch, &o, &cfg, &mut adam, &mut rng).unwrap_err();
    assert!(matches!(err, RsdError::NonFiniteGradient), "{err:?}");
    let after: Vec<u64> = p.values.iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_eq!(adam.steps_taken(), 0);
}

#[test]
fn ratio_surrogate_matches_log_likelihood_at_old_params() {
    let p = params(13);
    let traj = sampled_trajectory(&p, 6);
    assert!(grpo_identity_check(&p, &traj, 0.6).unwrap() <= 1e-6);
    assert!(grpo_identity_check(&p, &traj, -1.3).unwrap() <= 1e-6);
}

#[test]
fn zero_advantage_makes_both_sides_zero() {
    let p = params(14);
    let traj = sampled_trajectory(&p, 7);
    let (v, g) = clipped_surrogate(&p, &p, &traj, 0.0, 0.2).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.0.iter().all(|&x| x == 0.0));
    let rhs = log_likelihood_objective_grad(&p, &traj, 0.0).unwrap();
    assert!(rhs.0.iter().all(|&x| x == 0.0));
}

#[test]
fn clip_is_identity_at_unit_ratio() {
    let p = params(15);
    let traj = sampled_trajectory(&p, 8);
    let (tight, g_tight) = clipped_surrogate(&p, &p, &traj, 0.9, 1e-9).unwrap();
    let (loose, g_loose) = clipped_surrogate(&p, &p, &traj, 0.9, 10.0).unwrap();
    assert!((tight - 0.9).abs() < 1e-12 && (loose - 0.9).abs() < 1e-12);
    assert_eq!(g_tight, g_loose);
}

#[test]
fn clipped_surrogate_gradient_matches_finite_differences() {
    let p = params(16);
    let old = params(17);
    let traj = sampled_trajectory(&p, 9);
    // a wide clip keeps every ratio inside the smooth branch
    let eps = 1e6;
    let (_, analytic) = clipped_surrogate(&p, &old, &traj, 0.5, eps).unwrap();
    let h = 1e-5;
    for i in (0..p.len()).step_by(7) {
        let mut plus = p.clone();
        plus.values[i] += h;
        let mut minus = p.clone();
        minus.values[i] -= h;
        let fp = clipped_surrogate(&plus, &old, &traj, 0.5, eps).unwrap().0;
        let fm = clipped_surrogate(&minus, &old, &traj, 0.5, eps).unwrap().0;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.0[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-4 || (a - numeric).abs() < 1e-9, "coordinate {i}: {a} vs {numeric}");
    }
}

#[test]
fn training_is_deterministic_and_logs_every_update() {
    let o = oracle();
    let queries: Vec<QueryContext> = (0..8).map(ctx).collect();
    let cfg = TrainConfig {
        group_size: 2,
        batch_queries: 4,
        stage1_steps: 5,
        stage2_iters: 2,
        stage2_updates_per_iter: 2,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        seed: 42,
        ..TrainConfig::default()
    };
    let run = || {
        let mut p = params(18);
        let mut log = Vec::new();
        train(&mut p, &o, &queries, &cfg, |e| log.push(e.clone())).unwrap();
        (p.values, log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 5 + 4);
    assert!(matches!(log_a[0], TrainLogEntry::Stage1 { step: 0, .. }));
    assert!(matches!(log_a[8], TrainLogEntry::Stage2 { iter: 1, update: 1, .. }));
}

#[test]
fn log_entries_serialise_with_a_stage_tag() {
    let e = TrainLogEntry::Stage1 { step: 3, loss: 1.5 };
    let json = serde_json::to_string(&e).unwrap();
    assert_eq!(json, r#"{"stage":"stage1","step":3,"loss":1.5}"#);
}

#[test]
fn stage2_log_entries_are_flat_and_round_trip() {
    let e = TrainLogEntry::Stage2 {
        iter: 2,
        update: 0,
        stats: RpoStats {
            mean_return: 0.5,
            mean_ref_return: 0.25,
            mean_advantage: 0.25,
            kl: 0.0,
            objective: 1.0,
            grad_norm: 2.0,
        },
    };
    let v: serde_json::Value = serde_json::to_value(&e).unwrap();
    for key in ["iter", "mean_R", "mean_adv", "kl", "grad_norm"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["stage"], "stage2");
    let back: TrainLogEntry = serde_json::from_value(v).unwrap();
    assert_eq!(back, e);
}

#[test]
fn tempered_objective_matches_finite_differences() {
    let p = params(9);
    let reference = params(10);
    let traj = sampled_trajectory(&p, 11);
    let (adv, beta, tau) = (0.7, 0.3, 0.4);
    let analytic = trajectory_objective(&p, &reference, &traj, adv, beta, tau, Likelihood::PlackettLuce).unwrap().grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..p.len()).step_by(7) {
        let mut plus = p.clone();
        plus.values[i] += h;
        let mut minus = p.clone();
        minus.values[i] -= h;
        let fp = trajectory_objective(&plus, &reference, &traj, adv, beta, tau, Likelihood::PlackettLuce).unwrap().value;
        let fm = trajectory_objective(&minus, &reference, &traj, adv, beta, tau, Likelihood::PlackettLuce).unwrap().value;
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic.0[i]).abs() / fd.abs().max(analytic.0[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn sample_temperature_must_be_positive() {
    let cfg = TrainConfig { sample_temperature: 0.0, ..TrainConfig::default() };
    assert!(cfg.validate().is_err());
}
