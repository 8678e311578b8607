use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_dataset, BehaviorSpec};
use crate::eval::{EvalSet, Target};
use crate::mdp::{
    chain2, exact_q_pi, exact_q_star, exact_resolvent_matrix, greedy_policy, random_mdp, visitation_distribution,
    GridWorld, TabularMdp,
};
use crate::operator::{FixedWeightOperator, ReferenceSet};
use crate::reward::{tabularize, FeatureMap, UniformRewardSet};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Operator whose weights are the exact visitation distribution of `pi`.
fn resolvent_operator(mdp: &TabularMdp, pi: &PolicyTable) -> FixedWeightOperator {
    let n = mdp.num_pairs();
    let mut d = DMatrix::zeros(n, n);
    for x in 0..n {
        let col = visitation_distribution(mdp, pi, StateAction::from_index(x, mdp.num_actions())).unwrap();
        d.set_column(x, &DVector::from_column_slice(&col));
    }
    let refs: Vec<StateAction> = mdp.pairs().collect();
    let cells: Vec<usize> = (0..n).collect();
    FixedWeightOperator::from_cells(refs, mdp.num_actions(), &d, &cells, mdp.gamma()).unwrap()
}

fn random_transitions(mdp: &TabularMdp, n: usize, seed: u64) -> Vec<Transition> {
    let mut g = rng(seed);
    (0..n)
        .map(|_| {
            let s = g.random_range(0..mdp.num_states());
            let a = g.random_range(0..mdp.num_actions());
            Transition {
                s,
                a,
                s_next: mdp.sample_next(s, a, &mut g),
            }
        })
        .collect()
}

fn small_attention(ns: usize, na: usize, gamma: f64, seed: u64) -> OperatorModel {
    let config = NetConfig {
        hidden: vec![8],
        embed_dim: 4,
        ..NetConfig::default()
    };
    OperatorModel::new(
        Design::Attention,
        ReferenceSet::all_pairs(ns, na),
        ns,
        na,
        gamma,
        &config,
        &mut rng(seed),
    )
    .unwrap()
}

#[test]
fn zero_reward_gives_zero_targets() {
    let mdp = random_mdp(5, 2, 0.9, &mut rng(1)).unwrap();
    let model = small_attention(5, 2, 0.9, 2);
    let batch = random_transitions(&mdp, 40, 3);
    let zero = RewardFn::constant(2, 0.0);
    let pi = PolicyTable::uniform(5, 2);
    assert!(bellman_target_eval(&model, &zero, &batch, &pi)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
    assert!(bellman_target_opt(&model, &zero, &batch, 2)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn exact_q_pi_is_a_target_fixed_point() {
    let mdp = random_mdp(6, 3, 0.9, &mut rng(4)).unwrap();
    let actions: Vec<usize> = (0..6).map(|s| s % 3).collect();
    let pi = PolicyTable::deterministic(3, &actions).unwrap();
    let op = resolvent_operator(&mdp, &pi);
    let table: Vec<f64> = (0..18).map(|x| (x as f64 * 0.7).cos()).collect();
    let r = RewardFn::tabular(3, table.clone());
    let q = exact_q_pi(&mdp, &pi, &table).unwrap();
    let batch = random_transitions(&mdp, 60, 5);
    let y = bellman_target_eval(&op, &r, &batch, &pi).unwrap();
    // stochastic dynamics: the target is the one-step backup through the sampled s'
    for (t, yi) in batch.iter().zip(&y) {
        let expected = table[t.pair().index(3)] + 0.9 * q[StateAction::new(t.s_next, actions[t.s_next]).index(3)];
        assert_abs_diff_eq!(*yi, expected, epsilon = 1e-8);
    }
    // deterministic dynamics: the target is q_pi itself
    let det = GridWorld::grid5().build(0.9).unwrap();
    let pi = PolicyTable::deterministic(5, &GridWorld::grid5().tour_actions()).unwrap();
    let op = resolvent_operator(&det, &pi);
    let r = RewardFn::goal_cell(5, 8);
    let q = exact_q_pi(&det, &pi, &tabularize(&r, &det)).unwrap();
    let batch = random_transitions(&det, 100, 6);
    let y = bellman_target_eval(&op, &r, &batch, &pi).unwrap();
    for (t, yi) in batch.iter().zip(&y) {
        assert_abs_diff_eq!(*yi, q[t.pair().index(5)], epsilon = 1e-8);
    }
}

#[test]
fn single_transition_target_arithmetic() {
    let pi = PolicyTable::uniform(2, 1);
    let op = small_attention(2, 1, 0.5, 7);
    let one = RewardFn::constant(1, 1.0);
    let t = [Transition { s: 0, a: 0, s_next: 1 }];
    // G'[1] = 1 / (1 - 0.5) = 2 for any attention parameters
    assert_abs_diff_eq!(
        bellman_target_eval(&op, &one, &t, &pi).unwrap()[0],
        2.0,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(bellman_target_opt(&op, &one, &t, 1).unwrap()[0], 2.0, epsilon = 1e-12);
}

#[test]
fn exact_q_star_is_an_optimization_fixed_point() {
    let mdp = GridWorld::grid5().build(0.9).unwrap();
    let r = RewardFn::goal_cell(5, 18);
    let table = tabularize(&r, &mdp);
    let q = exact_q_star(&mdp, &table, 1e-12).unwrap();
    let op = resolvent_operator(&mdp, &greedy_policy(&q, 5));
    let batch = random_transitions(&mdp, 100, 8);
    let y = bellman_target_opt(&op, &r, &batch, 5).unwrap();
    for (t, yi) in batch.iter().zip(&y) {
        assert_abs_diff_eq!(*yi, q[t.pair().index(5)], epsilon = 1e-8);
    }
}

#[test]
fn single_action_max_equals_expectation() {
    let mdp = random_mdp(4, 1, 0.8, &mut rng(9)).unwrap();
    let model = small_attention(4, 1, 0.8, 10);
    let r = RewardFn::tabular(1, vec![0.3, -0.2, 1.0, 0.5]);
    let batch = random_transitions(&mdp, 30, 11);
    let pi = PolicyTable::uniform(4, 1);
    assert_eq!(
        bellman_target_eval(&model, &r, &batch, &pi).unwrap(),
        bellman_target_opt(&model, &r, &batch, 1).unwrap()
    );
}

#[test]
fn constant_reward_targets_are_stationary() {
    let mdp = random_mdp(5, 3, 0.95, &mut rng(12)).unwrap();
    let model = small_attention(5, 3, 0.95, 13);
    let c = -0.4;
    let y = bellman_target_opt(&model, &RewardFn::constant(3, c), &random_transitions(&mdp, 20, 14), 3).unwrap();
    for v in y {
        assert_abs_diff_eq!(v, c / (1.0 - 0.95), epsilon = 1e-10);
    }
}

#[test]
fn target_soft_update_rules() {
    let live = small_attention(3, 2, 0.9, 15);
    let mut zero = live.clone();
    zero.fill(0.0);
    let mut ones = live.clone();
    ones.fill(1.0);
    let mut t = TargetModel::new(&zero);
    t.soft_update(&ones, 0.005).unwrap();
    assert!(t.model().flat().iter().all(|&v| v == 0.005));
    t.soft_update(&live, 1.0).unwrap();
    assert_eq!(t.model().flat(), live.flat());

    let mut t = TargetModel::new(&zero);
    for step in 1..=50 {
        t.soft_update(&ones, 0.1).unwrap();
        let expected = 1.0 - 0.9f64.powi(step);
        assert!(t.model().flat().iter().all(|v| (v - expected).abs() < 1e-12));
    }
    assert!(t.soft_update(&ones, 0.0).is_err());
}

fn grid_setup(n: usize) -> (TabularMdp, PolicyTable, TransitionDataset) {
    let grid = GridWorld::grid5();
    let mdp = grid.build(0.9).unwrap();
    let base = PolicyTable::deterministic(5, &grid.tour_actions()).unwrap();
    let spec = BehaviorSpec::new(base.clone(), 0.3, "tour").unwrap();
    let ds = generate_dataset(&mdp, &spec, n, 1, "grid5").unwrap();
    (mdp, base.epsilon_mixture(0.1), ds)
}

fn goal_rewards(goals: &[usize]) -> Vec<RewardFn> {
    goals.iter().map(|&g| RewardFn::goal_cell(5, g)).collect()
}

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        eval_every: 10,
        reference_points: 32,
        net: NetConfig {
            hidden: vec![16],
            embed_dim: 8,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mdp, pi, ds) = grid_setup(500);
    let mut set = UniformRewardSet::new(goal_rewards(&[6, 7, 8])).unwrap();
    let start = train_operator(&quick_config(0), &ds, Space::of(&mdp), Some(&pi), &mut set, None).unwrap();
    let config = TrainConfig {
        lr: 0.0,
        ..quick_config(25)
    };
    let after = train_operator(&config, &ds, Space::of(&mdp), Some(&pi), &mut set, None).unwrap();
    assert_eq!(start.model.flat(), after.model.flat());
    assert_eq!(after.curve.len(), 3);
}

#[test]
fn training_is_deterministic_and_learns() {
    let (mdp, pi, ds) = grid_setup(2000);
    let target = Target::Policy(pi.clone());
    let monitor = Monitor {
        train: EvalSet::new(&mdp, &target, goal_rewards(&[6, 12, 18])).unwrap(),
        test: EvalSet::new(&mdp, &target, goal_rewards(&[0, 24])).unwrap(),
    };
    let config = TrainConfig {
        eval_every: 100,
        ..quick_config(400)
    };
    let run = || {
        let mut set = UniformRewardSet::new(goal_rewards(&[6, 12, 18])).unwrap();
        train_operator(&config, &ds, Space::of(&mdp), Some(&pi), &mut set, Some(&monitor)).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.model.flat(), b.model.flat());
    for (ra, rb) in a.curve.iter().zip(&b.curve) {
        assert_eq!(
            (ra.step, ra.train_mse.to_bits(), ra.bellman_loss.to_bits()),
            (rb.step, rb.train_mse.to_bits(), rb.bellman_loss.to_bits())
        );
    }
    let first = a.curve.first().unwrap().train_mse;
    let last = a.curve.last().unwrap().train_mse;
    assert!(last < first, "train mse went from {first} to {last}");
}

#[test]
fn evaluation_mode_requires_policy() {
    let (mdp, _, ds) = grid_setup(100);
    let mut set = UniformRewardSet::new(goal_rewards(&[1])).unwrap();
    let err = train_operator(&quick_config(1), &ds, Space::of(&mdp), None, &mut set, None).unwrap_err();
    assert!(err.to_string().contains("policy"));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_config(1)
    };
    assert!(train_operator(&bad, &ds, Space::of(&mdp), None, &mut set, None).is_err());
}

#[test]
fn optimization_mode_and_sampled_actions_run() {
    let (mdp, pi, ds) = grid_setup(500);
    for design in [Design::Maxout, Design::Linear, Design::Vanilla] {
        let mut set = UniformRewardSet::new(goal_rewards(&[6, 7])).unwrap();
        let config = TrainConfig {
            mode: Mode::Optimization,
            design,
            net: NetConfig {
                heads: 2,
                ..quick_config(1).net
            },
            ..quick_config(20)
        };
        let out = train_operator(&config, &ds, Space::of(&mdp), None, &mut set, None).unwrap();
        assert!(out.curve.iter().all(|r| r.bellman_loss.is_finite()));
    }
    let mut set = UniformRewardSet::new(goal_rewards(&[6, 7])).unwrap();
    let config = TrainConfig {
        sampled_next_action: true,
        rewards_per_step: 2,
        ..quick_config(20)
    };
    assert!(train_operator(&config, &ds, Space::of(&mdp), Some(&pi), &mut set, None).is_ok());
}

#[test]
fn exact_sf_with_one_hot_features_is_the_resolvent() {
    let mdp = chain2(0.5).unwrap();
    let pi = PolicyTable::uniform(2, 1);
    let sf = sf_exact(&mdp, &pi, Arc::new(FeatureMap::one_hot(2, 1))).unwrap();
    let psi = sf.psi_table().unwrap();
    let resolvent = exact_resolvent_matrix(&mdp, &pi).unwrap();
    assert!((psi - resolvent).abs().max() < 1e-14);

    let sf = sf_exact(&mdp, &pi, Arc::new(FeatureMap::constant(2, 1))).unwrap();
    for v in sf.psi_table().unwrap().iter() {
        assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-12);
    }
}

fn full_coverage(mdp: &TabularMdp, copies: usize) -> TransitionDataset {
    let mut g = rng(99);
    let records = (0..copies)
        .flat_map(|_| mdp.pairs().collect::<Vec<_>>())
        .map(|x| Transition {
            s: x.s,
            a: x.a,
            s_next: mdp.sample_next(x.s, x.a, &mut g),
        })
        .collect();
    TransitionDataset::from_records("test", mdp.gamma(), records)
}

#[test]
fn ols_recovers_tables_and_linear_weights() {
    let mdp = random_mdp(4, 2, 0.9, &mut rng(20)).unwrap();
    let ds = full_coverage(&mdp, 3);
    let table: Vec<f64> = (0..8).map(|x| x as f64 - 3.5).collect();
    let w = ols_weights(
        &ds,
        &FeatureMap::one_hot(8, 2),
        &RewardFn::tabular(2, table.clone()),
        0.0,
    )
    .unwrap();
    for (a, b) in w.iter().zip(&table) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    let features = Arc::new(FeatureMap::random_gaussian(8, 2, 3, &mut rng(21)));
    let w_true = vec![0.5, -1.0, 0.25, 2.0];
    let r = RewardFn::feature_linear(features.clone(), w_true.clone()).unwrap();
    let w = ols_weights(&ds, &features, &r, 0.0).unwrap();
    for (a, b) in w.iter().zip(&w_true) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
    let zero = ols_weights(&ds, &features, &RewardFn::constant(2, 0.0), 1e-6).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    // duplicated feature columns are singular without a ridge
    let dup = FeatureMap::new(8, 2, 2, vec![1.0; 16]).unwrap();
    assert!(matches!(ols_weights(&ds, &dup, &r, 0.0), Err(Error::Singular(_))));
    assert!(ols_weights(&ds, &dup, &r, 1e-3).is_ok());
}

#[test]
fn sf_chain_reproduces_q_pi() {
    let mdp = random_mdp(5, 2, 0.9, &mut rng(22)).unwrap();
    let pi = PolicyTable::uniform(5, 2);
    let features = Arc::new(FeatureMap::random_gaussian(10, 2, 4, &mut rng(23)));
    let sf = sf_exact(&mdp, &pi, features.clone()).unwrap();
    let ds = full_coverage(&mdp, 2);
    let w_true = vec![0.3, -0.7, 1.1, 0.2, -0.5];
    let r = RewardFn::feature_linear(features.clone(), w_true).unwrap();
    let w = ols_weights(&ds, &features, &r, 0.0).unwrap();
    let q = sf_predict(&sf, &w).unwrap();
    let truth = exact_q_pi(&mdp, &pi, &tabularize(&r, &mdp)).unwrap();
    assert!(q.sup_distance(&truth) < 1e-6);

    assert!(sf_predict(&sf, &[0.0; 5]).unwrap().iter().all(|&v| v == 0.0));
    let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let q2 = sf_predict(&sf, &doubled).unwrap();
    for (a, b) in q.iter().zip(q2.iter()) {
        assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-12);
    }
}

#[test]
fn sf_operator_view_matches_readout() {
    let mdp = chain2(0.5).unwrap();
    let pi = PolicyTable::uniform(2, 1);
    let features = Arc::new(FeatureMap::new(2, 1, 2, vec![1.0, 0.3, 1.0, -0.8]).unwrap());
    let sf = sf_exact(&mdp, &pi, features.clone()).unwrap();
    let ds = full_coverage(&mdp, 5);
    let op = sf_as_linear_operator(&sf, &ds, DEFAULT_RIDGE).unwrap();
    let xs: Vec<StateAction> = mdp.pairs().collect();
    let mut g = rng(24);
    for _ in 0..50 {
        let r = RewardFn::tabular(1, vec![g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)]);
        let w = ols_weights(&ds, &features, &r, DEFAULT_RIDGE).unwrap();
        let via_readout = sf_predict(&sf, &w).unwrap();
        let via_operator = op.apply(&r, &xs).unwrap();
        for (a, b) in via_readout.iter().zip(&via_operator) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
    let zero = op.apply(&RewardFn::constant(1, 0.0), &xs).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_operator_weights_are_scaled_successor_entries() {
    let mdp = random_mdp(3, 2, 0.8, &mut rng(25)).unwrap();
    let pi = PolicyTable::uniform(3, 2);
    let sf = sf_exact(&mdp, &pi, Arc::new(FeatureMap::one_hot(6, 2))).unwrap();
    let ds = full_coverage(&mdp, 4);
    let op = sf_as_linear_operator(&sf, &ds, 0.0).unwrap();
    let psi = sf.psi_table().unwrap();
    let x = StateAction::new(1, 1);
    let w = op.weights_at(x);
    for (i, t) in ds.records().iter().enumerate() {
        // each pair appears 4 times
        let expected = (1.0 - 0.8) * psi[(x.index(2), t.pair().index(2))] / 4.0;
        assert_abs_diff_eq!(w[i], expected, epsilon = 1e-12);
    }
}

#[test]
fn fitted_successor_features_approach_exact() {
    let mdp = random_mdp(4, 2, 0.5, &mut rng(26)).unwrap();
    let pi = PolicyTable::uniform(4, 2);
    let features = Arc::new(FeatureMap::random_gaussian(8, 2, 2, &mut rng(27)));
    let exact = sf_exact(&mdp, &pi, features.clone()).unwrap().psi_table().unwrap();
    let ds = full_coverage(&mdp, 100);
    let config = TrainConfig {
        steps: 1500,
        batch_size: 64,
        target_rate: 0.05,
        net: NetConfig {
            hidden: vec![32],
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    };
    let fitted = sf_fit(&ds, features, &pi, Space::of(&mdp), &config)
        .unwrap()
        .psi_table()
        .unwrap();
    let err = (fitted - &exact).abs().max();
    // sampled next states add noise on top of the fit
    assert!(err < 0.15 * exact.abs().max(), "max error {err}");
}
