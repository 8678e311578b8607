//! Scoring learned operators against exact tabular ground truth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{
    episodic_return, exact_q_pi, exact_q_star, greedy_policy, policy_return, PolicyTable, StateAction, TabularMdp,
    ValueTable,
};
use crate::operator::RewardOperator;
use crate::reward::{tabularize, RewardFn};

/// Value-iteration tolerance used for optimal ground truth.
pub const Q_STAR_TOL: f64 = 1e-10;

/// Which Q-function a model is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Policy(PolicyTable),
    Optimal,
}

impl Target {
    pub fn q(&self, mdp: &TabularMdp, r: &RewardFn) -> Result<ValueTable> {
        let table = tabularize(r, mdp);
        match self {
            Target::Policy(pi) => exact_q_pi(mdp, pi, &table),
            Target::Optimal => exact_q_star(mdp, &table, Q_STAR_TOL),
        }
    }
}

/// Evaluation pairs `y_i`: every action at every state with initial mass,
/// weighted by `rho(s) / |A|`.
pub fn evaluation_pairs(mdp: &TabularMdp) -> (Vec<StateAction>, Vec<f64>) {
    let na = mdp.num_actions();
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for (s, &rho) in mdp.initial_dist().iter().enumerate() {
        if rho > 0.0 {
            for a in 0..na {
                pairs.push(StateAction::new(s, a));
                weights.push(rho / na as f64);
            }
        }
    }
    (pairs, weights)
}

/// A reward list with its exact Q-values at the evaluation pairs.
#[derive(Debug, Clone)]
pub struct EvalSet {
    rewards: Vec<RewardFn>,
    truths: Vec<Vec<f64>>,
    pairs: Vec<StateAction>,
    weights: Vec<f64>,
}

impl EvalSet {
    pub fn new(mdp: &TabularMdp, target: &Target, rewards: Vec<RewardFn>) -> Result<Self> {
        let (pairs, weights) = evaluation_pairs(mdp);
        Self::with_pairs(mdp, target, rewards, pairs, weights)
    }

    pub fn with_pairs(
        mdp: &TabularMdp,
        target: &Target,
        rewards: Vec<RewardFn>,
        pairs: Vec<StateAction>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Empty("evaluation rewards"));
        }
        if pairs.is_empty() || pairs.len() != weights.len() {
            return Err(Error::Invalid(
                "evaluation pairs and weights must be non-empty and paired".into(),
            ));
        }
        let na = mdp.num_actions();
        let truths = rewards
            .iter()
            .map(|r| {
                let q = target.q(mdp, r)?;
                Ok(pairs.iter().map(|x| q[x.index(na)]).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            rewards,
            truths,
            pairs,
            weights,
        })
    }

    pub fn rewards(&self) -> &[RewardFn] {
        &self.rewards
    }

    pub fn truths(&self) -> &[Vec<f64>] {
        &self.truths
    }

    pub fn pairs(&self) -> &[StateAction] {
        &self.pairs
    }

    /// Weighted mean of `q^2` over pairs and rewards.
    pub fn q_scale(&self) -> f64 {
        self.weighted_mean(|i, k| self.truths[k][i].powi(2))
    }

    fn weighted_mean(&self, term: impl Fn(usize, usize) -> f64) -> f64 {
        let total_w: f64 = self.weights.iter().sum();
        let per_reward: f64 = (0..self.rewards.len())
            .map(|k| (0..self.pairs.len()).map(|i| self.weights[i] * term(i, k)).sum::<f64>() / total_w)
            .sum();
        per_reward / self.rewards.len() as f64
    }

    /// Mean squared error over pairs (initial-distribution weighted) and rewards.
    pub fn mse(&self, op: &dyn RewardOperator) -> Result<f64> {
        let rvs: Vec<Vec<f64>> = self.rewards.iter().map(|r| r.evaluate_many(op.references())).collect();
        let preds = op.predict_many(&rvs, &self.pairs)?;
        Ok(self.weighted_mean(|i, k| (preds[k][i] - self.truths[k][i]).powi(2)))
    }

    /// Same metric for a plain table of predictions per reward.
    pub fn mse_tables(&self, tables: &[ValueTable], num_actions: usize) -> f64 {
        self.weighted_mean(|i, k| (tables[k][self.pairs[i].index(num_actions)] - self.truths[k][i]).powi(2))
    }
}

/// MSE of `model` against exact `q_pi` on `rewards`, averaged over `initial_pairs`.
pub fn mse_eval(
    model: &dyn RewardOperator,
    rewards: &[RewardFn],
    mdp: &TabularMdp,
    policy: &PolicyTable,
    initial_pairs: &[StateAction],
) -> Result<f64> {
    let weights = vec![1.0; initial_pairs.len()];
    let set = EvalSet::with_pairs(
        mdp,
        &Target::Policy(policy.clone()),
        rewards.to_vec(),
        initial_pairs.to_vec(),
        weights,
    )?;
    set.mse(model)
}

/// Greedy zero-shot transfer result for one reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShot {
    /// Exact discounted return of the greedy policy from the initial distribution.
    pub exact: f64,
    /// Monte-Carlo estimate of the same quantity.
    pub monte_carlo: f64,
    pub optimal: f64,
}

impl ZeroShot {
    /// `exact / optimal`, or 1 when the optimum is 0.
    pub fn ratio(&self) -> f64 {
        if self.optimal == 0.0 {
            1.0
        } else {
            self.exact / self.optimal
        }
    }
}

/// Greedy policy of `G[r](s, .)` per state.
pub fn greedy_from_operator(model: &dyn RewardOperator, r: &RewardFn, mdp: &TabularMdp) -> Result<PolicyTable> {
    let all: Vec<StateAction> = mdp.pairs().collect();
    let q = model.apply(r, &all)?;
    Ok(greedy_policy(&q, mdp.num_actions()))
}

pub fn zero_shot_return<R: Rng + ?Sized>(
    model: &dyn RewardOperator,
    r_test: &RewardFn,
    mdp: &TabularMdp,
    horizon: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<ZeroShot> {
    let policy = greedy_from_operator(model, r_test, mdp)?;
    let table = tabularize(r_test, mdp);
    let exact = policy_return(mdp, &policy, &table)?;
    let q_star = exact_q_star(mdp, &table, Q_STAR_TOL)?;
    let optimal = policy_return(mdp, &greedy_policy(&q_star, mdp.num_actions()), &table)?;
    let mut total = 0.0;
    for _ in 0..episodes {
        total += episodic_return(mdp, &policy, r_test, horizon, rng)?;
    }
    Ok(ZeroShot {
        exact,
        monte_carlo: total / episodes.max(1) as f64,
        optimal,
    })
}

/// Monte-Carlo estimate of `q_pi(x)` with its standard error.
pub fn monte_carlo_q<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    r: &RewardFn,
    x: StateAction,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut values = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut s, mut a) = (x.s, x.a);
        let mut discount = 1.0;
        let mut total = 0.0;
        for _ in 0..horizon {
            total += discount * r.evaluate(StateAction::new(s, a));
            discount *= mdp.gamma();
            s = mdp.sample_next(s, a, rng);
            a = policy.sample(s, rng);
        }
        values.push(total);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
