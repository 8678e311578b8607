//! Finite MDPs, the one-step Bellman operators and exact tabular oracles.
//!
//! State-action pairs are flattened row-major: `x = s * num_actions + a`.
//! Every oracle here is a pure function of its inputs and is used as ground
//! truth by the rest of the crate.

mod envs;

pub use envs::{bandit2, chain2, chain2_two_actions, loop1, random_mdp, GridAction, GridWorld};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::reward::RewardFn;

pub const MDP_FORMAT_VERSION: u32 = 1;

const STOCHASTIC_TOL: f64 = 1e-12;

/// A state-action pair `x = (s, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateAction {
    pub s: usize,
    pub a: usize,
}

impl StateAction {
    pub fn new(s: usize, a: usize) -> Self {
        Self { s, a }
    }

    #[inline]
    pub fn index(self, num_actions: usize) -> usize {
        self.s * num_actions + self.a
    }

    #[inline]
    pub fn from_index(x: usize, num_actions: usize) -> Self {
        Self {
            s: x / num_actions,
            a: x % num_actions,
        }
    }
}

/// A function over X = S x A stored as a flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueTable(Vec<f64>);

impl ValueTable {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self(vec![c; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ValueTable {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ValueTable {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ValueTable {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Finite discounted MDP with transition tensor `P[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {gamma} not in (0, 1)")));
        }
        let expected = num_states * num_actions * num_states;
        if transition.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "transition tensor",
                expected,
                actual: transition.len(),
            });
        }
        if initial_dist.len() != num_states {
            return Err(Error::DimensionMismatch {
                context: "initial distribution",
                expected: num_states,
                actual: initial_dist.len(),
            });
        }
        for (row_idx, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row).map_err(|why| {
                let x = StateAction::from_index(row_idx, num_actions);
                Error::InvalidMdp(format!("row P[{}][{}]: {why}", x.s, x.a))
            })?;
        }
        check_distribution(&initial_dist).map_err(|why| Error::InvalidMdp(format!("initial distribution: {why}")))?;
        Ok(Self {
            num_states,
            num_actions,
            transition,
            initial_dist,
            gamma,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// |X| = |S| * |A|.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.initial_dist.clone(),
            gamma,
        )
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            initial_dist,
            self.gamma,
        )
    }

    /// Next-state distribution `p(. | s, a)`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.next_dist(s, a), rng)
    }

    pub fn pairs(&self) -> impl Iterator<Item = StateAction> + '_ {
        (0..self.num_pairs()).map(move |x| StateAction::from_index(x, self.num_actions))
    }

    fn check_table(&self, f: &[f64], context: &'static str) -> Result<()> {
        if f.len() != self.num_pairs() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.num_pairs(),
                actual: f.len(),
            });
        }
        Ok(())
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch {
                context: "policy shape",
                expected: self.num_pairs(),
                actual: policy.num_states() * policy.num_actions(),
            });
        }
        Ok(())
    }

    /// Dense `P_pi` over X x X: `P_pi[x, x'] = p(s'|s,a) pi(a'|s')`.
    pub fn p_pi_matrix(&self, policy: &PolicyTable) -> Result<DMatrix<f64>> {
        self.check_policy(policy)?;
        let n = self.num_pairs();
        let na = self.num_actions;
        let mut m = DMatrix::zeros(n, n);
        for x in 0..n {
            let StateAction { s, a } = StateAction::from_index(x, na);
            for (s2, &p) in self.next_dist(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    m[(x, s2 * na + a2)] += p * policy.prob(s2, a2);
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Serialized form of [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub format_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub transition: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;
    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.format_version != MDP_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: MDP_FORMAT_VERSION,
            });
        }
        TabularMdp::new(
            doc.num_states,
            doc.num_actions,
            doc.transition,
            doc.initial_dist,
            doc.gamma,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            format_version: MDP_FORMAT_VERSION,
            num_states: m.num_states,
            num_actions: m.num_actions,
            gamma: m.gamma,
            transition: m.transition,
            initial_dist: m.initial_dist,
        }
    }
}

/// Stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                context: "policy table",
                expected: num_states * num_actions,
                actual: probs.len(),
            });
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row).map_err(|why| Error::InvalidPolicy(format!("state {s}: {why}")))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// One-hot policy from an action per state.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self {
            num_states: actions.len(),
            num_actions,
            probs,
        })
    }

    /// Mixture `(1 - p) * self + p * uniform`.
    pub fn epsilon_mixture(&self, p: f64) -> Self {
        let u = 1.0 / self.num_actions as f64;
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs: self.probs.iter().map(|&q| (1.0 - p) * q + p * u).collect(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }

    /// The action of a one-hot row, if the row is deterministic.
    pub fn deterministic_action(&self, s: usize) -> Option<usize> {
        let row = self.row(s);
        row.iter().position(|&p| p == 1.0)
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(format!("entry {v} is not a finite non-negative probability"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {total}, not 1"));
    }
    Ok(())
}

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// `P_pi[f](s,a) = sum_{s',a'} p(s'|s,a) pi(a'|s') f(s',a')`.
pub fn apply_p_pi(mdp: &TabularMdp, policy: &PolicyTable, f: &[f64]) -> Result<ValueTable> {
    mdp.check_table(f, "apply_p_pi input")?;
    mdp.check_policy(policy)?;
    let na = mdp.num_actions;
    // expected value of f under pi at each state
    let v: Vec<f64> = (0..mdp.num_states)
        .map(|s| (0..na).map(|a| policy.prob(s, a) * f[s * na + a]).sum())
        .collect();
    Ok(expect_next(mdp, &v))
}

/// `P_max[f](s,a) = sum_{s'} p(s'|s,a) max_{a'} f(s',a')`.
pub fn apply_p_max(mdp: &TabularMdp, f: &[f64]) -> Result<ValueTable> {
    mdp.check_table(f, "apply_p_max input")?;
    let v = state_max(f, mdp.num_actions);
    Ok(expect_next(mdp, &v))
}

fn state_max(f: &[f64], num_actions: usize) -> Vec<f64> {
    f.chunks(num_actions)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn expect_next(mdp: &TabularMdp, v: &[f64]) -> ValueTable {
    let out = (0..mdp.num_pairs())
        .map(|x| {
            let StateAction { s, a } = StateAction::from_index(x, mdp.num_actions);
            mdp.next_dist(s, a).iter().zip(v).map(|(p, v)| p * v).sum()
        })
        .collect();
    ValueTable(out)
}

/// `(I - gamma P_pi)^{-1}` over X x X.
pub fn exact_resolvent_matrix(mdp: &TabularMdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let system = bellman_system(mdp, policy)?;
    system.try_inverse().ok_or(Error::Singular("exact_resolvent_matrix"))
}

fn bellman_system(mdp: &TabularMdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let n = mdp.num_pairs();
    let p = mdp.p_pi_matrix(policy)?;
    Ok(DMatrix::identity(n, n) - p * mdp.gamma)
}

/// Solves `q = r + gamma P_pi q` directly.
pub fn exact_q_pi(mdp: &TabularMdp, policy: &PolicyTable, r: &[f64]) -> Result<ValueTable> {
    mdp.check_table(r, "exact_q_pi reward")?;
    let system = bellman_system(mdp, policy)?;
    let q = system
        .lu()
        .solve(&DVector::from_column_slice(r))
        .ok_or(Error::Singular("exact_q_pi"))?;
    Ok(ValueTable(q.as_slice().to_vec()))
}

/// Value iteration for `q = r + gamma P_max q`; stops once the sup-norm change
/// drops below `tol * (1 - gamma)`, so the returned table has Bellman residual
/// at most `tol`.
pub fn exact_q_star(mdp: &TabularMdp, r: &[f64], tol: f64) -> Result<ValueTable> {
    mdp.check_table(r, "exact_q_star reward")?;
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let gamma = mdp.gamma;
    let cap = (100.0 / (1.0 - gamma)).ceil() as usize;
    let threshold = tol * (1.0 - gamma);
    let mut q = r.to_vec();
    let mut change = f64::INFINITY;
    for _ in 0..cap {
        let next_max = apply_p_max(mdp, &q)?;
        change = 0.0;
        for ((qx, rx), px) in q.iter_mut().zip(r).zip(next_max.iter()) {
            let updated = rx + gamma * px;
            change = f64::max(change, (updated - *qx).abs());
            *qx = updated;
        }
        if change < threshold {
            return Ok(ValueTable(q));
        }
    }
    Err(Error::NoConvergence {
        iterations: cap,
        last_change: change,
    })
}

/// Normalized discounted occupancy `d_pi(. | x) = (1-gamma) sum_{t>=0} gamma^t p_pi^t(. | x)`,
/// obtained from the adjoint Bellman equation `d = (1-gamma) delta_x + gamma P_pi^T d`.
pub fn visitation_distribution(mdp: &TabularMdp, policy: &PolicyTable, x: StateAction) -> Result<ValueTable> {
    let n = mdp.num_pairs();
    let xi = checked_index(mdp, x)?;
    let system = bellman_system(mdp, policy)?.transpose();
    let mut rhs = DVector::zeros(n);
    rhs[xi] = 1.0 - mdp.gamma;
    let d = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("visitation_distribution"))?;
    Ok(ValueTable(d.as_slice().to_vec()))
}

pub(crate) fn checked_index(mdp: &TabularMdp, x: StateAction) -> Result<usize> {
    if x.s >= mdp.num_states || x.a >= mdp.num_actions {
        return Err(Error::Invalid(format!(
            "state-action ({}, {}) out of range for {}x{} MDP",
            x.s, x.a, mdp.num_states, mdp.num_actions
        )));
    }
    Ok(x.index(mdp.num_actions))
}

/// Deterministic argmax policy; ties go to the lowest action index.
pub fn greedy_policy(q: &[f64], num_actions: usize) -> PolicyTable {
    let actions: Vec<usize> = q.chunks(num_actions).map(argmax_first).collect();
    PolicyTable::deterministic(num_actions, &actions).expect("argmax is in range")
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One Monte-Carlo episode from `initial_dist`, discounted and truncated at `horizon`.
pub fn episodic_return<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    r: &RewardFn,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    mdp.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    let mut s = mdp.sample_initial(rng);
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let a = policy.sample(s, rng);
        total += discount * r.evaluate(StateAction::new(s, a));
        discount *= mdp.gamma;
        s = mdp.sample_next(s, a, rng);
    }
    Ok(total)
}

/// Exact discounted value of `policy` from the initial distribution.
pub fn policy_return(mdp: &TabularMdp, policy: &PolicyTable, r: &[f64]) -> Result<f64> {
    let q = exact_q_pi(mdp, policy, r)?;
    Ok(initial_value(mdp, policy, &q))
}

/// `sum_s rho(s) sum_a pi(a|s) q(s,a)`.
pub fn initial_value(mdp: &TabularMdp, policy: &PolicyTable, q: &[f64]) -> f64 {
    let na = mdp.num_actions;
    mdp.initial_dist
        .iter()
        .enumerate()
        .map(|(s, rho)| rho * (0..na).map(|a| policy.prob(s, a) * q[s * na + a]).sum::<f64>())
        .sum()
}
