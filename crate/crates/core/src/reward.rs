//! Reward functions over X, parametric reward families on gridworlds and the
//! seeded samplers that draw train/test reward sets from them.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{GridWorld, StateAction, TabularMdp, ValueTable};

/// A fixed feature table `phi: X -> R^d`, stored row-major over X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    num_actions: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(num_pairs: usize, num_actions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_pairs * dim {
            return Err(Error::DimensionMismatch {
                context: "feature table",
                expected: num_pairs * dim,
                actual: values.len(),
            });
        }
        Ok(Self {
            num_actions,
            dim,
            values,
        })
    }

    /// `gaussian_dim` i.i.d. standard normal features per pair plus a
    /// trailing constant feature.
    pub fn random_gaussian<R: Rng + ?Sized>(
        num_pairs: usize,
        num_actions: usize,
        gaussian_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dim = gaussian_dim + 1;
        let mut values = Vec::with_capacity(num_pairs * dim);
        for _ in 0..num_pairs {
            for _ in 0..gaussian_dim {
                values.push(StandardNormal.sample(rng));
            }
            values.push(1.0);
        }
        Self {
            num_actions,
            dim,
            values,
        }
    }

    pub fn one_hot(num_pairs: usize, num_actions: usize) -> Self {
        let mut values = vec![0.0; num_pairs * num_pairs];
        for x in 0..num_pairs {
            values[x * num_pairs + x] = 1.0;
        }
        Self {
            num_actions,
            dim: num_pairs,
            values,
        }
    }

    pub fn constant(num_pairs: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            dim: 1,
            values: vec![1.0; num_pairs],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pairs(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.dim..(x + 1) * self.dim]
    }

    pub fn phi(&self, x: StateAction) -> &[f64] {
        self.row(x.index(self.num_actions))
    }

    /// `|X| x d` design matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.num_pairs(), self.dim, &self.values)
    }

    /// Largest `|phi_i(x)|` per feature.
    fn column_sup(&self) -> Vec<f64> {
        let mut sup = vec![0.0f64; self.dim];
        for row in self.values.chunks(self.dim) {
            for (m, v) in sup.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
        sup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RewardKind {
    Tabular {
        table: Vec<f64>,
    },
    Constant {
        value: f64,
    },
    /// 1 on every action of the goal state.
    GoalCell {
        goal: usize,
    },
    /// `r(x) = phi(x) . w`.
    FeatureLinear {
        weights: Vec<f64>,
        #[serde(skip)]
        features: Option<Arc<FeatureMap>>,
    },
    /// `exp(-dist^2 / 2 sigma^2)`, Manhattan distance from the state's cell
    /// to a continuous center; actions ignored.
    RbfBump {
        center: (f64, f64),
        sigma: f64,
        width: usize,
    },
}

/// A deterministic, total reward function on X.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFn {
    num_actions: usize,
    kind: RewardKind,
    bound: f64,
}

impl RewardFn {
    pub fn tabular(num_actions: usize, table: Vec<f64>) -> Self {
        let bound = table.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            num_actions,
            kind: RewardKind::Tabular { table },
            bound,
        }
    }

    pub fn constant(num_actions: usize, value: f64) -> Self {
        Self {
            num_actions,
            kind: RewardKind::Constant { value },
            bound: value.abs(),
        }
    }

    pub fn goal_cell(num_actions: usize, goal: usize) -> Self {
        Self {
            num_actions,
            kind: RewardKind::GoalCell { goal },
            bound: 1.0,
        }
    }

    pub fn feature_linear(features: Arc<FeatureMap>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != features.dim() {
            return Err(Error::DimensionMismatch {
                context: "feature-linear weights",
                expected: features.dim(),
                actual: weights.len(),
            });
        }
        let bound = (0..features.num_pairs())
            .map(|x| dot(features.row(x), &weights).abs())
            .fold(0.0, f64::max);
        Ok(Self {
            num_actions: features.num_actions(),
            kind: RewardKind::FeatureLinear {
                weights,
                features: Some(features),
            },
            bound,
        })
    }

    pub fn rbf_bump(grid: &GridWorld, center: (f64, f64), sigma: f64) -> Self {
        Self {
            num_actions: grid.num_actions(),
            kind: RewardKind::RbfBump {
                center,
                sigma,
                width: grid.width,
            },
            bound: 1.0,
        }
    }

    pub fn kind(&self) -> &RewardKind {
        &self.kind
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Upper bound on `|r(x)|`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub(crate) fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn evaluate(&self, x: StateAction) -> f64 {
        match &self.kind {
            RewardKind::Tabular { table } => table[x.index(self.num_actions)],
            RewardKind::Constant { value } => *value,
            RewardKind::GoalCell { goal } => {
                if x.s == *goal {
                    1.0
                } else {
                    0.0
                }
            }
            RewardKind::FeatureLinear { weights, features } => {
                let features = features.as_ref().expect("feature map attached");
                dot(features.phi(x), weights)
            }
            RewardKind::RbfBump { center, sigma, width } => {
                let row = (x.s / width) as f64;
                let col = (x.s % width) as f64;
                let dist = (row - center.0).abs() + (col - center.1).abs();
                (-dist * dist / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    pub fn evaluate_index(&self, x: usize) -> f64 {
        self.evaluate(StateAction::from_index(x, self.num_actions))
    }

    /// Values at a list of state-action pairs.
    pub fn evaluate_many(&self, xs: &[StateAction]) -> Vec<f64> {
        xs.iter().map(|&x| self.evaluate(x)).collect()
    }

    /// Pointwise affine map `alpha * r + c` as a tabular reward over `num_pairs`.
    pub fn affine(&self, num_pairs: usize, alpha: f64, c: f64) -> RewardFn {
        let table = (0..num_pairs).map(|x| alpha * self.evaluate_index(x) + c).collect();
        RewardFn::tabular(self.num_actions, table)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn evaluate_reward(r: &RewardFn, x: StateAction) -> f64 {
    r.evaluate(x)
}

/// `r` evaluated at every pair of the MDP.
pub fn tabularize(r: &RewardFn, mdp: &TabularMdp) -> ValueTable {
    if let RewardKind::Tabular { table } = &r.kind {
        if table.len() == mdp.num_pairs() {
            return ValueTable::new(table.clone());
        }
    }
    ValueTable::new((0..mdp.num_pairs()).map(|x| r.evaluate_index(x)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    GoalCell,
    FeatureLinear,
    RbfBump,
}

impl std::str::FromStr for FamilyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goal-cell" => Ok(FamilyId::GoalCell),
            "feature-linear" => Ok(FamilyId::FeatureLinear),
            "rbf-bump" => Ok(FamilyId::RbfBump),
            other => Err(Error::config("family", format!("unknown reward family '{other}'"))),
        }
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyId::GoalCell => "goal-cell",
            FamilyId::FeatureLinear => "feature-linear",
            FamilyId::RbfBump => "rbf-bump",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Axis-aligned parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.lo.len()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// True when `inner` lies inside `self` and the boxes differ.
    pub fn strictly_contains(&self, inner: &ParamBox) -> bool {
        self.lo.len() == inner.lo.len()
            && self.lo.iter().zip(&inner.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&inner.hi).all(|(a, b)| a >= b)
            && self != inner
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect()
    }
}

pub const DEFAULT_RBF_SIGMA: f64 = 1.5;
pub const DEFAULT_GAUSSIAN_FEATURES: usize = 8;

/// A parametric reward family on a gridworld with separate train and test
/// parameter ranges; the test range strictly contains the train range.
#[derive(Debug, Clone)]
pub struct RewardFamily {
    id: FamilyId,
    grid: GridWorld,
    train: ParamBox,
    test: ParamBox,
    sigma: f64,
    features: Option<Arc<FeatureMap>>,
}

impl RewardFamily {
    /// Goal cells: train goals lie in the interior, test goals anywhere.
    pub fn goal_cell(grid: GridWorld) -> Self {
        let (w, h) = (grid.width as f64, grid.height as f64);
        Self {
            id: FamilyId::GoalCell,
            grid,
            train: ParamBox {
                lo: vec![1.0, 1.0],
                hi: vec![h - 2.0, w - 2.0],
            },
            test: ParamBox {
                lo: vec![0.0, 0.0],
                hi: vec![h - 1.0, w - 1.0],
            },
            sigma: 0.0,
            features: None,
        }
    }

    /// Smooth bumps with a continuous center; same train/test layout as goal cells.
    pub fn rbf_bump(grid: GridWorld, sigma: f64) -> Self {
        Self {
            id: FamilyId::RbfBump,
            sigma,
            ..Self::goal_cell(grid)
        }
    }

    /// `r = phi . w` with `w` in `[-1, 1]^d` for training and `[-1.5, 1.5]^d` for testing.
    pub fn feature_linear(grid: GridWorld, features: Arc<FeatureMap>) -> Self {
        let d = features.dim();
        Self {
            id: FamilyId::FeatureLinear,
            grid,
            train: ParamBox::cube(d, -1.0, 1.0),
            test: ParamBox::cube(d, -1.5, 1.5),
            sigma: 0.0,
            features: Some(features),
        }
    }

    /// Default construction for a family id; the feature-linear map is
    /// frozen from `feature_seed`.
    pub fn standard(id: FamilyId, grid: GridWorld, feature_seed: u64) -> Self {
        match id {
            FamilyId::GoalCell => Self::goal_cell(grid),
            FamilyId::RbfBump => Self::rbf_bump(grid, DEFAULT_RBF_SIGMA),
            FamilyId::FeatureLinear => {
                let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
                let features = FeatureMap::random_gaussian(
                    grid.num_states() * grid.num_actions(),
                    grid.num_actions(),
                    DEFAULT_GAUSSIAN_FEATURES,
                    &mut rng,
                );
                Self::feature_linear(grid, Arc::new(features))
            }
        }
    }

    pub fn id(&self) -> FamilyId {
        self.id
    }

    pub fn grid(&self) -> &GridWorld {
        &self.grid
    }

    pub fn features(&self) -> Option<&Arc<FeatureMap>> {
        self.features.as_ref()
    }

    pub fn range(&self, split: Split) -> &ParamBox {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Upper bound on `|r(x)|` over the union of both splits.
    pub fn reward_bound(&self) -> f64 {
        match self.id {
            FamilyId::GoalCell | FamilyId::RbfBump => 1.0,
            FamilyId::FeatureLinear => {
                let sup = self.features.as_ref().expect("features").column_sup();
                sup.iter()
                    .zip(self.test.lo.iter().zip(&self.test.hi))
                    .map(|(s, (lo, hi))| s * lo.abs().max(hi.abs()))
                    .sum()
            }
        }
    }

    fn draw_params<R: Rng + ?Sized>(&self, split: Split, rng: &mut R) -> Vec<f64> {
        let range = self.range(split);
        match self.id {
            FamilyId::GoalCell => {
                // uniform over the cells inside the box
                let cells: Vec<usize> = (0..self.grid.num_states())
                    .filter(|&s| {
                        let (r, c) = self.grid.coords(s);
                        range.contains(&[r as f64, c as f64])
                    })
                    .collect();
                vec![cells[rng.random_range(0..cells.len())] as f64]
            }
            FamilyId::RbfBump | FamilyId::FeatureLinear => range.sample(rng),
        }
    }

    /// Builds the reward for a parameter vector.
    pub fn instantiate(&self, params: &[f64]) -> Result<RewardFn> {
        let bad = || Error::Invalid(format!("bad parameters {params:?} for family {}", self.id));
        let r = match self.id {
            FamilyId::GoalCell => {
                let [g] = params else { return Err(bad()) };
                if g.fract() != 0.0 || *g < 0.0 || *g as usize >= self.grid.num_states() {
                    return Err(bad());
                }
                RewardFn::goal_cell(self.grid.num_actions(), *g as usize)
            }
            FamilyId::RbfBump => {
                let [row, col] = params else { return Err(bad()) };
                RewardFn::rbf_bump(&self.grid, (*row, *col), self.sigma)
            }
            FamilyId::FeatureLinear => {
                let features = self.features.clone().expect("features");
                RewardFn::feature_linear(features, params.to_vec())?
            }
        };
        Ok(r.with_bound(self.reward_bound()))
    }
}

/// Seeded sampler over one split of a family.
#[derive(Debug, Clone)]
pub struct RewardSampler {
    family: Arc<RewardFamily>,
    split: Split,
    rng: ChaCha8Rng,
}

/// A sampled reward together with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SampledReward {
    pub params: Vec<f64>,
    pub reward: RewardFn,
}

impl RewardSampler {
    pub fn new(family: Arc<RewardFamily>, split: Split, seed: u64) -> Self {
        Self {
            family,
            split,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn family(&self) -> &Arc<RewardFamily> {
        &self.family
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sample_with_params(&mut self) -> SampledReward {
        let params = self.family.draw_params(self.split, &mut self.rng);
        let reward = self.family.instantiate(&params).expect("drawn parameters are in range");
        SampledReward { params, reward }
    }

    pub fn sample_set(&mut self, count: usize) -> Vec<SampledReward> {
        (0..count).map(|_| self.sample_with_params()).collect()
    }
}

pub fn sample_reward(sampler: &mut RewardSampler) -> RewardFn {
    sampler.sample_with_params().reward
}

/// Anything that hands out one reward per training step.
pub trait RewardSource {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> RewardFn;
}

impl RewardSource for RewardSampler {
    fn draw(&mut self, _rng: &mut ChaCha8Rng) -> RewardFn {
        sample_reward(self)
    }
}

/// Uniform distribution over a fixed reward set, driven by the caller's RNG.
#[derive(Debug, Clone)]
pub struct UniformRewardSet {
    rewards: Vec<RewardFn>,
}

impl UniformRewardSet {
    pub fn new(rewards: Vec<RewardFn>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Empty("reward set"));
        }
        Ok(Self { rewards })
    }

    pub fn rewards(&self) -> &[RewardFn] {
        &self.rewards
    }
}

impl RewardSource for UniformRewardSet {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> RewardFn {
        self.rewards[rng.random_range(0..self.rewards.len())].clone()
    }
}

/// One line of a reward-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub family_id: FamilyId,
    pub params: Vec<f64>,
    pub split: Split,
}

/// Train and test sets drawn from independent streams of one seed.
pub fn draw_reward_sets(
    family: &Arc<RewardFamily>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<SampledReward>, Vec<SampledReward>) {
    let train = RewardSampler::new(family.clone(), Split::Train, seed).sample_set(n_train);
    let test = RewardSampler::new(family.clone(), Split::Test, seed ^ 0x5eed_7e57).sample_set(n_test);
    (train, test)
}

pub fn write_reward_records<W: Write>(
    mut out: W,
    family: FamilyId,
    split: Split,
    rewards: &[SampledReward],
) -> Result<()> {
    for r in rewards {
        let rec = RewardRecord {
            family_id: family,
            params: r.params.clone(),
            split,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reward_records<R: BufRead>(input: R) -> Result<Vec<RewardRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridWorld {
        GridWorld::grid5()
    }

    #[test]
    fn tabular_reward_evaluates_by_index() {
        let r = RewardFn::tabular(1, vec![1.0, 0.0]);
        assert_eq!(evaluate_reward(&r, StateAction::new(0, 0)), 1.0);
        assert_eq!(evaluate_reward(&r, StateAction::new(1, 0)), 0.0);
    }

    #[test]
    fn goal_cell_is_indicator_of_goal_state() {
        let r = RewardFn::goal_cell(5, 12);
        for s in 0..25 {
            for a in 0..5 {
                let want = if s == 12 { 1.0 } else { 0.0 };
                assert_eq!(r.evaluate(StateAction::new(s, a)), want);
            }
        }
    }

    #[test]
    fn constant_reward_everywhere() {
        let r = RewardFn::constant(3, -2.5);
        for x in 0..12 {
            assert_eq!(r.evaluate_index(x), -2.5);
        }
    }

    #[test]
    fn tabularize_is_identity_on_tables() {
        let mdp = grid().build(0.9).unwrap();
        let table: Vec<f64> = (0..mdp.num_pairs()).map(|x| x as f64 * 0.1).collect();
        let r = RewardFn::tabular(5, table.clone());
        assert_eq!(&*tabularize(&r, &mdp), &table[..]);
        let again = RewardFn::tabular(5, tabularize(&r, &mdp).into_vec());
        assert_eq!(tabularize(&again, &mdp), tabularize(&r, &mdp));
    }

    #[test]
    fn zero_weights_give_zero_reward() {
        let fam = RewardFamily::standard(FamilyId::FeatureLinear, grid(), 3);
        let mdp = grid().build(0.9).unwrap();
        let r = fam.instantiate(&vec![0.0; fam.features().unwrap().dim()]).unwrap();
        assert!(tabularize(&r, &mdp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rbf_bump_peaks_at_center() {
        let g = grid();
        let r = RewardFn::rbf_bump(&g, (2.0, 3.0), 1.5);
        let center = g.state(2, 3);
        assert_eq!(r.evaluate(StateAction::new(center, 4)), 1.0);
        // one cell away: exp(-1 / (2 * 2.25))
        let near = g.state(2, 4);
        let want = (-1.0f64 / 4.5).exp();
        assert!((r.evaluate(StateAction::new(near, 0)) - want).abs() < 1e-15);
    }

    #[test]
    fn sampler_reproducible_per_seed() {
        for id in [FamilyId::GoalCell, FamilyId::FeatureLinear, FamilyId::RbfBump] {
            let fam = Arc::new(RewardFamily::standard(id, grid(), 11));
            let a: Vec<_> = RewardSampler::new(fam.clone(), Split::Train, 5)
                .sample_set(32)
                .into_iter()
                .map(|r| r.params)
                .collect();
            let b: Vec<_> = RewardSampler::new(fam.clone(), Split::Train, 5)
                .sample_set(32)
                .into_iter()
                .map(|r| r.params)
                .collect();
            let bits = |v: &Vec<Vec<f64>>| -> Vec<u64> { v.iter().flatten().map(|x| x.to_bits()).collect() };
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn train_and_test_counts_and_ranges() {
        for id in [FamilyId::GoalCell, FamilyId::FeatureLinear, FamilyId::RbfBump] {
            let fam = Arc::new(RewardFamily::standard(id, grid(), 1));
            assert!(fam.range(Split::Test).strictly_contains(fam.range(Split::Train)));
            let (train, test) = draw_reward_sets(&fam, 32, 16, 9);
            assert_eq!(train.len(), 32);
            assert_eq!(test.len(), 16);
            for r in &train {
                let p = match id {
                    FamilyId::GoalCell => {
                        let (row, col) = grid().coords(r.params[0] as usize);
                        vec![row as f64, col as f64]
                    }
                    _ => r.params.clone(),
                };
                assert!(fam.range(Split::Train).contains(&p));
            }
        }
    }

    #[test]
    fn sampled_rewards_respect_bound() {
        let mdp = grid().build(0.9).unwrap();
        for id in [FamilyId::GoalCell, FamilyId::FeatureLinear, FamilyId::RbfBump] {
            let fam = Arc::new(RewardFamily::standard(id, grid(), 2));
            let (train, test) = draw_reward_sets(&fam, 32, 16, 4);
            for r in train.iter().chain(&test) {
                let sup = tabularize(&r.reward, &mdp).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(sup <= r.reward.bound() + 1e-12, "{id}: {sup} > {}", r.reward.bound());
            }
        }
    }

    #[test]
    fn feature_linear_matches_phi_dot_w() {
        let fam = RewardFamily::standard(FamilyId::FeatureLinear, grid(), 8);
        let phi = fam.features().unwrap().clone();
        let w: Vec<f64> = (0..phi.dim()).map(|i| 0.3 * i as f64 - 1.0).collect();
        let r = fam.instantiate(&w).unwrap();
        for x in 0..phi.num_pairs() {
            let want: f64 = phi.row(x).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert_eq!(r.evaluate_index(x), want);
        }
    }

    #[test]
    fn reward_records_round_trip() {
        let fam = Arc::new(RewardFamily::standard(FamilyId::RbfBump, grid(), 0));
        let (train, _) = draw_reward_sets(&fam, 4, 0, 1);
        let mut buf = Vec::new();
        write_reward_records(&mut buf, FamilyId::RbfBump, Split::Train, &train).unwrap();
        let recs = read_reward_records(&buf[..]).unwrap();
        assert_eq!(recs.len(), 4);
        for (rec, s) in recs.iter().zip(&train) {
            assert_eq!(rec.params, s.params);
            assert_eq!(fam.instantiate(&rec.params).unwrap(), s.reward);
        }
    }

    #[test]
    fn malformed_reward_record_names_line() {
        let text = "{\"family_id\":\"goal-cell\",\"params\":[3.0],\"split\":\"train\"}\nnot json\n";
        match read_reward_records(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
