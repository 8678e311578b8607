//! Offline operator deep Q-learning: fitted iteration against a slowly
//! moving target network, one freshly sampled reward per step.

mod sf;

pub use sf::{
    ols_weights, sf_as_linear_operator, sf_exact, sf_fit, sf_predict, sf_train, PsiModel, SfModel, SfOperator,
    DEFAULT_RIDGE,
};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::eval::EvalSet;
use crate::mdp::{PolicyTable, StateAction};
use crate::nn::{soft_update, Adam, AdamConfig, Parameters};
use crate::operator::{
    select_reference_points, Design, NetConfig, OperatorModel, RewardOperator, DEFAULT_REFERENCE_POINTS,
};
use crate::reward::{RewardFn, RewardSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Evaluation,
    Optimization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub design: Design,
    pub batch_size: usize,
    pub lr: f64,
    pub target_rate: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub reference_points: usize,
    pub net: NetConfig,
    pub seed: u64,
    /// Sample one `a'` from `pi(. | s')` instead of taking the expectation.
    pub sampled_next_action: bool,
    /// Rewards averaged into each step's loss.
    pub rewards_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Evaluation,
            design: Design::Attention,
            batch_size: 256,
            lr: 1e-3,
            target_rate: 0.005,
            steps: 20_000,
            eval_every: 500,
            reference_points: DEFAULT_REFERENCE_POINTS,
            net: NetConfig::default(),
            seed: 0,
            sampled_next_action: false,
            rewards_per_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::config(
                "target_rate",
                format!("{} not in (0, 1]", self.target_rate),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("{} is not a non-negative step size", self.lr),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.rewards_per_step == 0 {
            return Err(Error::config("rewards_per_step", "must be at least 1"));
        }
        if self.reference_points == 0 {
            return Err(Error::config("reference_points", "must be at least 1"));
        }
        Ok(())
    }
}

/// Frozen copy `theta'` of the live operator.
#[derive(Debug, Clone)]
pub struct TargetModel(OperatorModel);

impl TargetModel {
    pub fn new(live: &OperatorModel) -> Self {
        Self(live.clone())
    }

    pub fn model(&self) -> &OperatorModel {
        &self.0
    }

    /// `theta' <- (1 - rate) theta' + rate theta`.
    pub fn soft_update(&mut self, live: &OperatorModel, rate: f64) -> Result<()> {
        soft_update(&mut self.0, live, rate)
    }
}

/// Evaluation targets `r(x_i) + gamma sum_a' pi(a'|s'_i) G'[r](s'_i, a')`.
pub fn bellman_target_eval(
    target: &dyn RewardOperator,
    r: &RewardFn,
    batch: &[Transition],
    policy: &PolicyTable,
) -> Result<Vec<f64>> {
    let rv = r.evaluate_many(target.references());
    Ok(bellman_targets(target, std::slice::from_ref(r), &[rv], batch, Backup::Expect(policy))?.remove(0))
}

/// Optimization targets `r(x_i) + gamma max_a' G'[r](s'_i, a')`.
pub fn bellman_target_opt(
    target: &dyn RewardOperator,
    r: &RewardFn,
    batch: &[Transition],
    num_actions: usize,
) -> Result<Vec<f64>> {
    let rv = r.evaluate_many(target.references());
    Ok(bellman_targets(target, std::slice::from_ref(r), &[rv], batch, Backup::Max(num_actions))?.remove(0))
}

#[derive(Clone, Copy)]
enum Backup<'a> {
    Expect(&'a PolicyTable),
    Max(usize),
}

/// Targets for several rewards at once; the target network runs a single
/// time over the next pairs.
fn bellman_targets(
    target: &dyn RewardOperator,
    rewards: &[RewardFn],
    rvs: &[Vec<f64>],
    batch: &[Transition],
    backup: Backup,
) -> Result<Vec<Vec<f64>>> {
    let mut next = Vec::new();
    let mut probs = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    for t in batch {
        let start = next.len();
        match backup {
            Backup::Expect(pi) => {
                for a in 0..pi.num_actions() {
                    let p = pi.prob(t.s_next, a);
                    if p > 0.0 {
                        next.push(StateAction::new(t.s_next, a));
                        probs.push(p);
                    }
                }
            }
            Backup::Max(na) => next.extend((0..na).map(|a| StateAction::new(t.s_next, a))),
        }
        spans.push(start..next.len());
    }
    let qs = target.predict_many(rvs, &next)?;
    let gamma = target.gamma();
    Ok(rewards
        .iter()
        .zip(&qs)
        .map(|(r, q)| {
            batch
                .iter()
                .zip(&spans)
                .map(|(t, span)| {
                    let backed = match backup {
                        Backup::Expect(_) => span.clone().map(|k| probs[k] * q[k]).sum(),
                        Backup::Max(_) => q[span.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    r.evaluate(t.pair()) + gamma * backed
                })
                .collect()
        })
        .collect())
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Mean minibatch loss since the previous row.
    pub bellman_loss: f64,
    pub wall_clock_s: f64,
}

/// Reward sets scored at every evaluation step.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub train: EvalSet,
    pub test: EvalSet,
}

/// Shape of the problem the operator is trained on. Only the sizes and
/// the discount are read; transitions come from the dataset alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Space {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
}

impl Space {
    pub fn of(mdp: &crate::mdp::TabularMdp) -> Self {
        Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            gamma: mdp.gamma(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: OperatorModel,
    pub curve: Vec<CurveRow>,
}

fn sample_batch<R: Rng + ?Sized>(records: &[Transition], b: usize, rng: &mut R, out: &mut Vec<Transition>) {
    out.clear();
    out.extend((0..b).map(|_| records[rng.random_range(0..records.len())]));
}

/// Runs the training loop. `policy` is the evaluated policy and is required
/// in evaluation mode.
pub fn train_operator(
    config: &TrainConfig,
    dataset: &TransitionDataset,
    space: Space,
    policy: Option<&PolicyTable>,
    sampler: &mut dyn RewardSource,
    monitor: Option<&Monitor>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let policy = match (config.mode, policy) {
        (Mode::Evaluation, None) => return Err(Error::config("policy", "evaluation mode needs a policy")),
        (_, p) => p,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let refs = select_reference_points(dataset, config.reference_points, &mut rng)?;
    let mut model = OperatorModel::new(
        config.design,
        refs,
        space.num_states,
        space.num_actions,
        space.gamma,
        &config.net,
        &mut rng,
    )?;
    let mut target = TargetModel::new(&model);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model,
    );
    let mut grads = model.zeros_like();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut curve = Vec::new();
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    let started = Instant::now();

    for step in 1..=config.steps {
        sample_batch(dataset.records(), config.batch_size, &mut rng, &mut batch);
        let xs: Vec<StateAction> = batch.iter().map(Transition::pair).collect();
        grads.fill(0.0);
        let rewards: Vec<RewardFn> = (0..config.rewards_per_step).map(|_| sampler.draw(&mut rng)).collect();
        let rvs: Vec<Vec<f64>> = rewards.iter().map(|r| model.reference_set().reward_vector(r)).collect();
        let ys = match (config.mode, config.sampled_next_action) {
            (Mode::Evaluation, true) => {
                let pi = policy.expect("checked above");
                let mut ys = Vec::with_capacity(rewards.len());
                for (r, rv) in rewards.iter().zip(&rvs) {
                    let sampled = sampled_policy(pi, &batch, &mut rng)?;
                    let rv = std::slice::from_ref(rv);
                    ys.extend(bellman_targets(
                        target.model(),
                        std::slice::from_ref(r),
                        rv,
                        &batch,
                        Backup::Expect(&sampled),
                    )?);
                }
                ys
            }
            (Mode::Evaluation, false) => {
                let pi = policy.expect("checked above");
                bellman_targets(target.model(), &rewards, &rvs, &batch, Backup::Expect(pi))?
            }
            (Mode::Optimization, _) => {
                bellman_targets(target.model(), &rewards, &rvs, &batch, Backup::Max(space.num_actions))?
            }
        };
        let rv_refs: Vec<&[f64]> = rvs.iter().map(Vec::as_slice).collect();
        let y_refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let loss = model.loss_and_gradient_many(&rv_refs, &xs, &y_refs, 1.0, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step} ({} design, seed {})",
                config.design, config.seed
            )));
        }
        for net in grads.nets() {
            net.check_finite_grads()?;
        }
        adam.step(&mut model, &grads)?;
        target.soft_update(&model, config.target_rate)?;
        window_loss += loss;
        window_len += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let (train_mse, test_mse) = match monitor {
                Some(m) => (m.train.mse(&model)?, m.test.mse(&model)?),
                None => (f64::NAN, f64::NAN),
            };
            curve.push(CurveRow {
                step,
                train_mse,
                test_mse,
                bellman_loss: window_loss / window_len as f64,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
            log::debug!(
                "{} step {step}: loss {:.3e} test mse {test_mse:.3e}",
                config.design,
                window_loss / window_len as f64
            );
            window_loss = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Policy that is one-hot on a sampled `a' ~ pi(. | s')` for each next state
/// of the batch. States outside the batch keep their original row.
fn sampled_policy<R: Rng + ?Sized>(pi: &PolicyTable, batch: &[Transition], rng: &mut R) -> Result<PolicyTable> {
    let na = pi.num_actions();
    let mut probs: Vec<f64> = (0..pi.num_states()).flat_map(|s| pi.row(s).to_vec()).collect();
    let mut done = vec![false; pi.num_states()];
    for t in batch {
        if !done[t.s_next] {
            done[t.s_next] = true;
            let a = pi.sample(t.s_next, rng);
            let row = &mut probs[t.s_next * na..(t.s_next + 1) * na];
            row.fill(0.0);
            row[a] = 1.0;
        }
    }
    PolicyTable::new(pi.num_states(), na, probs)
}

#[cfg(test)]
mod tests;
