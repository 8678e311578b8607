//! Successor-feature baseline: `psi = (I - gamma P_pi)^{-1} Phi`, an OLS
//! readout per reward, and the same predictor written as a linear operator.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_batch, CurveRow, Monitor, Space, TrainConfig};
use crate::data::{Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::mdp::{exact_resolvent_matrix, PolicyTable, StateAction, TabularMdp, ValueTable};
use crate::nn::{soft_update, Adam, AdamConfig, MlpParams};
use crate::operator::{encode_pairs, RewardOperator};
use crate::reward::{FeatureMap, RewardFn};

/// Default ridge added to the feature covariance.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum PsiModel {
    /// `|X| x d` table.
    Exact(DMatrix<f64>),
    Network(MlpParams),
}

#[derive(Debug, Clone)]
pub struct SfModel {
    features: Arc<FeatureMap>,
    psi: PsiModel,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
}

impl SfModel {
    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn psi(&self) -> &PsiModel {
        &self.psi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `psi(x)` for every pair, as an `|X| x d` matrix.
    pub fn psi_table(&self) -> Result<DMatrix<f64>> {
        match &self.psi {
            PsiModel::Exact(t) => Ok(t.clone()),
            PsiModel::Network(net) => {
                let all: Vec<StateAction> = (0..self.num_states * self.num_actions)
                    .map(|x| StateAction::from_index(x, self.num_actions))
                    .collect();
                Ok(net
                    .forward(&encode_pairs(self.num_states, self.num_actions, &all))?
                    .transpose())
            }
        }
    }
}

/// Tabular successor features from the known MDP.
pub fn sf_exact(mdp: &TabularMdp, policy: &PolicyTable, features: Arc<FeatureMap>) -> Result<SfModel> {
    if features.num_pairs() != mdp.num_pairs() {
        return Err(Error::DimensionMismatch {
            context: "feature map pairs",
            expected: mdp.num_pairs(),
            actual: features.num_pairs(),
        });
    }
    let psi = exact_resolvent_matrix(mdp, policy)? * features.matrix();
    Ok(SfModel {
        features,
        psi: PsiModel::Exact(psi),
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        gamma: mdp.gamma(),
    })
}

/// Fits a `psi` network by fitted iteration on
/// `|| psi(x) - phi(x) - gamma sum_a' pi(a'|s') psi'(s', a') ||^2`.
pub fn sf_fit(
    dataset: &TransitionDataset,
    features: Arc<FeatureMap>,
    policy: &PolicyTable,
    space: Space,
    config: &TrainConfig,
) -> Result<SfModel> {
    Ok(sf_train(dataset, features, policy, space, config, None, DEFAULT_RIDGE)?.0)
}

/// `sf_fit` with a learning curve; MSE columns score the operator view
/// built with `ridge`.
pub fn sf_train(
    dataset: &TransitionDataset,
    features: Arc<FeatureMap>,
    policy: &PolicyTable,
    space: Space,
    config: &TrainConfig,
    monitor: Option<&Monitor>,
    ridge: f64,
) -> Result<(SfModel, Vec<CurveRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (ns, na) = (space.num_states, space.num_actions);
    let d = features.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![ns + na];
    sizes.extend(&config.net.hidden);
    sizes.push(d);
    let mut net = MlpParams::new(&sizes, config.net.activation, &mut rng);
    let mut target = net.clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &net,
    );
    let mut batch: Vec<Transition> = Vec::with_capacity(config.batch_size);
    let b = config.batch_size as f64;
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    let started = Instant::now();

    for step in 1..=config.steps {
        sample_batch(dataset.records(), config.batch_size, &mut rng, &mut batch);

        // psi' at every distinct next pair with policy mass
        let mut slot: HashMap<StateAction, usize> = HashMap::new();
        let mut next = Vec::new();
        for t in &batch {
            for a in 0..na {
                let x = StateAction::new(t.s_next, a);
                if policy.prob(t.s_next, a) > 0.0 && !slot.contains_key(&x) {
                    slot.insert(x, next.len());
                    next.push(x);
                }
            }
        }
        let psi_next = target.forward(&encode_pairs(ns, na, &next))?;
        let mut y = DMatrix::zeros(d, batch.len());
        for (i, t) in batch.iter().enumerate() {
            let mut col = DVector::from_column_slice(features.phi(t.pair()));
            for a in 0..na {
                let p = policy.prob(t.s_next, a);
                if p > 0.0 {
                    col += psi_next.column(slot[&StateAction::new(t.s_next, a)]) * (space.gamma * p);
                }
            }
            y.set_column(i, &col);
        }

        let xs: Vec<StateAction> = batch.iter().map(Transition::pair).collect();
        let (out, trace) = net.forward_trace(encode_pairs(ns, na, &xs))?;
        let resid = out - y;
        let loss = resid.norm_squared() / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "successor-feature loss {loss} at step {step}"
            )));
        }
        let mut grads = net.zeros_like();
        net.backward(&trace, resid * (2.0 / b), &mut grads);
        grads.check_finite_grads()?;
        adam.step(&mut net, &grads)?;
        soft_update(&mut target, &net, config.target_rate)?;
        window.0 += loss;
        window.1 += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let (train_mse, test_mse) = match monitor {
                Some(m) => {
                    let current = SfModel {
                        features: features.clone(),
                        psi: PsiModel::Network(net.clone()),
                        num_states: ns,
                        num_actions: na,
                        gamma: space.gamma,
                    };
                    let op = sf_as_linear_operator(&current, dataset, ridge)?;
                    (m.train.mse(&op)?, m.test.mse(&op)?)
                }
                None => (f64::NAN, f64::NAN),
            };
            curve.push(CurveRow {
                step,
                train_mse,
                test_mse,
                bellman_loss: window.0 / window.1 as f64,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
            window = (0.0, 0);
        }
    }
    let model = SfModel {
        features,
        psi: PsiModel::Network(net),
        num_states: ns,
        num_actions: na,
        gamma: space.gamma,
    };
    Ok((model, curve))
}

/// `(Sigma_phi + lambda I)^{-1}` and `E[phi r]` pieces shared by the OLS
/// readout and the operator view.
fn ridge_inverse(dataset: &TransitionDataset, features: &FeatureMap, lambda: f64) -> Result<DMatrix<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("ridge", format!("{lambda} must be non-negative")));
    }
    let d = features.dim();
    let n = dataset.len() as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for t in dataset.records() {
        let phi = DVector::from_column_slice(features.phi(t.pair()));
        sigma.ger(1.0 / n, &phi, &phi, 1.0);
    }
    for i in 0..d {
        sigma[(i, i)] += lambda;
    }
    sigma
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular("feature covariance; raise the ridge parameter"))
}

/// `w = (Sigma_phi + lambda I)^{-1} E[phi(x) r(x)]` over the dataset.
pub fn ols_weights(dataset: &TransitionDataset, features: &FeatureMap, r: &RewardFn, lambda: f64) -> Result<Vec<f64>> {
    let inv = ridge_inverse(dataset, features, lambda)?;
    let n = dataset.len() as f64;
    let mut b = DVector::zeros(features.dim());
    for t in dataset.records() {
        let x = t.pair();
        b += DVector::from_column_slice(features.phi(x)) * (r.evaluate(x) / n);
    }
    Ok((inv * b).as_slice().to_vec())
}

/// `q(x) = w . psi(x)` for every pair.
pub fn sf_predict(model: &SfModel, w: &[f64]) -> Result<ValueTable> {
    let psi = model.psi_table()?;
    if w.len() != psi.ncols() {
        return Err(Error::DimensionMismatch {
            context: "successor-feature weights",
            expected: psi.ncols(),
            actual: w.len(),
        });
    }
    Ok(ValueTable::new(
        (psi * DVector::from_column_slice(w)).as_slice().to_vec(),
    ))
}

/// Successor features written as a linear-design operator whose reference
/// points are the dataset pairs, with fixed `f(x_i) = (1 - gamma) Sigma^{-1} phi(x_i) / n`
/// and `g = psi`.
#[derive(Debug, Clone)]
pub struct SfOperator {
    refs: Vec<StateAction>,
    /// `d x n`.
    f: DMatrix<f64>,
    /// `d x |X|`.
    g: DMatrix<f64>,
    num_actions: usize,
    gamma: f64,
}

impl SfOperator {
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// `w(x_i | x) = f(x_i) . g(x)` for every dataset point.
    pub fn weights_at(&self, x: StateAction) -> Vec<f64> {
        let g = self.g.column(x.index(self.num_actions));
        self.f.tr_mul(&g).as_slice().to_vec()
    }
}

pub fn sf_as_linear_operator(model: &SfModel, dataset: &TransitionDataset, lambda: f64) -> Result<SfOperator> {
    let inv = ridge_inverse(dataset, model.features(), lambda)?;
    let n = dataset.len() as f64;
    let refs: Vec<StateAction> = dataset.records().iter().map(Transition::pair).collect();
    let d = model.features().dim();
    let mut phi = DMatrix::zeros(d, refs.len());
    for (i, x) in refs.iter().enumerate() {
        phi.set_column(i, &DVector::from_column_slice(model.features().phi(*x)));
    }
    let f = inv * phi * ((1.0 - model.gamma) / n);
    Ok(SfOperator {
        refs,
        f,
        g: model.psi_table()?.transpose(),
        num_actions: model.num_actions,
        gamma: model.gamma,
    })
}

impl RewardOperator for SfOperator {
    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn references(&self) -> &[StateAction] {
        &self.refs
    }

    fn predict(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>> {
        if rv.len() != self.refs.len() {
            return Err(Error::DimensionMismatch {
                context: "reward vector",
                expected: self.refs.len(),
                actual: rv.len(),
            });
        }
        let v = (&self.f * DVector::from_column_slice(rv)) / (1.0 - self.gamma);
        xs.iter()
            .map(|x| {
                let col = x.index(self.num_actions);
                if col >= self.g.ncols() {
                    return Err(Error::Invalid(format!("{x:?} out of range")));
                }
                Ok(self.g.column(col).dot(&v))
            })
            .collect()
    }
}
