//! Operator networks `G_theta[r](x)`: a reward, seen through its values on a
//! fixed set of reference points, is mapped to a Q-value at `x`.
//!
//! Four designs share one batched implementation:
//! - vanilla: `phi(r(Xi)) . psi(x)`
//! - attention: `sum_j softmax_j(f(xi_j) . g(x)) r(xi_j) / (1 - gamma)`
//! - linear: `sum_j (f(xi_j) . g(x)) r(xi_j) / (1 - gamma)`
//! - maxout: the largest of `K` attention heads
//!
//! State-action pairs enter the networks one-hot encoded as `[e_s; e_a]`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::mdp::{argmax_first, StateAction};
use crate::nn::{Activation, MlpParams, MlpTrace, Parameters};
use crate::reward::RewardFn;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_REFERENCE_POINTS: usize = 128;
pub const DEFAULT_MAXOUT_HEADS: usize = 8;

/// Scale applied to the last layer of `f` and `g` at initialization so that
/// attention starts near uniform.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Vanilla,
    Attention,
    Linear,
    Maxout,
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Design::Vanilla),
            "attention" => Ok(Design::Attention),
            "linear" => Ok(Design::Linear),
            "maxout" => Ok(Design::Maxout),
            other => Err(Error::config("design", format!("unknown design '{other}'"))),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Design::Vanilla => "vanilla",
            Design::Attention => "attention",
            Design::Linear => "linear",
            Design::Maxout => "maxout",
        };
        f.write_str(name)
    }
}

/// Reference points `Xi`, frozen once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    points: Vec<StateAction>,
}

impl ReferenceSet {
    pub fn new(points: Vec<StateAction>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        Ok(Self { points })
    }

    /// Every pair of a `num_states x num_actions` space, in index order.
    pub fn all_pairs(num_states: usize, num_actions: usize) -> Self {
        let points = (0..num_states * num_actions)
            .map(|x| StateAction::from_index(x, num_actions))
            .collect();
        Self { points }
    }

    pub fn points(&self) -> &[StateAction] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `r(xi_j)` for every reference point.
    pub fn reward_vector(&self, r: &RewardFn) -> Vec<f64> {
        r.evaluate_many(&self.points)
    }
}

/// `m` distinct dataset pairs drawn without replacement. Asking for more
/// than the dataset holds returns all distinct pairs.
pub fn select_reference_points<R: Rng + ?Sized>(
    dataset: &TransitionDataset,
    m: usize,
    rng: &mut R,
) -> Result<ReferenceSet> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if m == 0 {
        return Err(Error::config("m", "need at least one reference point"));
    }
    let distinct = dataset.distinct_pairs();
    if m >= distinct.len() {
        if m > distinct.len() {
            log::warn!(
                "requested {m} reference points but the dataset has {} distinct pairs; using all",
                distinct.len()
            );
        }
        return ReferenceSet::new(distinct);
    }
    let mut picked: Vec<usize> = sample_indices(rng, distinct.len(), m).into_vec();
    picked.sort_unstable();
    ReferenceSet::new(picked.into_iter().map(|i| distinct[i]).collect())
}

/// Network sizes for a new model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Number of maxout heads `K`.
    pub heads: usize,
    /// Maxout heads use the linear kernel instead of softmax attention.
    pub linear_heads: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 32,
            activation: Activation::Relu,
            heads: DEFAULT_MAXOUT_HEADS,
            linear_heads: false,
        }
    }
}

/// One-hot `[e_s; e_a]` columns, `(num_states + num_actions) x xs.len()`.
pub fn encode_pairs(num_states: usize, num_actions: usize, xs: &[StateAction]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(num_states + num_actions, xs.len());
    for (j, x) in xs.iter().enumerate() {
        m[(x.s, j)] = 1.0;
        m[(num_states + x.a, j)] = 1.0;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Softmax,
    Dot,
}

/// Anything that maps reward values on its reference points to Q-values.
pub trait RewardOperator {
    fn gamma(&self) -> f64;
    fn references(&self) -> &[StateAction];
    /// `G[r](x)` for each `x`, where `rv[j] = r(xi_j)`.
    fn predict(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>>;

    fn apply(&self, r: &RewardFn, xs: &[StateAction]) -> Result<Vec<f64>> {
        self.predict(&r.evaluate_many(self.references()), xs)
    }

    /// Q-values for several rewards at the same points; implementations may
    /// share work across rewards.
    fn predict_many(&self, rvs: &[Vec<f64>], xs: &[StateAction]) -> Result<Vec<Vec<f64>>> {
        rvs.iter().map(|rv| self.predict(rv, xs)).collect()
    }
}

/// Learned operator `G_theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorModel {
    design: Design,
    refs: ReferenceSet,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    linear_heads: bool,
    /// vanilla: `[phi, psi]`; attention and linear: `[f, g]`; maxout: `[f_0, g_0, f_1, g_1, ...]`.
    nets: Vec<MlpParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    design: Design,
    gamma: f64,
    heads: usize,
    model: OperatorModel,
}

/// Per-head forward state kept for the backward pass.
struct HeadPass {
    f_out: DMatrix<f64>,
    f_trace: MlpTrace,
    g_out: DMatrix<f64>,
    g_trace: MlpTrace,
    /// Softmax weights `m x b` (softmax heads only).
    weights: Option<DMatrix<f64>>,
    /// Unscaled head output `sum_j w_j r_j`, `b x R`.
    values: DMatrix<f64>,
}

/// Deduplicated batch: `unique[index[i]] == xs[i]`.
struct Dedup {
    unique: Vec<StateAction>,
    index: Vec<usize>,
}

impl Dedup {
    fn new(xs: &[StateAction]) -> Self {
        let mut slot = HashMap::with_capacity(xs.len());
        let mut unique = Vec::new();
        let index = xs
            .iter()
            .map(|&x| {
                *slot.entry(x).or_insert_with(|| {
                    unique.push(x);
                    unique.len() - 1
                })
            })
            .collect();
        Self { unique, index }
    }

    fn scatter(&self, values: &[f64]) -> Vec<f64> {
        self.index.iter().map(|&i| values[i]).collect()
    }
}

fn softmax_columns(logits: &mut DMatrix<f64>) -> Result<()> {
    for mut col in logits.column_iter_mut() {
        let max = col.max();
        if !max.is_finite() {
            return Err(Error::NonFinite("attention logits".into()));
        }
        col.apply(|v| *v = (*v - max).exp());
        let total = col.sum();
        col /= total;
    }
    Ok(())
}

impl OperatorModel {
    pub fn new<R: Rng + ?Sized>(
        design: Design,
        refs: ReferenceSet,
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        config: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config("gamma", format!("{gamma} not in (0, 1)")));
        }
        if config.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be at least 1"));
        }
        let enc = num_states + num_actions;
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend(&config.hidden);
            s.push(config.embed_dim);
            s
        };
        let kernel_net = |rng: &mut R| {
            let mut net = MlpParams::new(&sizes(enc), config.activation, rng);
            net.scale_output_layer(OUTPUT_INIT_SCALE);
            net
        };
        let nets = match design {
            Design::Vanilla => vec![
                MlpParams::new(&sizes(refs.len()), config.activation, rng),
                MlpParams::new(&sizes(enc), config.activation, rng),
            ],
            Design::Attention | Design::Linear => vec![kernel_net(rng), kernel_net(rng)],
            Design::Maxout => {
                if config.heads == 0 {
                    return Err(Error::config("heads", "maxout needs K >= 1"));
                }
                (0..2 * config.heads).map(|_| kernel_net(rng)).collect()
            }
        };
        Self::from_nets(design, refs, num_states, num_actions, gamma, config.linear_heads, nets)
    }

    /// Assembles a model from explicit networks, checking every shape.
    pub fn from_nets(
        design: Design,
        refs: ReferenceSet,
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        linear_heads: bool,
        nets: Vec<MlpParams>,
    ) -> Result<Self> {
        let model = Self {
            design,
            refs,
            num_states,
            num_actions,
            gamma,
            linear_heads,
            nets,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", format!("{} not in (0, 1)", self.gamma)));
        }
        if self.refs.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        for p in self.refs.points() {
            if p.s >= self.num_states || p.a >= self.num_actions {
                return Err(Error::Invalid(format!("reference point {p:?} out of range")));
            }
        }
        let n = self.nets.len();
        let ok_count = match self.design {
            Design::Maxout => n >= 2 && n.is_multiple_of(2),
            _ => n == 2,
        };
        if !ok_count {
            return Err(Error::Invalid(format!(
                "{} design cannot hold {n} networks",
                self.design
            )));
        }
        let enc = self.encoding_dim();
        for pair in self.nets.chunks(2) {
            let (first, second) = (&pair[0], &pair[1]);
            let first_in = if self.design == Design::Vanilla {
                self.refs.len()
            } else {
                enc
            };
            if first.input_dim() != first_in {
                return Err(Error::DimensionMismatch {
                    context: "operator first stream input",
                    expected: first_in,
                    actual: first.input_dim(),
                });
            }
            if second.input_dim() != enc {
                return Err(Error::DimensionMismatch {
                    context: "operator second stream input",
                    expected: enc,
                    actual: second.input_dim(),
                });
            }
            if first.output_dim() != second.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "operator embedding",
                    expected: first.output_dim(),
                    actual: second.output_dim(),
                });
            }
        }
        Ok(())
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn reference_set(&self) -> &ReferenceSet {
        &self.refs
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_heads(&self) -> usize {
        match self.design {
            Design::Maxout => self.nets.len() / 2,
            _ => 1,
        }
    }

    pub fn nets(&self) -> &[MlpParams] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [MlpParams] {
        &mut self.nets
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn encoding_dim(&self) -> usize {
        self.num_states + self.num_actions
    }

    fn encode(&self, xs: &[StateAction]) -> DMatrix<f64> {
        encode_pairs(self.num_states, self.num_actions, xs)
    }

    fn check_pairs(&self, xs: &[StateAction]) -> Result<()> {
        if let Some(x) = xs.iter().find(|x| x.s >= self.num_states || x.a >= self.num_actions) {
            return Err(Error::Invalid(format!(
                "state-action {x:?} out of range for the operator"
            )));
        }
        Ok(())
    }

    fn check_rv(&self, rv: &[f64]) -> Result<()> {
        if rv.len() != self.refs.len() {
            return Err(Error::DimensionMismatch {
                context: "reward vector",
                expected: self.refs.len(),
                actual: rv.len(),
            });
        }
        if rv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward vector".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Kernel {
        match self.design {
            Design::Linear => Kernel::Dot,
            Design::Maxout if self.linear_heads => Kernel::Dot,
            _ => Kernel::Softmax,
        }
    }

    fn head_pass(
        &self,
        k: usize,
        refs_enc: &DMatrix<f64>,
        x_enc: &DMatrix<f64>,
        rmat: &DMatrix<f64>,
    ) -> Result<HeadPass> {
        let (f_out, f_trace) = self.nets[2 * k].forward_trace(refs_enc.clone())?;
        let (g_out, g_trace) = self.nets[2 * k + 1].forward_trace(x_enc.clone())?;
        let (weights, values) = match self.kernel() {
            Kernel::Softmax => {
                let mut w = f_out.tr_mul(&g_out);
                softmax_columns(&mut w)?;
                let v = w.tr_mul(rmat);
                (Some(w), v)
            }
            Kernel::Dot => {
                let u = &f_out * rmat;
                (None, g_out.tr_mul(&u))
            }
        };
        Ok(HeadPass {
            f_out,
            f_trace,
            g_out,
            g_trace,
            weights,
            values,
        })
    }

    /// Backward through one head given `d loss / d values` (`b x R`).
    fn head_backward(
        &self,
        k: usize,
        pass: HeadPass,
        rmat: &DMatrix<f64>,
        dv: &DMatrix<f64>,
        grads: &mut OperatorModel,
    ) {
        let (df, dg) = match pass.weights {
            Some(w) => {
                // d logit_ji = w_ji sum_k dv_ik (r_jk - v_ik)
                let c: Vec<f64> = (0..dv.nrows()).map(|i| dv.row(i).dot(&pass.values.row(i))).collect();
                let mut dl = rmat * dv.transpose();
                for (i, mut col) in dl.column_iter_mut().enumerate() {
                    for (j, v) in col.iter_mut().enumerate() {
                        *v = w[(j, i)] * (*v - c[i]);
                    }
                }
                (&pass.g_out * dl.transpose(), &pass.f_out * dl)
            }
            None => {
                let u = &pass.f_out * rmat;
                let du = &pass.g_out * dv;
                (du * rmat.transpose(), u * dv.transpose())
            }
        };
        let (gf, gg) = grads.nets.split_at_mut(2 * k + 1);
        self.nets[2 * k].backward(&pass.f_trace, df, &mut gf[2 * k]);
        self.nets[2 * k + 1].backward(&pass.g_trace, dg, &mut gg[0]);
    }

    /// Forward on unique pairs for the reward columns of `rmat`; returns
    /// `b x R` outputs and, for maxout, the active head per entry.
    fn forward_unique(
        &self,
        rmat: &DMatrix<f64>,
        xs: &[StateAction],
    ) -> Result<(DMatrix<f64>, Vec<HeadPass>, DMatrix<usize>)> {
        let x_enc = self.encode(xs);
        let scale = 1.0 / (1.0 - self.gamma);
        let refs_enc = self.encode(self.refs.points());
        let passes = (0..self.num_heads())
            .map(|k| self.head_pass(k, &refs_enc, &x_enc, rmat))
            .collect::<Result<Vec<_>>>()?;
        let (b, nr) = (xs.len(), rmat.ncols());
        let mut active = DMatrix::zeros(b, nr);
        let mut out = DMatrix::zeros(b, nr);
        for c in 0..nr {
            for i in 0..b {
                let column: Vec<f64> = passes.iter().map(|p| p.values[(i, c)]).collect();
                let k = argmax_first(&column);
                active[(i, c)] = k;
                out[(i, c)] = column[k] * scale;
            }
        }
        Ok((out, passes, active))
    }

    fn vanilla_forward(&self, rv: &[f64], x_enc: &DMatrix<f64>) -> Result<Vec<f64>> {
        let p = self.nets[0].forward(&DMatrix::from_column_slice(rv.len(), 1, rv))?;
        let psi = self.nets[1].forward(x_enc)?;
        Ok(psi.tr_mul(&p).as_slice().to_vec())
    }

    fn reward_matrix(&self, rvs: &[&[f64]]) -> Result<DMatrix<f64>> {
        for rv in rvs {
            self.check_rv(rv)?;
        }
        let mut rmat = DMatrix::zeros(self.refs.len(), rvs.len());
        for (c, rv) in rvs.iter().enumerate() {
            rmat.column_mut(c).copy_from_slice(rv);
        }
        Ok(rmat)
    }

    /// Mean squared residual `weight * mean_i (G[r](x_i) - y_i)^2`; its
    /// gradient is added into `grads`.
    pub fn loss_and_gradient(
        &self,
        rv: &[f64],
        xs: &[StateAction],
        targets: &[f64],
        weight: f64,
        grads: &mut OperatorModel,
    ) -> Result<f64> {
        self.loss_and_gradient_many(&[rv], xs, &[targets], weight, grads)
    }

    /// Residual averaged over several rewards on one batch of pairs:
    /// `weight * mean_k mean_i (G[r_k](x_i) - y_ki)^2`. The weight networks
    /// run once for all rewards.
    pub fn loss_and_gradient_many(
        &self,
        rvs: &[&[f64]],
        xs: &[StateAction],
        targets: &[&[f64]],
        weight: f64,
        grads: &mut OperatorModel,
    ) -> Result<f64> {
        self.check_pairs(xs)?;
        if rvs.is_empty() {
            return Err(Error::Empty("reward list"));
        }
        if targets.len() != rvs.len() {
            return Err(Error::DimensionMismatch {
                context: "target sets",
                expected: rvs.len(),
                actual: targets.len(),
            });
        }
        if let Some(t) = targets.iter().find(|t| t.len() != xs.len()) {
            return Err(Error::DimensionMismatch {
                context: "targets",
                expected: xs.len(),
                actual: t.len(),
            });
        }
        if xs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let rmat = self.reward_matrix(rvs)?;
        let dd = Dedup::new(xs);
        let nr = rvs.len();
        let b = xs.len() as f64;
        let w = weight / (b * nr as f64);
        let mut dout = DMatrix::zeros(dd.unique.len(), nr);
        let mut loss = 0.0;

        if self.design == Design::Vanilla {
            let x_enc = self.encode(&dd.unique);
            let (psi, psi_trace) = self.nets[1].forward_trace(x_enc)?;
            let mut dpsi = DMatrix::zeros(psi.nrows(), psi.ncols());
            for (c, rv) in rvs.iter().enumerate() {
                let (p, p_trace) = self.nets[0].forward_trace(DMatrix::from_column_slice(rv.len(), 1, rv))?;
                let out = psi.tr_mul(&p);
                for (i, &u) in dd.index.iter().enumerate() {
                    let e = out[u] - targets[c][i];
                    loss += e * e;
                    dout[(u, c)] += 2.0 * e * w;
                }
                let dv = DMatrix::from_column_slice(dout.nrows(), 1, dout.column(c).as_slice());
                dpsi += &p * dv.transpose();
                self.nets[0].backward(&p_trace, &psi * dv, &mut grads.nets[0]);
            }
            self.nets[1].backward(&psi_trace, dpsi, &mut grads.nets[1]);
            return Ok(loss * weight / (b * nr as f64));
        }

        let (out, passes, active) = self.forward_unique(&rmat, &dd.unique)?;
        for c in 0..nr {
            for (i, &u) in dd.index.iter().enumerate() {
                let e = out[(u, c)] - targets[c][i];
                loss += e * e;
                dout[(u, c)] += 2.0 * e * w;
            }
        }
        let scale = 1.0 / (1.0 - self.gamma);
        for (k, pass) in passes.into_iter().enumerate() {
            let dv = DMatrix::from_fn(dout.nrows(), nr, |i, c| {
                if active[(i, c)] == k {
                    dout[(i, c)] * scale
                } else {
                    0.0
                }
            });
            if dv.iter().all(|&d| d == 0.0) {
                continue;
            }
            self.head_backward(k, pass, &rmat, &dv, grads);
        }
        Ok(loss * weight / (b * nr as f64))
    }

    /// Softmax weights over `Xi` at `x` for head `head`.
    pub fn attention_weights(&self, x: StateAction, head: usize) -> Result<Vec<f64>> {
        if self.kernel() != Kernel::Softmax || self.design == Design::Vanilla {
            return Err(Error::Invalid(format!(
                "{} design has no attention weights",
                self.design
            )));
        }
        Ok(self.weight_matrix(&[x], head)?.as_slice().to_vec())
    }

    /// Raw weights `f(xi_j) . g(x)` of the linear design.
    pub fn linear_weights(&self, x: StateAction) -> Result<Vec<f64>> {
        if self.kernel() != Kernel::Dot {
            return Err(Error::Invalid(format!("{} design has no linear weights", self.design)));
        }
        Ok(self.weight_matrix(&[x], 0)?.as_slice().to_vec())
    }

    /// `m x b` weights of one head at a batch of pairs.
    pub fn weight_matrix(&self, xs: &[StateAction], head: usize) -> Result<DMatrix<f64>> {
        self.check_pairs(xs)?;
        if self.design == Design::Vanilla || head >= self.num_heads() {
            return Err(Error::Invalid(format!(
                "no weight head {head} in {} design",
                self.design
            )));
        }
        let f = self.nets[2 * head].forward(&self.encode(self.refs.points()))?;
        let g = self.nets[2 * head + 1].forward(&self.encode(xs))?;
        let mut w = f.tr_mul(&g);
        if self.kernel() == Kernel::Softmax {
            softmax_columns(&mut w)?;
        }
        Ok(w)
    }

    /// Single-point evaluation `G_theta[r](x)`.
    pub fn apply_operator(&self, r: &RewardFn, x: StateAction) -> Result<f64> {
        Ok(self.apply(r, &[x])?[0])
    }

    /// Linear design, naive `O(b m)` form: the full weight matrix first.
    pub fn apply_linear_naive(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>> {
        self.require(Design::Linear)?;
        self.check_rv(rv)?;
        let w = self.weight_matrix(xs, 0)?;
        let scale = 1.0 / (1.0 - self.gamma);
        Ok(w.column_iter()
            .map(|col| col.iter().zip(rv).map(|(w, r)| w * r).sum::<f64>() * scale)
            .collect())
    }

    /// Linear design, `O(b + m)` form: `v = sum_j r_j f(xi_j) / (1 - gamma)` once, then `v . g(x_i)`.
    pub fn apply_linear_fast(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>> {
        self.require(Design::Linear)?;
        self.check_rv(rv)?;
        self.check_pairs(xs)?;
        let f = self.nets[0].forward(&self.encode(self.refs.points()))?;
        let v = (&f * DVector::from_column_slice(rv)) / (1.0 - self.gamma);
        let g = self.nets[1].forward(&self.encode(xs))?;
        Ok(g.tr_mul(&v).as_slice().to_vec())
    }

    /// Index of the maxout head attaining the max at `x`, lowest on ties.
    pub fn maxout_active_head(&self, r: &RewardFn, x: StateAction) -> Result<usize> {
        self.require(Design::Maxout)?;
        self.check_pairs(&[x])?;
        let rv = self.refs.reward_vector(r);
        self.check_rv(&rv)?;
        Ok(self.forward_unique(&self.reward_matrix(&[&rv])?, &[x])?.2[(0, 0)])
    }

    /// Attention weights read as an estimate of `d_pi(. | x)` restricted to `Xi`.
    pub fn implied_visitation(&self, x: StateAction) -> Result<Vec<f64>> {
        self.require(Design::Attention)?;
        self.attention_weights(x, 0)
    }

    fn require(&self, design: Design) -> Result<()> {
        if self.design != design {
            return Err(Error::Invalid(format!(
                "operation needs the {design} design, model is {}",
                self.design
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            design: self.design,
            gamma: self.gamma,
            heads: self.num_heads(),
            model: self.clone(),
        };
        serde_json::to_writer(BufWriter::new(File::create(path)?), &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let doc: Checkpoint = serde_json::from_value(raw)?;
        doc.model.validate()?;
        if doc.design != doc.model.design || doc.heads != doc.model.num_heads() || doc.gamma != doc.model.gamma {
            return Err(Error::Invalid("checkpoint header disagrees with its model".into()));
        }
        Ok(doc.model)
    }
}

impl RewardOperator for OperatorModel {
    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn references(&self) -> &[StateAction] {
        self.refs.points()
    }

    fn predict(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>> {
        self.check_rv(rv)?;
        self.check_pairs(xs)?;
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let dd = Dedup::new(xs);
        let out = if self.design == Design::Vanilla {
            self.vanilla_forward(rv, &self.encode(&dd.unique))?
        } else {
            self.forward_unique(&self.reward_matrix(&[rv])?, &dd.unique)?
                .0
                .as_slice()
                .to_vec()
        };
        Ok(dd.scatter(&out))
    }

    fn predict_many(&self, rvs: &[Vec<f64>], xs: &[StateAction]) -> Result<Vec<Vec<f64>>> {
        if self.design == Design::Vanilla {
            return rvs.iter().map(|rv| self.predict(rv, xs)).collect();
        }
        for rv in rvs {
            self.check_rv(rv)?;
        }
        let dd = Dedup::new(xs);
        let heads = (0..self.num_heads())
            .map(|k| self.weight_matrix(&dd.unique, k))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / (1.0 - self.gamma);
        Ok(rvs
            .iter()
            .map(|rv| {
                let r = DVector::from_column_slice(rv);
                let per_head: Vec<DVector<f64>> = heads.iter().map(|w| w.tr_mul(&r)).collect();
                let out: Vec<f64> = (0..dd.unique.len())
                    .map(|i| per_head.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max) * scale)
                    .collect();
                dd.scatter(&out)
            })
            .collect())
    }
}

impl Parameters for OperatorModel {
    fn tensors(&self) -> Vec<&[f64]> {
        self.nets.iter().flat_map(|n| n.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets.iter_mut().flat_map(|n| n.tensors_mut()).collect()
    }
}

/// Operator with explicit weights `w(xi_j | x)` for every `x` in X; used to
/// probe how well the weighted-average form can represent a resolvent.
#[derive(Debug, Clone)]
pub struct FixedWeightOperator {
    refs: Vec<StateAction>,
    num_actions: usize,
    /// `m x |X|`.
    weights: DMatrix<f64>,
    gamma: f64,
}

impl FixedWeightOperator {
    pub fn new(refs: Vec<StateAction>, num_actions: usize, weights: DMatrix<f64>, gamma: f64) -> Result<Self> {
        if weights.nrows() != refs.len() {
            return Err(Error::DimensionMismatch {
                context: "fixed weights",
                expected: refs.len(),
                actual: weights.nrows(),
            });
        }
        Ok(Self {
            refs,
            num_actions,
            weights,
            gamma,
        })
    }

    /// Aggregates exact visitation masses into cells: column `x` of `visitation`
    /// is `d_pi(. | x)` and `cell[x']` names the reference point owning `x'`.
    pub fn from_cells(
        refs: Vec<StateAction>,
        num_actions: usize,
        visitation: &DMatrix<f64>,
        cell: &[usize],
        gamma: f64,
    ) -> Result<Self> {
        let mut w = DMatrix::zeros(refs.len(), visitation.ncols());
        for (x, col) in visitation.column_iter().enumerate() {
            for (x2, &mass) in col.iter().enumerate() {
                w[(cell[x2], x)] += mass;
            }
        }
        Self::new(refs, num_actions, w, gamma)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

impl RewardOperator for FixedWeightOperator {
    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn references(&self) -> &[StateAction] {
        &self.refs
    }

    fn predict(&self, rv: &[f64], xs: &[StateAction]) -> Result<Vec<f64>> {
        let scale = 1.0 / (1.0 - self.gamma);
        xs.iter()
            .map(|x| {
                let col = x.index(self.num_actions);
                if col >= self.weights.ncols() {
                    return Err(Error::Invalid(format!("{x:?} outside the weight table")));
                }
                Ok(self.weights.column(col).iter().zip(rv).map(|(w, r)| w * r).sum::<f64>() * scale)
            })
            .collect()
    }
}
