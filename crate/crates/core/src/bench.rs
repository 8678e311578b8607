//! Experiment harness: seeded runs over designs, learning-curve CSVs per run
//! and an aggregate across seeds.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! <output_dir>/config.toml
//! <output_dir>/manifest.json
//! <output_dir>/aggregate.csv
//! <output_dir>/zero_shot.csv            (optimization runs only)
//! <output_dir>/<design>/seed-<n>/curve.csv
//! <output_dir>/<design>/seed-<n>/rewards.jsonl
//! <output_dir>/<design>/seed-<n>/zero_shot.csv
//! <output_dir>/<design>/seed-<n>/model.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{generate_dataset, generate_final_buffer, load_dataset, BehaviorSpec, TransitionDataset};
use crate::error::{Error, Result};
use crate::eval::{zero_shot_return, EvalSet, Target};
use crate::learning::{sf_train, train_operator, CurveRow, Mode, Monitor, Space, TrainConfig, DEFAULT_RIDGE};
use crate::mdp::{GridWorld, PolicyTable, TabularMdp};
use crate::operator::Design;
use crate::reward::{
    draw_reward_sets, write_reward_records, FamilyId, RewardFamily, RewardFn, SampledReward, Split, UniformRewardSet,
};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_VAR: &str = "OPQ_OUTPUT_ROOT";

/// An operator design or the successor-feature baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Operator(Design),
    SuccessorFeature,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "successor-feature" | "sf" => Ok(Method::SuccessorFeature),
            other => other
                .parse()
                .map(Method::Operator)
                .map_err(|_| Error::config("designs", format!("unknown design '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Operator(d) => d.fmt(f),
            Method::SuccessorFeature => f.write_str("successor-feature"),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub slip: f64,
    pub gamma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            slip: 0.0,
            gamma: 0.99,
        }
    }
}

impl EnvConfig {
    /// `grid5` or `grid5-slip`.
    pub fn preset(name: &str, gamma: f64) -> Result<Self> {
        let grid = match name {
            "grid5" => GridWorld::grid5(),
            "grid5-slip" => GridWorld::grid5_slip(),
            other => return Err(Error::config("env", format!("unknown environment '{other}'"))),
        };
        Ok(Self {
            width: grid.width,
            height: grid.height,
            slip: grid.slip,
            gamma,
        })
    }

    pub fn grid(&self) -> GridWorld {
        GridWorld::new(self.width, self.height, self.slip)
    }

    pub fn id(&self) -> String {
        match (self.width, self.height) {
            (5, 5) if self.slip == 0.0 => "grid5".into(),
            (5, 5) if self.slip == GridWorld::grid5_slip().slip => "grid5-slip".into(),
            (w, h) => format!("grid{w}x{h}-slip{}", self.slip),
        }
    }

    pub fn build(&self) -> Result<TabularMdp> {
        self.grid().build(self.gamma)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("env.width", "grid must have at least one cell"));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(Error::config("env.slip", format!("{} not in [0, 1]", self.slip)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("env.gamma", format!("{} not in (0, 1)", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasePolicy {
    /// Deterministic cycle through every cell.
    Tour,
    Uniform,
}

impl BasePolicy {
    pub fn table(self, grid: &GridWorld) -> Result<PolicyTable> {
        match self {
            BasePolicy::Tour => PolicyTable::deterministic(grid.num_actions(), &grid.tour_actions()),
            BasePolicy::Uniform => Ok(PolicyTable::uniform(grid.num_states(), grid.num_actions())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            BasePolicy::Tour => "tour",
            BasePolicy::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Load this file instead of generating.
    pub path: Option<PathBuf>,
    pub n: usize,
    /// Random-action probability mixed into the behavior policy.
    pub p: f64,
    pub behavior: BasePolicy,
    /// Mix of increasingly greedy behavior policies instead of a single `p`.
    pub final_buffer: bool,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            n: 10_000,
            p: 0.3,
            behavior: BasePolicy::Tour,
            final_buffer: false,
            seed: None,
        }
    }
}

/// The evaluated policy `(1 - epsilon) base + epsilon uniform`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub base: BasePolicy,
    pub epsilon: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            base: BasePolicy::Tour,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardsConfig {
    pub family: FamilyId,
    pub train: usize,
    pub test: usize,
    /// Seed of the Gaussian feature map (feature-linear family and the SF baseline).
    pub feature_seed: u64,
}

impl Default for RewardsConfig {
    fn default() -> Self {
        Self {
            family: FamilyId::RbfBump,
            train: 32,
            test: 16,
            feature_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfConfig {
    pub ridge: f64,
}

impl Default for SfConfig {
    fn default() -> Self {
        Self { ridge: DEFAULT_RIDGE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub horizon: usize,
    /// Monte-Carlo episodes for the cross-check column.
    pub episodes: usize,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            episodes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub designs: Vec<Method>,
    pub checkpoints: bool,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub policy: PolicyConfig,
    pub rewards: RewardsConfig,
    /// Shared by every design; `seed` and `design` are set per run.
    pub train: TrainConfig,
    /// Per-design tables merged over `train`, e.g. `[overrides.maxout]`.
    pub overrides: BTreeMap<String, toml::Table>,
    pub sf: SfConfig,
    pub zero_shot: ZeroShotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            seeds: (0..10).collect(),
            designs: vec![
                Method::SuccessorFeature,
                Method::Operator(Design::Attention),
                Method::Operator(Design::Linear),
                Method::Operator(Design::Vanilla),
            ],
            checkpoints: true,
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            policy: PolicyConfig::default(),
            rewards: RewardsConfig::default(),
            train: TrainConfig::default(),
            overrides: BTreeMap::new(),
            sf: SfConfig::default(),
            zero_shot: ZeroShotConfig::default(),
        }
    }
}

/// Parses a command-line value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("'{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document, then applies `key = value` overrides.
    pub fn parse(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for (k, v) in overrides {
            set_key(&mut table, k, v.clone())?;
        }
        let config: Self = table.try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.designs.is_empty() {
            return Err(Error::config("designs", "at least one design is required"));
        }
        for (i, d) in self.designs.iter().enumerate() {
            if self.designs[..i].contains(d) {
                return Err(Error::config("designs", format!("'{d}' listed twice")));
            }
        }
        self.env.validate()?;
        if let Some(path) = &self.dataset.path {
            if !path.is_file() {
                return Err(Error::config(
                    "dataset.path",
                    format!("{} does not exist", path.display()),
                ));
            }
        } else if self.dataset.n == 0 {
            return Err(Error::config("dataset.n", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.dataset.p) {
            return Err(Error::config("dataset.p", format!("{} not in [0, 1]", self.dataset.p)));
        }
        if !(0.0..=1.0).contains(&self.policy.epsilon) {
            return Err(Error::config(
                "policy.epsilon",
                format!("{} not in [0, 1]", self.policy.epsilon),
            ));
        }
        if self.rewards.train == 0 || self.rewards.test == 0 {
            return Err(Error::config("rewards", "train and test counts must be at least 1"));
        }
        if !(self.sf.ridge >= 0.0) {
            return Err(Error::config("sf.ridge", "must be non-negative"));
        }
        if self.zero_shot.horizon == 0 {
            return Err(Error::config("zero_shot.horizon", "must be at least 1"));
        }
        for key in self.overrides.keys() {
            let method: Method = key
                .parse()
                .map_err(|_| Error::config(format!("overrides.{key}"), "not a design name"))?;
            if !self.designs.contains(&method) {
                return Err(Error::config(format!("overrides.{key}"), "design is not in `designs`"));
            }
        }
        for &m in &self.designs {
            let tc = self.train_config(m)?;
            if m == Method::SuccessorFeature && tc.mode == Mode::Optimization {
                return Err(Error::config("designs", "successor-feature runs need evaluation mode"));
            }
        }
        Ok(())
    }

    /// `train` with the design's overrides merged in.
    pub fn train_config(&self, method: Method) -> Result<TrainConfig> {
        let mut tc = match self.overrides.get(&method.to_string()) {
            None => self.train.clone(),
            Some(over) => {
                let mut base = toml::Table::try_from(&self.train)?;
                merge(&mut base, over);
                base.try_into().map_err(|e: toml::de::Error| {
                    Error::config(format!("overrides.{method}"), e.message().to_string())
                })?
            }
        };
        if let Method::Operator(d) = method {
            tc.design = d;
        }
        tc.validate()?;
        Ok(tc)
    }

    /// `output_dir`, under `$OPQ_OUTPUT_ROOT` when relative and the variable is set.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Learning-curve row of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub design: String,
    pub seed: u64,
    pub step: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub bellman_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub design: String,
    pub seed: u64,
    pub reward: usize,
    pub exact_return: f64,
    pub monte_carlo_return: f64,
    pub optimal_return: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub design: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub curves: Vec<MetricRow>,
    pub zero_shot: Vec<ZeroShotRow>,
    pub failures: Vec<RunFailure>,
    pub runs: usize,
}

impl MetricsReport {
    /// 0 when every run succeeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }

    /// Curve rows of one design at one step, in seed order.
    pub fn at_step(&self, design: &str, step: usize) -> Vec<&MetricRow> {
        self.curves
            .iter()
            .filter(|r| r.design == design && r.step == step)
            .collect()
    }

    /// Last row of every run of `design`.
    pub fn finals(&self, design: &str) -> Vec<&MetricRow> {
        let mut last: BTreeMap<u64, &MetricRow> = BTreeMap::new();
        for r in self.curves.iter().filter(|r| r.design == design) {
            match last.get(&r.seed) {
                Some(prev) if prev.step >= r.step => {}
                _ => {
                    last.insert(r.seed, r);
                }
            }
        }
        last.into_values().collect()
    }
}

#[derive(Serialize)]
struct RunStatus {
    design: String,
    seed: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    csv_schema_version: u32,
    name: &'a str,
    env_id: String,
    runs: Vec<RunStatus>,
}

struct SeedSetup {
    dataset: TransitionDataset,
    train: Vec<SampledReward>,
    test: Vec<SampledReward>,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    mdp: TabularMdp,
    family: Arc<RewardFamily>,
    policy: PolicyTable,
}

struct RunResult {
    curve: Vec<CurveRow>,
    zero_shot: Vec<ZeroShotRow>,
}

fn prepare_seed(ctx: &Context, seed: u64) -> Result<SeedSetup> {
    let c = &ctx.config.dataset;
    let dataset = match &c.path {
        Some(path) => {
            let ds = load_dataset(path)?;
            ds.validate_for(&ctx.mdp)?;
            ds
        }
        None => {
            let grid = ctx.config.env.grid();
            let base = c.behavior.table(&grid)?;
            let ds_seed = c.seed.unwrap_or(seed);
            let env_id = ctx.config.env.id();
            if c.final_buffer {
                generate_final_buffer(&ctx.mdp, &base, c.behavior.name(), c.n, ds_seed, &env_id)?
            } else {
                let spec = BehaviorSpec::new(base, c.p, c.behavior.name())?;
                generate_dataset(&ctx.mdp, &spec, c.n, ds_seed, &env_id)?
            }
        }
    };
    let r = &ctx.config.rewards;
    let (train, test) = draw_reward_sets(&ctx.family, r.train, r.test, seed);
    Ok(SeedSetup { dataset, train, test })
}

fn rewards_of(set: &[SampledReward]) -> Vec<RewardFn> {
    set.iter().map(|s| s.reward.clone()).collect()
}

fn run_one(ctx: &Context, setup: &SeedSetup, method: Method, seed: u64, dir: &Path) -> Result<RunResult> {
    let config = ctx.config;
    let mut tc = config.train_config(method)?;
    tc.seed = seed;
    let target = match tc.mode {
        Mode::Evaluation => Target::Policy(ctx.policy.clone()),
        Mode::Optimization => Target::Optimal,
    };
    let monitor = Monitor {
        train: EvalSet::new(&ctx.mdp, &target, rewards_of(&setup.train))?,
        test: EvalSet::new(&ctx.mdp, &target, rewards_of(&setup.test))?,
    };
    let space = Space::of(&ctx.mdp);
    fs::create_dir_all(dir)?;
    let mut records = BufWriter::new(File::create(dir.join("rewards.jsonl"))?);
    write_reward_records(&mut records, config.rewards.family, Split::Train, &setup.train)?;
    write_reward_records(&mut records, config.rewards.family, Split::Test, &setup.test)?;
    drop(records);

    let (curve, model) = match method {
        Method::SuccessorFeature => {
            let features =
                RewardFamily::standard(FamilyId::FeatureLinear, config.env.grid(), config.rewards.feature_seed)
                    .features()
                    .cloned()
                    .expect("feature-linear family carries features");
            let (_, curve) = sf_train(
                &setup.dataset,
                features,
                &ctx.policy,
                space,
                &tc,
                Some(&monitor),
                config.sf.ridge,
            )?;
            (curve, None)
        }
        Method::Operator(_) => {
            let mut sampler = UniformRewardSet::new(rewards_of(&setup.train))?;
            let out = train_operator(
                &tc,
                &setup.dataset,
                space,
                Some(&ctx.policy),
                &mut sampler,
                Some(&monitor),
            )?;
            (out.curve, Some(out.model))
        }
    };
    write_csv(&dir.join("curve.csv"), &curve)?;

    let mut zero_shot = Vec::new();
    if let (Some(model), Mode::Optimization) = (&model, tc.mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, r) in monitor.test.rewards().iter().enumerate() {
            let z = zero_shot_return(
                model,
                r,
                &ctx.mdp,
                config.zero_shot.horizon,
                config.zero_shot.episodes,
                &mut rng,
            )?;
            zero_shot.push(ZeroShotRow {
                design: method.to_string(),
                seed,
                reward: k,
                exact_return: z.exact,
                monte_carlo_return: z.monte_carlo,
                optimal_return: z.optimal,
                ratio: z.ratio(),
            });
        }
        write_csv(&dir.join("zero_shot.csv"), &zero_shot)?;
    }
    if let (Some(model), true) = (&model, config.checkpoints) {
        model.save(&dir.join("model.json"))?;
    }
    Ok(RunResult { curve, zero_shot })
}

/// Runs every (seed, design) pair. A failing run is recorded and the rest
/// continue; configuration errors abort before any run starts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let out = config.output_path();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;
    let grid = config.env.grid();
    let ctx = Context {
        config,
        mdp: config.env.build()?,
        family: Arc::new(RewardFamily::standard(
            config.rewards.family,
            grid,
            config.rewards.feature_seed,
        )),
        policy: config.policy.base.table(&grid)?.epsilon_mixture(config.policy.epsilon),
    };
    let mut report = MetricsReport::default();
    let mut statuses = Vec::new();

    for &seed in &config.seeds {
        let setup = prepare_seed(&ctx, seed);
        for &method in &config.designs {
            report.runs += 1;
            let dir = out.join(method.to_string()).join(format!("seed-{seed}"));
            let result = match &setup {
                Ok(s) => run_one(&ctx, s, method, seed, &dir),
                Err(e) => Err(Error::Invalid(format!("seed setup failed: {e}"))),
            };
            match result {
                Ok(run) => {
                    log::info!("{method} seed {seed}: {} curve rows", run.curve.len());
                    report.curves.extend(run.curve.iter().map(|r| MetricRow {
                        design: method.to_string(),
                        seed,
                        step: r.step,
                        train_mse: r.train_mse,
                        test_mse: r.test_mse,
                        bellman_loss: r.bellman_loss,
                    }));
                    report.zero_shot.extend(run.zero_shot);
                    statuses.push(RunStatus {
                        design: method.to_string(),
                        seed,
                        status: "ok",
                        error: None,
                    });
                }
                Err(e) => {
                    log::warn!("{method} seed {seed} failed: {e}");
                    report.failures.push(RunFailure {
                        design: method.to_string(),
                        seed,
                        error: e.to_string(),
                    });
                    statuses.push(RunStatus {
                        design: method.to_string(),
                        seed,
                        status: "failed",
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }

    if !report.curves.is_empty() {
        write_csv(&out.join("aggregate.csv"), &aggregate(&report.curves))?;
    }
    if !report.zero_shot.is_empty() {
        write_csv(&out.join("zero_shot.csv"), &report.zero_shot)?;
    }
    let manifest = Manifest {
        csv_schema_version: CSV_SCHEMA_VERSION,
        name: &config.name,
        env_id: config.env.id(),
        runs: statuses,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("manifest.json"))?), &manifest)?;
    Ok(report)
}

/// Median, quartiles and mean of one column across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let t = h - lo as f64;
    match xs.get(lo + 1) {
        Some(&hi) if t > 0.0 => xs[lo] + (hi - xs[lo]) * t,
        _ => xs[lo],
    }
}

/// Summary of non-empty data; NaN everywhere when any value is NaN. The
/// mean sums in ascending order so file order does not matter.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Summary {
            median: f64::NAN,
            q1: f64::NAN,
            q3: f64::NAN,
            mean: f64::NAN,
        };
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    Summary {
        median: quantile_sorted(&xs, 0.5),
        q1: quantile_sorted(&xs, 0.25),
        q3: quantile_sorted(&xs, 0.75),
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub design: String,
    pub step: usize,
    pub seeds: usize,
    pub train_mse_median: f64,
    pub train_mse_q1: f64,
    pub train_mse_q3: f64,
    pub train_mse_mean: f64,
    pub test_mse_median: f64,
    pub test_mse_q1: f64,
    pub test_mse_q3: f64,
    pub test_mse_mean: f64,
    pub bellman_loss_median: f64,
    pub bellman_loss_q1: f64,
    pub bellman_loss_q3: f64,
    pub bellman_loss_mean: f64,
}

/// Per-(design, step) statistics across seeds, sorted by design name then step.
pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(&str, usize), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.design, r.step)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((design, step), rs)| {
            let col = |f: fn(&MetricRow) -> f64| summarize(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (tr, te, bl) = (col(|r| r.train_mse), col(|r| r.test_mse), col(|r| r.bellman_loss));
            AggregateRow {
                design: design.to_string(),
                step,
                seeds: rs.len(),
                train_mse_median: tr.median,
                train_mse_q1: tr.q1,
                train_mse_q3: tr.q3,
                train_mse_mean: tr.mean,
                test_mse_median: te.median,
                test_mse_q1: te.q1,
                test_mse_q3: te.q3,
                test_mse_mean: te.mean,
                bellman_loss_median: bl.median,
                bellman_loss_q1: bl.q1,
                bellman_loss_q3: bl.q3,
                bellman_loss_mean: bl.mean,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path)?.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

/// Collects `<design>/seed-<n>/curve.csv` under `runs`, sorted by design then seed.
pub fn collect_runs(runs: &Path) -> Result<Vec<MetricRow>> {
    let mut found: Vec<(String, u64, PathBuf)> = Vec::new();
    for design in fs::read_dir(runs)? {
        let design = design?;
        if !design.file_type()?.is_dir() {
            continue;
        }
        let name = design.file_name().to_string_lossy().into_owned();
        for run in fs::read_dir(design.path())? {
            let run = run?;
            let file = run.path().join("curve.csv");
            let seed = run
                .file_name()
                .to_string_lossy()
                .strip_prefix("seed-")
                .and_then(|s| s.parse().ok());
            if let (Some(seed), true) = (seed, file.is_file()) {
                found.push((name.clone(), seed, file));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Empty(
            "no <design>/seed-<n>/curve.csv files under the runs directory",
        ));
    }
    found.sort();
    let mut rows = Vec::new();
    for (design, seed, file) in found {
        rows.extend(read_curve_csv(&file)?.into_iter().map(|r| MetricRow {
            design: design.clone(),
            seed,
            step: r.step,
            train_mse: r.train_mse,
            test_mse: r.test_mse,
            bellman_loss: r.bellman_loss,
        }));
    }
    Ok(rows)
}

/// Recomputes `aggregate.csv` from the per-run curves under `runs`.
pub fn report(runs: &Path, out: &Path) -> Result<Vec<AggregateRow>> {
    let rows = aggregate(&collect_runs(runs)?);
    write_csv(out, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
