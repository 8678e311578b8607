use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use opq_core::bench::{self, parse_value, BasePolicy, EnvConfig, ExperimentConfig};
use opq_core::data::{generate_dataset, generate_final_buffer, save_dataset, BehaviorSpec};
use opq_core::eval::{zero_shot_return, EvalSet, Target};
use opq_core::mdp::{self, exact_q_pi, exact_q_star, greedy_policy, PolicyTable, TabularMdp};
use opq_core::operator::{OperatorModel, RewardOperator};
use opq_core::reward::{draw_reward_sets, read_reward_records, write_reward_records, RewardFamily, Split};
use opq_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "opq", version, about = "Operator deep Q-learning experiments on gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write a transition dataset
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// tour | uniform
        #[arg(long)]
        behavior: Option<String>,
        #[arg(long)]
        final_buffer: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the frozen train/test reward sets, one file per seed
    DumpRewards {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Comma-separated
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        feature_seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output_dir: Option<String>,
        /// Comma-separated
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated, e.g. attention,linear
        #[arg(long)]
        designs: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        family: Option<String>,
        /// Existing dataset file
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Score a checkpoint on a reward-set file
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rewards: PathBuf,
        /// train | test; all records when omitted
        #[arg(long)]
        split: Option<String>,
        /// Compare against q* and report zero-shot returns
        #[arg(long)]
        optimal: bool,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        feature_seed: Option<u64>,
    },
    /// Exact Q table of a reward
    Oracle {
        /// loop1 | chain2 | chain2-2a | bandit2 | grid5 | grid5-slip
        #[arg(long, conflicts_with = "mdp")]
        env: Option<String>,
        /// MDP document (JSON)
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Comma-separated values, one per (state, action), row-major
        #[arg(long, allow_hyphen_values = true)]
        reward: String,
        /// uniform | tour; uniform when omitted
        #[arg(long, conflicts_with = "optimal")]
        policy: Option<String>,
        #[arg(long)]
        optimal: bool,
    },
    /// Recompute the aggregate CSV from per-run curves
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to <runs>/aggregate.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment TOML; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// grid5 | grid5-slip
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Any config key, e.g. --set train.lr=0.001
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

type Overrides = Vec<(String, toml::Value)>;

impl Common {
    fn overrides(&self) -> Result<Overrides> {
        let mut out = Overrides::new();
        if let Some(env) = &self.env {
            let e = EnvConfig::preset(env, 0.5)?;
            out.push(("env.width".into(), toml::Value::Integer(e.width as i64)));
            out.push(("env.height".into(), toml::Value::Integer(e.height as i64)));
            out.push(("env.slip".into(), toml::Value::Float(e.slip)));
        }
        push(&mut out, "env.gamma", self.gamma);
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        Ok(out)
    }

    fn load(&self, mut extra: Overrides) -> Result<ExperimentConfig> {
        let mut over = self.overrides()?;
        over.append(&mut extra);
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &over),
            None => ExperimentConfig::parse("", &over),
        }
    }
}

fn push<T: ToString>(out: &mut Overrides, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), parse_value(&v.to_string())));
    }
}

fn push_str(out: &mut Overrides, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        out.push((key.to_string(), toml::Value::String(v.clone())));
    }
}

fn push_list(out: &mut Overrides, key: &str, value: &Option<String>, quoted: bool) {
    if let Some(v) = value {
        let items: Vec<toml::Value> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                if quoted {
                    toml::Value::String(s.into())
                } else {
                    parse_value(s)
                }
            })
            .collect();
        out.push((key.to_string(), toml::Value::Array(items)));
    }
}

fn parse_floats(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim().parse().map_err(|_| Error::Config {
                key: "reward".into(),
                reason: format!("'{v}' is not a number"),
            })
        })
        .collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn small_env(name: &str, gamma: f64) -> Result<TabularMdp> {
    match name {
        "loop1" => mdp::loop1(gamma),
        "chain2" => mdp::chain2(gamma),
        "chain2-2a" => mdp::chain2_two_actions(gamma),
        "bandit2" => mdp::bandit2(gamma),
        other => EnvConfig::preset(other, gamma)?.build(),
    }
}

fn oracle(
    env: Option<String>,
    mdp_path: Option<PathBuf>,
    gamma: Option<f64>,
    reward: &str,
    policy: Option<String>,
    optimal: bool,
) -> Result<()> {
    let mdp = match (env, mdp_path) {
        (_, Some(path)) => {
            let m = TabularMdp::from_json(&fs::read_to_string(&path)?)?;
            match gamma {
                Some(g) => m.with_gamma(g)?,
                None => m,
            }
        }
        (Some(name), None) => small_env(&name, gamma.unwrap_or(0.99))?,
        (None, None) => {
            return Err(Error::Config {
                key: "env".into(),
                reason: "give --env or --mdp".into(),
            })
        }
    };
    let r = parse_floats(reward)?;
    if r.len() != mdp.num_pairs() {
        return Err(Error::Config {
            key: "reward".into(),
            reason: format!("expected {} values, got {}", mdp.num_pairs(), r.len()),
        });
    }
    let q = if optimal {
        // one exact policy solve on the greedy policy removes the iteration residue
        let vi = exact_q_star(&mdp, &r, opq_core::eval::Q_STAR_TOL)?;
        exact_q_pi(&mdp, &greedy_policy(&vi, mdp.num_actions()), &r)?
    } else {
        let pi = match policy.as_deref() {
            None | Some("uniform") => PolicyTable::uniform(mdp.num_states(), mdp.num_actions()),
            Some("tour") => {
                let grid = EnvConfig::preset("grid5", mdp.gamma())?.grid();
                if grid.num_states() != mdp.num_states() {
                    return Err(Error::Config {
                        key: "policy".into(),
                        reason: "tour needs a grid environment".into(),
                    });
                }
                BasePolicy::Tour.table(&grid)?
            }
            Some(other) => {
                return Err(Error::Config {
                    key: "policy".into(),
                    reason: format!("unknown policy '{other}'"),
                })
            }
        };
        exact_q_pi(&mdp, &pi, &r)?
    };
    println!("q = {}", fmt_vec(&q));
    Ok(())
}

fn evaluate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    rewards: &PathBuf,
    split: Option<String>,
    optimal: bool,
) -> Result<()> {
    let model = OperatorModel::load(checkpoint)?;
    let mdp = config.env.build()?;
    if (model.gamma() - mdp.gamma()).abs() > 0.0 {
        return Err(Error::Config {
            key: "env.gamma".into(),
            reason: format!("checkpoint has gamma {}, environment {}", model.gamma(), mdp.gamma()),
        });
    }
    let split = match split.as_deref() {
        None => None,
        Some("train") => Some(Split::Train),
        Some("test") => Some(Split::Test),
        Some(other) => {
            return Err(Error::Config {
                key: "split".into(),
                reason: format!("unknown split '{other}'"),
            })
        }
    };
    let grid = config.env.grid();
    let records = read_reward_records(BufReader::new(File::open(rewards)?))?;
    let mut fns = Vec::new();
    for rec in records.iter().filter(|r| split.is_none_or(|s| s == r.split)) {
        let family = RewardFamily::standard(rec.family_id, grid, config.rewards.feature_seed);
        fns.push(family.instantiate(&rec.params)?);
    }
    if fns.is_empty() {
        return Err(Error::Empty("reward file has no records for the requested split"));
    }
    let target = if optimal {
        Target::Optimal
    } else {
        Target::Policy(config.policy.base.table(&grid)?.epsilon_mixture(config.policy.epsilon))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for (k, r) in fns.iter().enumerate() {
        let set = EvalSet::new(&mdp, &target, vec![r.clone()])?;
        let mse = set.mse(&model)?;
        total += mse;
        if optimal {
            let z = zero_shot_return(
                &model,
                r,
                &mdp,
                config.zero_shot.horizon,
                config.zero_shot.episodes,
                &mut rng,
            )?;
            println!(
                "reward {k} mse {mse} return {} optimal {} ratio {}",
                z.exact,
                z.optimal,
                z.ratio()
            );
        } else {
            println!("reward {k} mse {mse}");
        }
    }
    println!("mean mse {}", total / fns.len() as f64);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            common,
            p,
            n,
            seed,
            behavior,
            final_buffer,
            out,
        } => {
            let mut over = Overrides::new();
            push(&mut over, "dataset.p", p);
            push(&mut over, "dataset.n", n);
            push(&mut over, "dataset.seed", seed);
            push_str(&mut over, "dataset.behavior", &behavior);
            if final_buffer {
                over.push(("dataset.final_buffer".into(), toml::Value::Boolean(true)));
            }
            let c = common.load(over)?;
            let mdp = c.env.build()?;
            let base = c.dataset.behavior.table(&c.env.grid())?;
            let descriptor = format!("{:?}", c.dataset.behavior).to_lowercase();
            let ds_seed = c.dataset.seed.unwrap_or(0);
            let ds = if c.dataset.final_buffer {
                generate_final_buffer(&mdp, &base, &descriptor, c.dataset.n, ds_seed, &c.env.id())?
            } else {
                generate_dataset(
                    &mdp,
                    &BehaviorSpec::new(base, c.dataset.p, descriptor)?,
                    c.dataset.n,
                    ds_seed,
                    &c.env.id(),
                )?
            };
            save_dataset(&ds, &out)?;
            println!("wrote {} transitions to {}", ds.len(), out.display());
        }
        Command::DumpRewards {
            common,
            family,
            train,
            test,
            seeds,
            feature_seed,
            out,
        } => {
            let mut over = Overrides::new();
            push_str(&mut over, "rewards.family", &family);
            push(&mut over, "rewards.train", train);
            push(&mut over, "rewards.test", test);
            push(&mut over, "rewards.feature_seed", feature_seed);
            push_list(&mut over, "seeds", &seeds, false);
            let c = common.load(over)?;
            let fam = Arc::new(RewardFamily::standard(
                c.rewards.family,
                c.env.grid(),
                c.rewards.feature_seed,
            ));
            fs::create_dir_all(&out)?;
            for &seed in &c.seeds {
                let (tr, te) = draw_reward_sets(&fam, c.rewards.train, c.rewards.test, seed);
                let path = out.join(format!("seed-{seed}.jsonl"));
                let mut w = BufWriter::new(File::create(&path)?);
                write_reward_records(&mut w, c.rewards.family, Split::Train, &tr)?;
                write_reward_records(&mut w, c.rewards.family, Split::Test, &te)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Train {
            common,
            output_dir,
            seeds,
            designs,
            steps,
            family,
            dataset,
            n,
            p,
        } => {
            let mut over = Overrides::new();
            push_str(&mut over, "output_dir", &output_dir);
            push_list(&mut over, "seeds", &seeds, false);
            push_list(&mut over, "designs", &designs, true);
            push(&mut over, "train.steps", steps);
            push_str(&mut over, "rewards.family", &family);
            push_str(&mut over, "dataset.path", &dataset);
            push(&mut over, "dataset.n", n);
            push(&mut over, "dataset.p", p);
            let c = common.load(over)?;
            let report = bench::run_experiment(&c)?;
            for f in &report.failures {
                eprintln!("run {} seed {} failed: {}", f.design, f.seed, f.error);
            }
            println!(
                "{} of {} runs succeeded; results in {}",
                report.runs - report.failures.len(),
                report.runs,
                c.output_path().display()
            );
            return Ok(ExitCode::from(report.exit_code() as u8));
        }
        Command::Evaluate {
            common,
            checkpoint,
            rewards,
            split,
            optimal,
            epsilon,
            feature_seed,
        } => {
            let mut over = Overrides::new();
            push(&mut over, "policy.epsilon", epsilon);
            push(&mut over, "rewards.feature_seed", feature_seed);
            let c = common.load(over)?;
            evaluate(&c, &checkpoint, &rewards, split, optimal)?;
        }
        Command::Oracle {
            env,
            mdp,
            gamma,
            reward,
            policy,
            optimal,
        } => oracle(env, mdp, gamma, &reward, policy, optimal)?,
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.join("aggregate.csv"));
            let rows = bench::report(&runs, &out)?;
            println!("wrote {} aggregate rows to {}", rows.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
