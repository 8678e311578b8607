//! Offline transition datasets collected by perturbed behavior policies.
//!
//! Records hold `(s, a, s')` only. Rewards are re-evaluated from whichever
//! reward function is sampled at training time, so no reward column exists.
//!
//! File format: UTF-8, the first line is a JSON metadata object and every
//! following line is `s a s_next` as space-separated integers.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{PolicyTable, StateAction, TabularMdp};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Episodes are cut after this many transitions.
pub const EPISODE_HORIZON: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

impl Transition {
    pub fn pair(&self) -> StateAction {
        StateAction::new(self.s, self.a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env_id: String,
    pub gamma: f64,
    /// Human-readable description of the generating policy.
    pub behavior: String,
    /// Random-action probabilities of the behavior policies, one per mixture component.
    pub p: Vec<f64>,
    /// Gaussian action noise has no discrete counterpart.
    pub sigma: String,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    meta: DatasetMeta,
    records: Vec<Transition>,
}

/// Base policy plus the probability of replacing its action by a uniform one.
#[derive(Debug, Clone)]
pub struct BehaviorSpec {
    pub base: PolicyTable,
    pub p: f64,
    pub descriptor: String,
}

impl BehaviorSpec {
    pub fn new(base: PolicyTable, p: f64, descriptor: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(
                "p",
                format!("random-action probability {p} not in [0, 1]"),
            ));
        }
        Ok(Self {
            base,
            p,
            descriptor: descriptor.into(),
        })
    }
}

impl TransitionDataset {
    pub fn new(meta: DatasetMeta, records: Vec<Transition>) -> Result<Self> {
        if meta.n != records.len() {
            return Err(Error::Invalid(format!(
                "metadata says n = {} but {} records present",
                meta.n,
                records.len()
            )));
        }
        Ok(Self { meta, records })
    }

    /// Unvalidated dataset from raw transitions, for tests and tools.
    pub fn from_records(env_id: &str, gamma: f64, records: Vec<Transition>) -> Self {
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            env_id: env_id.to_string(),
            gamma,
            behavior: "external".into(),
            p: vec![],
            sigma: "n/a".into(),
            n: records.len(),
            seed: 0,
        };
        Self { meta, records }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn records(&self) -> &[Transition] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct `(s, a)` pairs in sorted order.
    pub fn distinct_pairs(&self) -> Vec<StateAction> {
        let set: BTreeSet<StateAction> = self.records.iter().map(Transition::pair).collect();
        set.into_iter().collect()
    }

    /// Checks every index against the MDP's state and action counts.
    pub fn validate_for(&self, mdp: &TabularMdp) -> Result<()> {
        for (i, t) in self.records.iter().enumerate() {
            if t.s >= mdp.num_states() || t.s_next >= mdp.num_states() || t.a >= mdp.num_actions() {
                return Err(Error::Invalid(format!(
                    "record {i} {t:?} out of range for the environment"
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        for t in &self.records {
            writeln!(out, "{} {} {}", t.s, t.a, t.s_next)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "missing metadata header".into(),
        })??;
        let raw: serde_json::Value = serde_json::from_str(&header).map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
        // check the version before the full schema so old files fail clearly
        let version = raw.get("format_version").and_then(|v| v.as_u64()).ok_or(Error::Parse {
            line: 1,
            reason: "metadata lacks format_version".into(),
        })? as u32;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let meta: DatasetMeta = serde_json::from_value(raw).map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
        let mut records = Vec::with_capacity(meta.n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            records.push(parse_record(&line).map_err(|reason| Error::Parse { line: line_no, reason })?);
        }
        if records.len() != meta.n {
            return Err(Error::Parse {
                line: records.len() + 2,
                reason: format!("expected {} records, found {}", meta.n, records.len()),
            });
        }
        Ok(Self { meta, records })
    }
}

fn parse_record(line: &str) -> std::result::Result<Transition, String> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let num = |f: &str| f.parse::<usize>().map_err(|e| format!("bad integer '{f}': {e}"));
    Ok(Transition {
        s: num(fields[0])?,
        a: num(fields[1])?,
        s_next: num(fields[2])?,
    })
}

pub fn save_dataset(ds: &TransitionDataset, path: &Path) -> Result<()> {
    ds.write_to(File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<TransitionDataset> {
    TransitionDataset::read_from(BufReader::new(File::open(path)?))
}

fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    n: usize,
    rng: &mut R,
    out: &mut Vec<Transition>,
) {
    let target = out.len() + n;
    while out.len() < target {
        let mut s = mdp.sample_initial(rng);
        for _ in 0..EPISODE_HORIZON {
            if out.len() == target {
                break;
            }
            let a = behavior.sample(s, rng);
            let s_next = mdp.sample_next(s, a, rng);
            out.push(Transition { s, a, s_next });
            s = s_next;
        }
    }
}

/// Rolls out `(1 - p) * base + p * uniform` from the initial distribution
/// until `n` transitions are collected.
pub fn generate_dataset(
    mdp: &TabularMdp,
    behavior: &BehaviorSpec,
    n: usize,
    seed: u64,
    env_id: &str,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::config("n", "dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = behavior.base.epsilon_mixture(behavior.p);
    let mut records = Vec::with_capacity(n);
    rollout(mdp, &policy, n, &mut rng, &mut records);
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        env_id: env_id.to_string(),
        gamma: mdp.gamma(),
        behavior: behavior.descriptor.clone(),
        p: vec![behavior.p],
        sigma: "n/a".into(),
        n,
        seed,
    };
    TransitionDataset::new(meta, records)
}

/// Random-action probabilities mixed to emulate a training replay buffer.
pub const FINAL_BUFFER_MIX: [f64; 3] = [1.0, 0.3, 0.1];

/// Equal thirds from increasingly greedy behavior policies.
pub fn generate_final_buffer(
    mdp: &TabularMdp,
    base: &PolicyTable,
    descriptor: &str,
    n: usize,
    seed: u64,
    env_id: &str,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::config("n", "dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for (i, &p) in FINAL_BUFFER_MIX.iter().enumerate() {
        let share = n / 3 + usize::from(i < n % 3);
        rollout(mdp, &base.epsilon_mixture(p), share, &mut rng, &mut records);
    }
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        env_id: env_id.to_string(),
        gamma: mdp.gamma(),
        behavior: format!("final-buffer({descriptor})"),
        p: FINAL_BUFFER_MIX.to_vec(),
        sigma: "n/a".into(),
        n,
        seed,
    };
    TransitionDataset::new(meta, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_q_star, greedy_policy, GridWorld};
    use crate::reward::{tabularize, RewardFn};

    fn grid_setup() -> (TabularMdp, PolicyTable) {
        let mdp = GridWorld::grid5().build(0.99).unwrap();
        let r = tabularize(&RewardFn::goal_cell(5, 12), &mdp);
        let pi = greedy_policy(&exact_q_star(&mdp, &r, 1e-8).unwrap(), 5);
        (mdp, pi)
    }

    #[test]
    fn paper_behavior_probabilities_are_accepted() {
        let (_, pi) = grid_setup();
        for p in [0.1, 0.3] {
            assert!(BehaviorSpec::new(pi.clone(), p, "goal-12").is_ok());
        }
        assert!(BehaviorSpec::new(pi, 1.5, "bad").is_err());
    }

    #[test]
    fn fully_random_behavior_has_uniform_actions() {
        let (mdp, pi) = grid_setup();
        let spec = BehaviorSpec::new(pi, 1.0, "uniform").unwrap();
        let n = 100_000;
        let ds = generate_dataset(&mdp, &spec, n, 3, "grid5").unwrap();
        let mut counts = [0usize; 5];
        for t in ds.records() {
            counts[t.a] += 1;
        }
        let p = 0.2;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn same_seed_gives_identical_file() {
        let (mdp, pi) = grid_setup();
        let spec = BehaviorSpec::new(pi, 0.3, "goal-12").unwrap();
        let bytes = |seed| {
            let mut buf = Vec::new();
            generate_dataset(&mdp, &spec, 2000, seed, "grid5")
                .unwrap()
                .write_to(&mut buf)
                .unwrap();
            buf
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn file_round_trip_and_header() {
        let (mdp, pi) = grid_setup();
        let spec = BehaviorSpec::new(pi.clone(), 0.1, "goal-12").unwrap();
        let ds = generate_dataset(&mdp, &spec, 500, 1, "grid5").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.meta().env_id, "grid5");
        assert_eq!(back.meta().gamma, 0.99);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("reward"));
        let mixed = generate_final_buffer(&mdp, &pi, "goal-12", 301, 2, "grid5").unwrap();
        assert_eq!(mixed.len(), 301);
        assert_eq!(mixed.meta().p, vec![1.0, 0.3, 0.1]);
    }

    #[test]
    fn truncated_file_reports_line() {
        let (mdp, pi) = grid_setup();
        let ds = generate_dataset(&mdp, &BehaviorSpec::new(pi, 0.3, "g").unwrap(), 10, 1, "grid5").unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[5] = "3 1";
        let broken = lines.join("\n");
        match TransitionDataset::read_from(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            TransitionDataset::read_from(short.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = "{\"format_version\":2,\"env_id\":\"grid5\"}\n0 0 1\n";
        assert!(matches!(
            TransitionDataset::read_from(text.as_bytes()),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn empirical_transitions_converge() {
        let mdp = GridWorld::grid5_slip().build(0.99).unwrap();
        let pi = PolicyTable::uniform(25, 5);
        let spec = BehaviorSpec::new(pi, 0.3, "uniform").unwrap();
        let ds = generate_dataset(&mdp, &spec, 60_000, 11, "grid5-slip").unwrap();
        let mut counts = vec![0.0; 125 * 25];
        let mut totals = vec![0.0; 125];
        for t in ds.records() {
            let x = t.s * 5 + t.a;
            counts[x * 25 + t.s_next] += 1.0;
            totals[x] += 1.0;
        }
        // five standard errors per cell
        let mut worst = 0.0f64;
        for x in 0..125 {
            let (s, a) = (x / 5, x % 5);
            for (s2, p) in mdp.next_dist(s, a).iter().enumerate() {
                let se = (p * (1.0 - p) / totals[x]).sqrt().max(1e-3);
                worst = worst.max((counts[x * 25 + s2] / totals[x] - p).abs() / se);
            }
        }
        assert!(worst < 5.0, "max standardized cell error {worst}");
    }
}
