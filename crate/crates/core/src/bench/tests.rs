use super::*;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
name = "tiny"
output_dir = "{}"
seeds = [3, 4]
designs = ["successor-feature", "attention", "linear", "vanilla", "maxout"]

[env]
gamma = 0.9

[dataset]
n = 400

[rewards]
train = 4
test = 3

[train]
steps = 40
eval_every = 20
batch_size = 32
reference_points = 16
net = {{ hidden = [8], embed_dim = 4, heads = 2 }}

[overrides.maxout]
mode = "optimization"
steps = 30
"#,
        dir.display()
    );
    ExperimentConfig::parse(&text, &[]).unwrap()
}

#[test]
fn summary_matches_linear_interpolation_quantiles() {
    let s = summarize(&[4.0, 1.0, 3.0, 2.0]);
    assert_eq!(s.median, 2.5);
    assert_eq!(s.q1, 1.75);
    assert_eq!(s.q3, 3.25);
    assert_eq!(s.mean, 2.5);
    let one = summarize(&[7.0]);
    assert_eq!((one.median, one.q1, one.q3, one.mean), (7.0, 7.0, 7.0, 7.0));
    assert!(summarize(&[1.0, f64::NAN]).median.is_nan());
}

#[test]
fn aggregate_keys_are_unique_and_sorted() {
    let row = |design: &str, seed, step, v| MetricRow {
        design: design.into(),
        seed,
        step,
        train_mse: v,
        test_mse: v,
        bellman_loss: v,
    };
    let rows = vec![
        row("linear", 0, 10, 1.0),
        row("attention", 0, 10, 2.0),
        row("attention", 1, 10, 4.0),
        row("attention", 0, 5, 8.0),
    ];
    let agg = aggregate(&rows);
    let keys: Vec<(&str, usize, usize)> = agg.iter().map(|r| (r.design.as_str(), r.step, r.seeds)).collect();
    assert_eq!(keys, vec![("attention", 5, 1), ("attention", 10, 2), ("linear", 10, 1)]);
    assert_eq!(agg[1].test_mse_median, 3.0);
}

#[test]
fn empty_document_gives_defaults() {
    let c = ExperimentConfig::parse("", &[]).unwrap();
    assert_eq!(c, ExperimentConfig::default());
    assert_eq!(c.seeds.len(), 10);
    assert_eq!(c.rewards.train, 32);
    assert_eq!(c.rewards.test, 16);
}

#[test]
fn unknown_key_is_named() {
    let err = ExperimentConfig::parse("[train]\nstepz = 3\n", &[]).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("stepz"), "{err}");
}

#[test]
fn dotted_overrides_replace_file_values() {
    let over = vec![
        ("train.steps".to_string(), parse_value("77")),
        ("rewards.family".to_string(), parse_value("goal-cell")),
        ("seeds".to_string(), parse_value("[1, 2]")),
    ];
    let c = ExperimentConfig::parse("[train]\nsteps = 5\n", &over).unwrap();
    assert_eq!(c.train.steps, 77);
    assert_eq!(c.rewards.family, FamilyId::GoalCell);
    assert_eq!(c.seeds, vec![1, 2]);
}

#[test]
fn design_overrides_merge_over_shared_train_table() {
    let text = "designs = [\"attention\", \"maxout\"]\n[train]\nlr = 0.01\n[overrides.maxout]\nmode = \"optimization\"\nnet = { heads = 3 }\n";
    let c = ExperimentConfig::parse(text, &[]).unwrap();
    let m = c.train_config(Method::Operator(Design::Maxout)).unwrap();
    assert_eq!(m.mode, Mode::Optimization);
    assert_eq!(m.net.heads, 3);
    assert_eq!(m.net.hidden, vec![64, 64]);
    assert_eq!(m.lr, 0.01);
    assert_eq!(m.design, Design::Maxout);
    let a = c.train_config(Method::Operator(Design::Attention)).unwrap();
    assert_eq!(a.mode, Mode::Evaluation);
}

#[test]
fn config_errors_name_their_key() {
    let cases = [
        ("seeds = []", "seeds"),
        ("[dataset]\npath = \"/nonexistent/data.txt\"", "dataset.path"),
        ("[env]\ngamma = 1.0", "env.gamma"),
        (
            "designs = [\"attention\"]\n[overrides.maxout]\nsteps = 3",
            "overrides.maxout",
        ),
        (
            "designs = [\"successor-feature\"]\n[train]\nmode = \"optimization\"",
            "designs",
        ),
    ];
    for (text, key) in cases {
        match ExperimentConfig::parse(text, &[]) {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(matches!(ExperimentConfig::parse("designs = [\"nope\"]", &[]), Err(e) if e.is_config()));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let again = ExperimentConfig::parse(&c.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(c, again);
}

#[test]
fn experiment_writes_runs_and_a_reproducible_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(&dir.path().join("a"));
    let report = run_experiment(&c).unwrap();
    assert_eq!(report.exit_code(), 0, "{:?}", report.failures);
    assert_eq!(report.runs, 10);
    // 2 eval rows per operator run, 2 for sf, maxout stops at 30 -> rows at 20, 30
    assert_eq!(report.curves.len(), 2 * 5 * 2);
    assert!(report.curves.iter().all(|r| r.train_mse >= 0.0 && r.test_mse >= 0.0));
    assert_eq!(report.zero_shot.len(), 2 * 3);
    assert!(report
        .zero_shot
        .iter()
        .all(|z| z.design == "maxout" && z.ratio <= 1.0 + 1e-9));

    let out = dir.path().join("a");
    for f in ["config.toml", "manifest.json", "aggregate.csv", "zero_shot.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let run = out.join("attention/seed-3");
    for f in ["curve.csv", "rewards.jsonl", "model.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(out.join("maxout/seed-4/zero_shot.csv").is_file());
    assert!(!out.join("successor-feature/seed-3/model.json").exists());

    // report over the run tree reproduces the emitted aggregate bitwise
    let again = dir.path().join("again.csv");
    report_cmd_matches(&out, &again);

    // identical config, identical metrics
    let c2 = ExperimentConfig {
        output_dir: dir.path().join("b"),
        ..c
    };
    let report2 = run_experiment(&c2).unwrap();
    assert_eq!(report.curves, report2.curves);
    assert_eq!(report.zero_shot, report2.zero_shot);
    assert_eq!(
        fs::read(out.join("aggregate.csv")).unwrap(),
        fs::read(dir.path().join("b/aggregate.csv")).unwrap()
    );
}

fn report_cmd_matches(runs: &Path, out: &Path) {
    report(runs, out).unwrap();
    assert_eq!(fs::read(runs.join("aggregate.csv")).unwrap(), fs::read(out).unwrap());
}

#[test]
fn report_over_no_runs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("agg.csv");
    assert!(matches!(report(dir.path(), &out), Err(Error::Empty(_))));
    assert!(!out.exists());
}

#[test]
fn failed_runs_are_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "not a dataset\n").unwrap();
    let mut c = tiny_config(&dir.path().join("out"));
    c.dataset.path = Some(bad);
    let report = run_experiment(&c).unwrap();
    assert_eq!(report.failures.len(), report.runs);
    assert_eq!(report.exit_code(), 1);
    let manifest = fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
    assert!(!dir.path().join("out/aggregate.csv").exists());
}

#[test]
fn method_names_round_trip() {
    for name in ["successor-feature", "attention", "linear", "vanilla", "maxout"] {
        let m: Method = name.parse().unwrap();
        assert_eq!(m.to_string(), name);
    }
    assert_eq!("sf".parse::<Method>().unwrap(), Method::SuccessorFeature);
}
