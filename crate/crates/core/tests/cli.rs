use std::path::Path;

use mcetm::cli;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["mcetm".to_string(), "--run-dir".into(), dir.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli::run(&argv)
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(cli::run(&["mcetm".to_string()]), 2);
    assert_eq!(run(d.path(), &["no-such-command"]), 2);
    assert_eq!(run(d.path(), &["--set", "no.such=1", "gen-data"]), 2);
    assert_eq!(run(d.path(), &["--set", "seed", "gen-data"]), 2);
    assert_eq!(run(d.path(), &["gen-data", "--env", "moon"]), 2);
    assert_eq!(run(d.path(), &["--set", "data.n=many", "gen-data"]), 2);
    assert_eq!(run(d.path(), &["train-etm", "--data", "/nonexistent/data.csv"]), 1);
    assert_eq!(run(d.path(), &["--help"]), 0);
}

#[test]
fn config_file_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("exp.cfg");
    std::fs::write(&cfg, "# small\ndata.n = 50\nseed = 3\n").unwrap();
    let out = d.path().join("out");
    let c = cfg.display().to_string();
    assert_eq!(run(&out, &["--config", &c, "--set", "data.n=70", "gen-data", "--env", "cliff"]), 0);
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l == "data.n = 70"));
    assert!(resolved.lines().any(|l| l == "seed = 3"));
    assert!(resolved.lines().any(|l| l == "data.env = cliff"));
    let data = std::fs::read_to_string(out.join("data.csv")).unwrap();
    assert_eq!(data.lines().filter(|l| !l.starts_with('#')).count(), 71);

    std::fs::write(&cfg, "data.n 50\n").unwrap();
    assert_eq!(run(&out, &["--config", &c, "gen-data"]), 2);
}

#[test]
fn verify_bound_writes_one_row_per_instance() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["--seed", "7", "verify-bound", "--instances", "200"]), 0);
    let text = std::fs::read_to_string(d.path().join("bound.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "seed,lhs,consistency_term,truncation_term,assumption_ok,holds");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 200);
    for r in &rows {
        assert_eq!(r.len(), 6);
        if r[4] == "true" || r[4] == "1" {
            assert!(r[5] == "true" || r[5] == "1", "{r:?}");
        }
    }
    assert!(d.path().join("bound.svg").exists());
}
