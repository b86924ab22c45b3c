use std::path::Path;
use std::process::{Command, Output};

fn qsm_lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsm-lab"))
        .args(args)
        .env("QSM_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn zero_step_train_writes_headers_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = qsm_lab(&["train", "--steps", "0", "--seed", "0", "--seed", "1", "--name", "empty"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("empty");
    for seed in [0, 1] {
        let csv = read(&run.join(format!("seed_{seed}.csv")));
        assert_eq!(csv.lines().count(), 2, "{csv}");
        assert!(csv.starts_with("# qsm-lab metrics v1\nenv_step,"));
    }
    let agg = read(&run.join("aggregate.csv"));
    assert_eq!(agg.lines().count(), 2, "{agg}");
}

#[test]
fn repeated_train_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "[experiment]\nname = tiny\nenv = point_mass\ntotal_env_steps = 300\nwarmup_steps = 100\n\
         eval_every = 100\neval_episodes = 2\nbatch_size = 32\nseeds = 3\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for sub in ["a", "b"] {
        let root = dir.path().join(sub);
        let o = qsm_lab(&["train", "--config", cfg, "--out", root.to_str().unwrap()], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(std::fs::read(root.join("tiny/seed_3.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(String::from_utf8_lossy(&runs[0]).lines().count(), 5);
}

#[test]
fn compare_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = qsm_lab(
        &["train", "--steps", "200", "--seed", "0", "--seed", "1", "--name", "r", "--algo", "dpg"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("r");
    let o = qsm_lab(&["compare", run.to_str().unwrap(), run.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with(",diff"));
    assert!(table.lines().last().unwrap().ends_with(",0.0000000000000000e0"), "{table}");

    let ckpt = run.join("seed_0.ckpt");
    let o = qsm_lab(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("0,2,"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = qsm_lab(&["train", "--algo", "sac"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = qsm_lab(&["repro", "fig9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = qsm_lab(&["compare"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gridworld_and_sde_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let o = qsm_lab(&["gridworld", "--alpha", "1", "--alpha", "10"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("gridworld/entropy.csv").is_file());
    let o = qsm_lab(&["sde", "--alpha", "2", "--samples", "2000", "--chains", "2", "--dim", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("alpha,dim,mean,variance"));
}
