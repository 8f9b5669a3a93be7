use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn distill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

/// Small networks and short schedules so a full run takes a few seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(default_config_path()).unwrap();
    let mut cfg: toml::Table = toml::from_str(&text).unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, v: toml::Value| {
        cfg[section].as_table_mut().unwrap().insert(key.into(), v);
    };
    for key in ["denoiser_hidden", "critic_hidden", "value_hidden", "policy_hidden"] {
        set(&mut cfg, "networks", key, toml::Value::Array(vec![16.into()]));
    }
    set(&mut cfg, "dataset", "scenarios_per_kind", 3.into());
    set(&mut cfg, "diffusion", "train_steps", 20.into());
    set(&mut cfg, "critic", "train_steps", 20.into());
    set(&mut cfg, "critic", "awr_steps", 20.into());
    set(&mut cfg, "srpo", "train_steps", 10.into());
    set(&mut cfg, "eval", "scenarios_per_kind", 1.into());
    set(&mut cfg, "eval", "bench_calls", 100.into());
    let path = dir.join("tiny.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn shipped_config_matches_builtin_defaults() {
    let shipped = distill(&["--config", default_config_path().to_str().unwrap(), "show-config"]);
    let builtin = distill(&["show-config"]);
    assert!(shipped.status.success(), "{}", stderr(&shipped));
    assert_eq!(stdout(&shipped), stdout(&builtin));
}

#[test]
fn overrides_apply_and_bad_keys_are_config_errors() {
    let o = distill(&["--set", "srpo.beta=0.1", "--set", "eval.reactive=true", "show-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: toml::Table = toml::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["srpo"]["beta"].as_float(), Some(0.1));
    assert_eq!(cfg["eval"]["reactive"].as_bool(), Some(true));

    let o = distill(&["--set", "srpo.nope=1", "show-config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_CONFIG]"), "{}", stderr(&o));

    let o = distill(&["--set", "critic.tau=0.3", "show-config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("E_CONFIG"), "{}", stderr(&o));
}

#[test]
fn malformed_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = \"not a number\"\n[world\n").unwrap();
    let o = distill(&["--config", path.to_str().unwrap(), "show-config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_CONFIG]"), "{}", stderr(&o));
}

#[test]
fn stage_out_of_order_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = distill(&["--out", out.to_str().unwrap(), "extract-policy"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error[E_MISSING_ARTIFACT]"), "{err}");
    assert!(err.contains("policy_init.ckpt"), "{err}");
}

#[test]
fn unknown_planner_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = distill(&["--out", out.to_str().unwrap(), "eval", "--planner", "teleport"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teleport"), "{}", stderr(&o));
}

#[test]
fn staged_and_one_shot_runs_agree_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");

    let out = staged.to_str().unwrap();
    for stage in ["gen-data", "train-prior", "train-critic", "extract-policy"] {
        let o = distill(&["--config", cfg, "--out", out, stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for planner in ["policy", "diffusion", "expert", "awr-init", "constant-velocity"] {
        let o = distill(&["--config", cfg, "--out", out, "eval", "--planner", planner]);
        assert!(o.status.success(), "{planner}: {}", stderr(&o));
    }
    for planner in ["policy", "diffusion"] {
        let o = distill(&["--config", cfg, "--out", out, "eval", "--planner", planner, "--reactive"]);
        assert!(o.status.success(), "{planner} reactive: {}", stderr(&o));
    }
    for stage in ["bench", "report"] {
        let o = distill(&["--config", cfg, "--out", out, stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }

    let o = distill(&["--config", cfg, "--out", whole.to_str().unwrap(), "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("held-out mean Q"));

    for name in ["dataset.bin", "prior.ckpt", "critic.ckpt", "policy.ckpt", "report.json", "report.csv"] {
        let a = std::fs::read(staged.join(name)).unwrap();
        let b = std::fs::read(whole.join(name)).unwrap();
        assert!(a == b, "{name} differs between staged and one-shot runs");
    }
}
