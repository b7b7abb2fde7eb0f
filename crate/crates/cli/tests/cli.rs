use std::path::Path;
use std::process::{Command, Output};

use soundssl::config::{ExperimentConfig, InitMode};
use soundssl::train::OptimizerConfig;

fn soundssl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soundssl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, f: impl FnOnce(&mut ExperimentConfig)) -> String {
    let mut cfg = ExperimentConfig::desk("corpus/manifest.csv");
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 2;
    f(&mut cfg);
    std::fs::write(dir.join(name), cfg.to_toml()).unwrap();
    name.to_string()
}

fn synth(dir: &Path) {
    std::fs::write(dir.join("synth.toml"), "n_per_class = 12\n").unwrap();
    let o = soundssl(&["synth", "--config", "synth.toml", "--out", "corpus"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(soundssl(&["prepare"], dir.path()).status.code(), Some(1));
    assert_eq!(soundssl(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(soundssl(&["--help"], dir.path()).status.code(), Some(0));

    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 3\n").unwrap();
    let o = soundssl(&["prepare", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn missing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = write_config(dir.path(), "vic.toml", |c| c.init = InitMode::SslVicreg);
    let o = soundssl(&["finetune", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `prepare` first"), "{}", stderr(&o));
    assert!(soundssl(&["prepare", "--config", &cfg], dir.path()).status.success());
    let o = soundssl(&["evaluate", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `finetune` first"), "{}", stderr(&o));
}

#[test]
fn missing_audio_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.csv")).unwrap();
    let first = manifest.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    std::fs::remove_file(dir.path().join("corpus").join(&first)).unwrap();
    let cfg = write_config(dir.path(), "random.toml", |_| {});
    let o = soundssl(&["prepare", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn divergence_exits_three_and_success_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let boom = write_config(dir.path(), "boom.toml", |c| {
        c.finetune.optimizer = OptimizerConfig::Sgd {
            learning_rate: 1e30,
            momentum: 0.0,
        }
    });
    let o = soundssl(&["run", "--config", &boom], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("nonfinite"), "{}", stderr(&o));

    let ok = write_config(dir.path(), "random.toml", |_| {});
    let o = soundssl(&["run", "--config", &ok, "--out", "runs"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("balanced accuracy").count(), 6, "{stdout}");
    assert!(stdout.contains("silhouette"));
}
