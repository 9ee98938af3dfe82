use std::process::{Command, Output};

fn gpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gpe")
}

#[test]
fn static_gates_pass() {
    let out = gpe(&["check", "--no-training"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("gates passed"));
}

#[test]
fn bad_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[model]\nprototypes_per_class = 0\n").unwrap();
    let out = gpe(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.cfg"), "{stderr}");
}

#[test]
fn export_writes_a_highlight_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("h.cfg");
    std::fs::write(
        &cfg,
        "[stream]\nkind = \"highlight\"\ntasks = 2\n\n[highlight]\ndomains = [\"x\", \"y\"]\nsequences_per_task = [2, 2]\ntest_sequences = 3\nsequence_length = 40\n\n[synth]\nmax_segment = 10\n",
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = gpe(&["export", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tasks = std::fs::read_to_string(out_dir.join("tasks.csv")).unwrap();
    assert_eq!(tasks.lines().count(), 3);
    assert!(out_dir.join("samples.txt").exists());
    assert!(out_dir.join("config.toml").exists());
}
