use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multigrpo::grpo::MetricRecord;
use multigrpo::harness::{self, read_metrics, ExperimentConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multigrpo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn strip(log: &[MetricRecord]) -> Vec<MetricRecord> {
    log.iter().map(MetricRecord::without_timing).collect()
}

const SMALL_MODEL: &str = "hidden_dims = 16\npretrain_iterations = 40\npretrain_batch = 32\n";

/// A tiny pretrained checkpoint shared by the tests that need one.
fn pretrained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "pre.cfg", SMALL_MODEL);
    let out = dir.join("pre");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    out.join("checkpoints/final.ckpt")
}

#[test]
fn pretrain_writes_layout_and_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = pretrained(tmp.path());
    let out = tmp.path().join("pre");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(out.join("seed")).unwrap().trim(), "3");
    let snapshot = ExperimentConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(snapshot.seed, 3);
    assert_eq!(snapshot.hidden_dims, vec![16]);
    assert_eq!(lines(&out.join("loss.jsonl")), 40);
    assert_eq!(lines(&out.join("loss.csv")), 41);

    let again = tmp.path().join("pre2");
    let cfg = tmp.path().join("pre.cfg");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&again), "--seed", "3"]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(again.join("checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn align_logs_every_iteration_and_reruns_from_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = pretrained(tmp.path());
    let cfg = write_config(
        tmp.path(),
        "align.cfg",
        &format!(
            "{SMALL_MODEL}checkpoint = {}\niterations = 4\nprompts_per_iter = 2\ntime_steps = 6\n\
             branch_schedule = 2:2\nroot_factor = 3\ncheckpoint_every = 2\n",
            ckpt.display()
        ),
    );
    let out = tmp.path().join("align");
    ok(&["align", "--config", s(&cfg), "--out", s(&out), "--seed", "11"]);
    assert_eq!(lines(&out.join("metrics.jsonl")), 4);
    let header = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("iteration,mean_reward_target,mean_reward_ring,mean_reward_angle,objective"));
    for name in ["final.ckpt", "iter_000002.ckpt", "iter_000004.ckpt"] {
        assert!(out.join("checkpoints").join(name).exists(), "{name}");
    }
    let log = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(log.iter().all(|r| r.mean_reward.len() == 3 && r.velocity_evals > 0));

    let rerun = tmp.path().join("rerun");
    let snapshot = out.join("config.resolved");
    ok(&["align", "--config", s(&snapshot), "--out", s(&rerun)]);
    let again = read_metrics(&rerun.join("metrics.jsonl")).unwrap();
    assert_eq!(strip(&log), strip(&again));
    assert_eq!(
        std::fs::read(out.join("checkpoints/final.ckpt")).unwrap(),
        std::fs::read(rerun.join("checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn analyses_emit_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = pretrained(tmp.path());

    let out = tmp.path().join("noise");
    ok(&["noise-table", "--out", s(&out)]);
    assert_eq!(lines(&out.join("noise_table.jsonl")), 6 + 10 + 28 + 40);

    let cfg = write_config(
        tmp.path(),
        "div.cfg",
        &format!("{SMALL_MODEL}checkpoint = {}\ndiversity_steps = 8,5,2\ndiversity_trees = 4\n", ckpt.display()),
    );
    let out = tmp.path().join("div");
    ok(&["diversity", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(lines(&out.join("diversity.jsonl")), 3);
    let bad = write_config(
        tmp.path(),
        "div_bad.cfg",
        &format!("{SMALL_MODEL}checkpoint = {}\ndiversity_steps = 9\n", ckpt.display()),
    );
    let err = run(&["diversity", "--config", s(&bad), "--out", s(&tmp.path().join("div_bad"))]);
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("diversity_steps"));

    let cfg = write_config(
        tmp.path(),
        "ablate.cfg",
        &format!(
            "{SMALL_MODEL}checkpoint = {}\niterations = 2\nprompts_per_iter = 1\ntime_steps = 6\nbranch_schedule = 2:2\n\
             root_factor = 2\nablate_weight_sets = 1,1,1;1,4,1;1,10,1\n",
            ckpt.display()
        ),
    );
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]);
    let table = std::fs::read_to_string(out.join("ablate.jsonl")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("reward_grouped"));
    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 4);
    for run in runs {
        let snap = ExperimentConfig::load(&run.unwrap().path().join("config.resolved")).unwrap();
        assert_eq!(snap.seed, 5);
    }

    let cfg = write_config(
        tmp.path(),
        "eval.cfg",
        &format!("{SMALL_MODEL}checkpoint = {}\neval_samples = 16\n", ckpt.display()),
    );
    let out = tmp.path().join("eval");
    let stdout = ok(&["eval", "--config", s(&cfg), "--out", s(&out)]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("16 ode samples"));
    assert_eq!(lines(&out.join("eval.csv")), 2);
}

#[test]
fn failures_exit_nonzero_with_a_category() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("colour = red\n", "config", 2),
        ("branch_schedule = 1:3\n", "config", 2),
        ("eps_clip = 2\n", "config", 2),
        ("checkpoint = /nonexistent/model.ckpt\n", "io", 3),
    ];
    for (k, (text, category, code)) in cases.into_iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{k}.cfg"), text);
        let out = run(&["align", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
        assert_eq!(out.status.code(), Some(code), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("error[{category}]")), "{err}");
    }
    let out = run(&["align", "--out", s(&tmp.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let garbage = tmp.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let cfg = write_config(tmp.path(), "garbage.cfg", &format!("checkpoint = {}\n", garbage.display()));
    let out = run(&["eval", "--config", s(&cfg), "--out", s(&tmp.path().join("z"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[format]"));

    let cfg = write_config(tmp.path(), "div.cfg", "checkpoint = /nonexistent.ckpt\n");
    let out = run(&["diversity", "--config", s(&cfg), "--out", s(&tmp.path().join("w"))]);
    assert_eq!(out.status.code(), Some(3));

    assert!(!run(&["bogus"]).status.success());
}

#[test]
fn default_pretraining_lands_on_the_modes() {
    let config = ExperimentConfig {
        time_steps: 40,
        eval_samples: 400,
        ..ExperimentConfig::default()
    };
    let env = config.env().unwrap();
    let mut losses = Vec::new();
    let model = harness::pretrain(&config, &env, |_, l| {
        losses.push(l);
        Ok(())
    })
    .unwrap();
    assert!(losses.iter().all(|&l| l > 0.0));
    let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head);
    let report = harness::evaluate(&model, &config, &env).unwrap();
    assert!(report.mode_hit_rate >= 0.9, "{}", report.mode_hit_rate);
}
