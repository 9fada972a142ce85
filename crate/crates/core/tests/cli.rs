use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentomni"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("LOMNI_THREADS", "1").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_WORLD: [&str; 10] = [
    "--timesteps",
    "4",
    "--visual-alphabet",
    "2",
    "--audio-alphabet",
    "2",
    "--feature-dim-visual",
    "4",
    "--feature-dim-audio",
    "4",
];

const SMALL_MODEL: [&str; 10] = [
    "--layers",
    "1",
    "--heads",
    "2",
    "--dim",
    "8",
    "--ff-dim",
    "8",
    "--grad-accumulation",
    "2",
];

fn small_data(dir: &Path, name: &str, seed: &str, episodes: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--seed", seed, "--episodes", episodes, "--out", p(&out)];
    args.extend(SMALL_WORLD);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn small_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    run(&args)
}

#[test]
fn unknown_command_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gen-data"));
}

#[test]
fn train_without_data_names_the_flag() {
    let o = run(&["train", "--out", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--seed", "7", "--episodes", "100", "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("# effective configuration\n"));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 100);
}

#[test]
fn gradcheck_ospe_reports_each_property() {
    let o = run(&["gradcheck", "--suite", "ospe"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["identity_at_zero", "isometry", "relative_shift", "synchrony"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{out}");
    }
}

#[test]
fn unknown_suite_is_usage_error() {
    assert_eq!(run(&["gradcheck", "--suite", "nope"]).status.code(), Some(1));
}

#[test]
fn malformed_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    std::fs::write(&data, "{not json\n").unwrap();
    let o = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d.jsonl", "1", "2");
    let o = run(&["eval", "--ckpt", p(&dir.path().join("none")), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("gen.conf");
    let out = dir.path().join("d.jsonl");
    std::fs::write(&conf, format!("# world\nseed=3\nepisodes=5\nout={}\ntimesteps=6\n", p(&out))).unwrap();
    let o = run(&["gen-data", "--config", p(&conf), "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = stdout(&o);
    assert!(echo.contains("seed=3\n") && echo.contains("episodes=2\n") && echo.contains("timesteps=6\n"));
    assert!(echo.contains("audio_alphabet=8\n"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    std::fs::write(&conf, "seed=3\nepisodes=1\nbogus=1\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", p(&conf), "--out", p(&out)]).status.code(), Some(1));
}

#[test]
fn echoed_configuration_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d.jsonl", "4", "6");
    let first = small_train(&data, &dir.path().join("a.ckpt"), &["--steps", "3", "--lr", "0.01"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let echo: String = stdout(&first)
        .lines()
        .take_while(|l| !l.is_empty() && (l.starts_with('#') || l.contains('=')))
        .filter(|l| !l.starts_with("out=") && !l.starts_with("metrics="))
        .map(|l| format!("{l}\n"))
        .collect();
    let conf = dir.path().join("echo.conf");
    std::fs::write(&conf, echo).unwrap();
    let b = dir.path().join("b.ckpt");
    let second = run(&["train", "--config", p(&conf), "--out", p(&b)]);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt.metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt.metrics.csv")).unwrap()
    );
}

#[test]
fn train_eval_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d.jsonl", "2", "4");
    let ckpt = dir.path().join("m.ckpt");
    let o = small_train(&data, &ckpt, &["--steps", "2", "--eval-data", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("m.ckpt.metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,text,latent,sync,total,lr,tau");
    assert_eq!(lines.len(), 3);
    assert!(stdout(&o).contains("\"accuracy\""));

    let e = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let json = stdout(&e).lines().find(|l| l.starts_with('{')).unwrap().to_string();
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["episodes"], 4);
    for key in ["av_ratio_latent", "av_ratio_text"] {
        if let Some(r) = report[key].as_f64() {
            assert!((0.0..=1.0).contains(&r));
        }
    }

    let att = dir.path().join("att.csv");
    let d = run(&["decode", "--ckpt", p(&ckpt), "--data", p(&data), "--index", "1", "--dump-attention", p(&att)]);
    assert_eq!(d.status.code(), Some(0), "{}", stderr(&d));
    let dump = stdout(&d);
    let body: Vec<&str> = dump.lines().filter(|l| !l.starts_with('#') && !l.contains('=')).collect();
    assert!(body.iter().all(|l| {
        let w: Vec<&str> = l.split(' ').collect();
        matches!(w.as_slice(), ["TRIGGER"] | ["STOP"] | ["TEXT", _] | ["LATENT", _] | ["ANSWER", _])
    }));
    assert!(body.iter().any(|l| l.starts_with("ANSWER ")));
    let csv = std::fs::read_to_string(&att).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "position,region,av_ratio");
    assert_eq!(rows.len() - 1, body.len());
    for row in &rows[1..] {
        let r: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    let oob = run(&["decode", "--ckpt", p(&ckpt), "--data", p(&data), "--index", "99"]);
    assert_eq!(oob.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d.jsonl", "5", "8");
    let full = dir.path().join("full.ckpt");
    let half = dir.path().join("half.ckpt");
    let rest = dir.path().join("rest.ckpt");
    let common = ["--steps", "20", "--lr", "0.003", "--seed", "9"];
    assert_eq!(small_train(&data, &full, &common).status.code(), Some(0));
    let mut first = common.to_vec();
    first.extend(["--until", "10"]);
    assert_eq!(small_train(&data, &half, &first).status.code(), Some(0));
    let o = run(&["train", "--data", p(&data), "--out", p(&rest), "--resume", p(&half)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let rows = |path: &Path| -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
    };
    let unbroken = rows(&dir.path().join("full.ckpt.metrics.csv"));
    let mut pieced = rows(&dir.path().join("half.ckpt.metrics.csv"));
    pieced.extend(rows(&dir.path().join("rest.ckpt.metrics.csv")));
    assert_eq!(unbroken.len(), 20);
    assert_eq!(unbroken, pieced);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&rest).unwrap());
}

#[test]
fn ablation_flags_change_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d.jsonl", "6", "6");
    let trace = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["--steps", "4", "--lr", "0.01"];
        args.extend(extra);
        let o = small_train(&data, &out, &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(format!("{name}.metrics.csv"))).unwrap()
    };
    let base = trace("base", &[]);
    let no_latent = trace("l1", &["--lambda1", "0"]);
    let no_ospe = trace("ospe", &["--no-ospe"]);
    assert_ne!(base, no_latent);
    assert_ne!(base, no_ospe);
    assert_ne!(no_latent, no_ospe);
}
