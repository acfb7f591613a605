use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cryalert::wav_io::{read_wav_file, write_wav_file, AudioClip};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cryalert"));
    cmd.env_remove("CRYALERT_SEED").env("SOURCE_DATE_EPOCH", "1700000000");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic corpus and a model trained on it, shared by the tests.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.dir.path().join("corpus")
    }

    fn model(&self) -> PathBuf {
        self.dir.path().join("model.cry")
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = run(&["synth", "--out", s(&f.corpus()), "--per-class", "12"]);
        assert!(out.status.success(), "{}", stderr(&out));
        let out = run(&[
            "train",
            "--data",
            s(&f.corpus()),
            "--out",
            s(&f.model()),
            "--epochs",
            "3",
            "--lr",
            "0.001",
            "--batch",
            "16",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        f
    })
}

#[test]
fn synth_writes_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", s(dir.path()), "--per-class", "3", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    for class in ["am", "chirp", "noise", "tone"] {
        let files: Vec<_> = std::fs::read_dir(dir.path().join(class)).unwrap().collect();
        assert_eq!(files.len(), 3);
        let clip = read_wav_file(dir.path().join(class).join(format!("{class}_0000.wav"))).unwrap();
        assert_eq!((clip.len(), clip.sample_rate()), (16000, 16000));
    }
}

#[test]
fn synth_is_deterministic_and_seed_env_applies() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    run(&["synth", "--out", s(dirs[0].path()), "--per-class", "2", "--seed", "9"]);
    bin()
        .args(["synth", "--out", s(dirs[1].path()), "--per-class", "2"])
        .env("CRYALERT_SEED", "9")
        .output()
        .unwrap();
    // the flag wins over the environment
    bin()
        .args(["synth", "--out", s(dirs[2].path()), "--per-class", "2", "--seed", "9"])
        .env("CRYALERT_SEED", "123")
        .output()
        .unwrap();
    let read = |d: &Path| std::fs::read(d.join("noise/noise_0001.wav")).unwrap();
    assert_eq!(read(dirs[0].path()), read(dirs[1].path()));
    assert_eq!(read(dirs[0].path()), read(dirs[2].path()));
}

#[test]
fn train_writes_model_and_report() {
    let f = fixture();
    assert!(f.model().exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{}.report.json", s(&f.model()))).unwrap()).unwrap();
    assert_eq!(report["epochs_run"], 3);
    for key in ["loss", "accuracy", "val_loss", "val_accuracy"] {
        assert_eq!(report[key].as_array().unwrap().len(), 3, "{key}");
    }
}

#[test]
fn train_prints_epoch_table_and_is_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("again.cry");
    let out = run(&[
        "train", "--data", s(&f.corpus()), "--out", s(&out_path), "--epochs", "3", "--lr", "0.001", "--batch", "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let header = text.lines().find(|l| l.contains("val_accuracy")).unwrap();
    for col in ["epoch", "loss", "accuracy", "val_loss"] {
        assert!(header.contains(col));
    }
    assert!(text.contains("test_accuracy"));
    assert_eq!(std::fs::read(&out_path).unwrap(), std::fs::read(f.model()).unwrap());
}

#[test]
fn train_usage_errors_exit_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.cry");
    assert_eq!(run(&["train", "--data", s(&f.corpus()), "--out", s(&m), "--epochs", "0"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--out", s(&m)]).status.code(), Some(2));
    assert_eq!(run(&["train", "--data", s(&f.corpus()), "--out", s(&m), "--lr", "-1"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--data", s(&f.corpus()), "--out", s(&m), "--split", "0.5,0.5"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn train_data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.cry");
    let out = run(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&m)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out).lines().count(), 1, "{}", stderr(&out));

    std::fs::create_dir_all(dir.path().join("one/a")).unwrap();
    let out = run(&["train", "--data", s(&dir.path().join("one")), "--out", s(&m)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_prints_accuracy_and_confusion() {
    let f = fixture();
    let out = run(&["eval", "--model", s(&f.model()), "--data", s(&f.corpus()), "--confusion"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let acc_line = text.lines().find(|l| l.starts_with("accuracy ")).unwrap();
    let acc = acc_line.trim_start_matches("accuracy ");
    assert_eq!(acc.split('.').nth(1).unwrap().len(), 4, "{acc_line}");
    let acc: f64 = acc.parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // 48 clips split 0.8/0.1/0.1 leaves 4 test clips
    let rows: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("true")).skip(1).collect();
    assert_eq!(rows.len(), 4);
    let total: u64 = rows
        .iter()
        .map(|r| r.split_whitespace().skip(1).map(|c| c.parse::<u64>().unwrap()).sum::<u64>())
        .sum();
    assert_eq!(total, 4);
}

#[test]
fn eval_class_mismatch_names_both_lists() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for class in ["cat", "dog"] {
        let d = dir.path().join(class);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..5 {
            write_wav_file(d.join(format!("{i}.wav")), &AudioClip::new(vec![0.01 * i as f32; 16000], 16000).unwrap())
                .unwrap();
        }
    }
    let out = run(&["eval", "--model", s(&f.model()), "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("\"tone\"") && err.contains("\"dog\""), "{err}");
}

#[test]
fn predict_lists_classes_sorted() {
    let f = fixture();
    let input = f.corpus().join("tone/tone_0000.wav");
    let out = run(&["predict", "--model", s(&f.model()), "--input", s(&input)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let probs: Vec<(String, f64)> = stdout(&out)
        .lines()
        .map(|l| {
            let mut parts = l.split_whitespace();
            (parts.next().unwrap().to_string(), parts.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(probs.len(), 4);
    assert!(probs.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn predict_json_is_one_document() {
    let f = fixture();
    let input = f.corpus().join("am/am_0001.wav");
    let out = run(&["predict", "--model", s(&f.model()), "--input", s(&input), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.ends_with('\n') && text.trim_end().lines().count() == 1);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let probs = v["probabilities"].as_object().unwrap();
    for class in ["am", "chirp", "noise", "tone"] {
        assert!(probs.contains_key(class));
    }
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn predict_errors() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.wav");
    write_wav_file(&short, &AudioClip::new(vec![0.1; 200], 16000).unwrap()).unwrap();
    let out = run(&["predict", "--model", s(&f.model()), "--input", s(&short)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("too short"), "{}", stderr(&out));

    let not_model = dir.path().join("fake.cry");
    std::fs::copy(&short, &not_model).unwrap();
    let out = run(&["predict", "--model", s(&not_model), "--input", s(&short)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not a model"));
}

#[test]
fn spectrogram_exports_by_extension() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = f.corpus().join("tone/tone_0002.wav");
    let csv = dir.path().join("s.csv");
    let out = run(&["spectrogram", "--input", s(&input), "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "124 x 129");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 124);
    assert!(text.lines().all(|l| l.split(',').count() == 129));

    let pgm = dir.path().join("s.PGM");
    let out = run(&["spectrogram", "--input", s(&input), "--out", s(&pgm)]);
    assert_eq!(out.status.code(), Some(0));
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n") || bytes.starts_with(b"P5 "));

    let bad = dir.path().join("s.png");
    assert_eq!(run(&["spectrogram", "--input", s(&input), "--out", s(&bad)]).status.code(), Some(2));
    assert!(!bad.exists());
}

#[test]
fn watch_usage_and_config_errors() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = f.model();
    let base = ["watch", "--model", s(&model), "--dir", s(dir.path())];
    let with = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        run(&args).status.code()
    };
    assert_eq!(with(&["--threshold", "0"]), Some(2));
    assert_eq!(with(&["--threshold", "1.5"]), Some(2));
    assert_eq!(with(&["--poll-ms", "0"]), Some(2));
    // default alert classes are not among the synthetic class names
    assert_eq!(with(&[]), Some(1));
    assert_eq!(with(&["--alert-classes", "am", "--alert-url", "ftp://x"]), Some(1));
}

#[cfg(unix)]
#[test]
fn watch_alerts_once_per_file_and_stops_on_interrupt() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let watched = dir.path().join("in");
    std::fs::create_dir(&watched).unwrap();
    let alerts = dir.path().join("alerts.jsonl");
    let mut child = bin()
        .args([
            "watch",
            "--model",
            s(&f.model()),
            "--dir",
            s(&watched),
            "--poll-ms",
            "100",
            "--threshold",
            "0.25",
            "--alert-classes",
            "am,chirp,noise,tone",
            "--alert-cmd",
            &format!("cat >> '{}'", alerts.display()),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();

    let clip = read_wav_file(f.corpus().join("tone/tone_0003.wav")).unwrap();
    write_wav_file(watched.join("first.wav"), &clip).unwrap();
    let started = Instant::now();
    let line = lines.next().unwrap().unwrap();
    assert!(started.elapsed() < Duration::from_secs(5));
    let event: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert!(event["source"].as_str().unwrap().ends_with("first.wav"));
    assert_eq!(event["alert"], true);

    write_wav_file(watched.join("second.wav"), &clip).unwrap();
    let line = lines.next().unwrap().unwrap();
    assert!(line.contains("second.wav"));
    // several more polls: nothing gets reprocessed
    std::thread::sleep(Duration::from_millis(500));

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    assert_eq!(exit.code(), Some(0));
    assert!(lines.next().is_none(), "extra output after the two events");
    let alert_lines = std::fs::read_to_string(&alerts).unwrap();
    assert_eq!(alert_lines.lines().count(), 2);
}
