use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn attnlego(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlego"))
        .args(args)
        .env_remove("ATTNLEGO_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
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

struct Data {
    dir: TempDir,
}

impl Data {
    fn new(seed: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let o = attnlego(&[
            "gen-data",
            "--preset",
            "desk-small",
            "--out-dir",
            s(dir.path()),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn inputs(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (flag, file) in [
            ("--weights-q", "wq.algo"),
            ("--weights-k", "wk.algo"),
            ("--weights-v", "wv.algo"),
            ("--tokens", "tokens.algo"),
        ] {
            v.push(flag.to_string());
            v.push(self.path(file).to_str().unwrap().to_string());
        }
        v
    }
}

fn with(base: &[&str], extra: &[String]) -> Vec<String> {
    base.iter()
        .map(|s| s.to_string())
        .chain(extra.iter().cloned())
        .collect()
}

fn run_args(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    attnlego(&refs)
}

#[test]
fn gen_lut_artifact() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    assert_eq!(code(&attnlego(&["gen-lut", "--output", s(&a)])), 0);
    assert_eq!(
        code(&attnlego(&[
            "gen-lut",
            "--in-format",
            "Q4.3",
            "--out-format",
            "UQ1.15",
            "-o",
            s(&b)
        ])),
        0
    );
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 256);
    assert_eq!(text.lines().next().unwrap(), "0 32768");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let o = attnlego(&["gen-lut", "--in-format", "Q9.9.9", "-o", s(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_emits_artifacts_reproducibly() {
    let d = Data::new("3");
    let mut outs = Vec::new();
    for i in 0..2 {
        let out = d.path(&format!("out{i}.algo"));
        let trace = d.path(&format!("trace{i}.tsv"));
        let stats = d.path(&format!("stats{i}.json"));
        let args = with(
            &[
                "run",
                "--preset",
                "desk-small",
                "--output",
                s(&out),
                "--trace",
                s(&trace),
                "--stats",
                s(&stats),
            ],
            &d.inputs(),
        );
        let o = run_args(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outs.push([
            fs::read(out).unwrap(),
            fs::read(trace).unwrap(),
            fs::read(stats).unwrap(),
        ]);
    }
    assert_eq!(outs[0], outs[1]);
    assert!(outs[0][0].starts_with(b"ALGO1\ndims 32 32\ndtype int8\n"));
    let stats: serde_json::Value = serde_json::from_slice(&outs[0][2]).unwrap();
    assert_eq!(stats["timing_checks"]["pass"], true);
    assert!(stats["total_cycles"].as_u64().unwrap() > 0);
}

#[test]
fn truncated_weights_named_in_error() {
    let d = Data::new("4");
    let wk = d.path("wk.algo");
    let bytes = fs::read(&wk).unwrap();
    fs::write(&wk, &bytes[..bytes.len() - 10]).unwrap();
    let o = run_args(&with(&["run"], &d.inputs()));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("wk.algo"), "{}", stderr(&o));
}

#[test]
fn missing_weights_is_a_precondition_error() {
    let d = Data::new("5");
    let o = attnlego(&["run", "--tokens", s(&d.path("tokens.algo"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("weights not loaded"));
}

#[test]
fn shape_mismatch_rejected() {
    let d = Data::new("6");
    let o = run_args(&with(&["run", "--preset", "paper-default"], &d.inputs()));
    assert_eq!(code(&o), 2);
}

#[test]
fn check_modes() {
    let d = Data::new("7");
    let o = run_args(&with(&["check", "--mode", "bitexact"], &d.inputs()));
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("\"bit_exact\": true"));

    let o = run_args(&with(
        &["check", "--mode", "bitexact", "--adc", "quantized"],
        &d.inputs(),
    ));
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let o = run_args(&with(
        &[
            "check",
            "--mode",
            "float",
            "--tolerance",
            "0",
            "--adc",
            "quantized",
        ],
        &d.inputs(),
    ));
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));

    let o = run_args(&with(
        &["check", "--mode", "float", "--tolerance", "100"],
        &d.inputs(),
    ));
    assert_eq!(code(&o), 0);
}

#[test]
fn config_file_and_unknown_keys() {
    let d = Data::new("8");
    let good = d.path("good.json");
    fs::write(&good, r#"{"preset": "desk-small", "pipeline": false}"#).unwrap();
    let o = run_args(&with(&["check", "--config", s(&good)], &d.inputs()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let bad = d.path("bad.json");
    fs::write(&bad, r#"{"preset": "desk-small", "pipelined": false}"#).unwrap();
    let o = run_args(&with(&["run", "--config", s(&bad)], &d.inputs()));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pipelined"));
}

#[test]
fn stats_command() {
    let d = Data::new("9");
    let trace = d.path("t.tsv");
    let o = run_args(&with(&["run", "--trace", s(&trace)], &d.inputs()));
    assert_eq!(code(&o), 0);
    let o = attnlego(&["stats", "--trace", s(&trace)]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let pc = &report["timing_checks"];
    assert_eq!(pc["cim_ops"], pc["cim_ops_at_64"]);
    assert_eq!(pc["column_writes"], pc["column_writes_at_128"]);
    assert_eq!(pc["column_writes"], 96);
    assert_eq!(report["operations"]["input_process/cim.q"]["max_span"], 64);
    assert_eq!(
        report["operations"]["input_process/write.k"]["min_span"],
        128
    );

    let empty = d.path("empty.tsv");
    fs::write(&empty, "").unwrap();
    let o = attnlego(&["stats", "--trace", s(&empty)]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["total_cycles"], 0);

    let bad = d.path("bad.tsv");
    fs::write(&bad, "12\tctrl\n").unwrap();
    assert_eq!(code(&attnlego(&["stats", "--trace", s(&bad)])), 2);
    assert_eq!(
        code(&attnlego(&["stats", "--trace", s(&d.path("nope.tsv"))])),
        2
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&attnlego(&["frobnicate"])), 2);
    assert_eq!(code(&attnlego(&["run"])), 2);
    assert_eq!(
        code(&attnlego(&["check", "--tokens", "x", "--mode", "fuzzy"])),
        2
    );
}

#[test]
fn seed_env_controls_generated_data() {
    let gen = |seed: &str| {
        let dir = TempDir::new().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_attnlego"))
            .args(["gen-data", "--out-dir", s(dir.path())])
            .env("ATTNLEGO_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        fs::read(dir.path().join("tokens.algo")).unwrap()
    };
    assert_eq!(gen("11"), gen("11"));
    assert_ne!(gen("11"), gen("12"));
}
