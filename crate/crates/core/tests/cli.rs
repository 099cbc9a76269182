use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn seqclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqclr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = seqclr(&["render", "--out", p(&f.path("train")), "--num", "24", "--seed", "1", "--max-len", "5"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Desk preset with a tiny schedule, edited by `edit`.
    fn config(&self, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
        let out = seqclr(&["config", "--preset", "desk"]);
        assert_eq!(code(&out), 0);
        let mut v: Value = serde_json::from_slice(&out.stdout).unwrap();
        v["protocol"]["iterations"] = 4.into();
        v["protocol"]["batch_size"] = 6.into();
        v["protocol"]["eval_every"] = 2.into();
        edit(&mut v);
        let path = self.path(name);
        std::fs::write(&path, v.to_string()).unwrap();
        path
    }

    fn pretrain(&self, cfg: &Path, out: &str) -> Output {
        seqclr(&["pretrain", "--config", p(cfg), "--data", p(&self.path("train")), "--out", p(&self.path(out))])
    }
}

#[test]
fn render_is_deterministic() {
    let f = Fixture::new();
    let again = f.path("again");
    assert_eq!(code(&seqclr(&["render", "--out", p(&again), "--num", "24", "--seed", "1", "--max-len", "5"])), 0);
    let a = std::fs::read(f.path("train/labels.tsv")).unwrap();
    let b = std::fs::read(again.join("labels.tsv")).unwrap();
    assert_eq!(a, b);
    for line in String::from_utf8(a).unwrap().lines() {
        let img = line.split('\t').next().unwrap();
        assert_eq!(
            std::fs::read(f.path("train").join(img)).unwrap(),
            std::fs::read(again.join(img)).unwrap(),
            "{img}"
        );
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&seqclr(&["pretrain"])), 2);
    assert_eq!(code(&seqclr(&["no-such-command"])), 2);
    let f = Fixture::new();
    let cfg = f.config("c.json", |_| {});
    let out = seqclr(&["pretrain", "--config", p(&cfg), "--data", p(&f.path("missing")), "--out", p(&f.path("x.ckpt"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn invalid_config_names_the_field() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"optimizer": {"grad_clip": "big"}}"#).unwrap();
    let out = f.pretrain(&bad, "x.ckpt");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("optimizer.grad_clip"), "{}", stderr(&out));

    let unknown = f.config("unknown.json", |v| v["encoder"]["depth"] = 3.into());
    let out = f.pretrain(&unknown, "x.ckpt");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("encoder"), "{}", stderr(&out));
}

#[test]
fn pretrain_then_resume_is_byte_identical() {
    let f = Fixture::new();
    let cfg = f.config("c.json", |_| {});
    let out = f.pretrain(&cfg, "full/p.ckpt");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let milestone = f.path("full/milestone-3.ckpt");
    assert!(milestone.is_file());
    let run: Value = serde_json::from_slice(&std::fs::read(f.path("full/run.json")).unwrap()).unwrap();
    assert_eq!(run["steps"].as_array().unwrap().len(), 4);
    assert!(run["chance_level"].as_f64().unwrap() > 0.0);

    let out = seqclr(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data",
        p(&f.path("train")),
        "--out",
        p(&f.path("resumed/p.ckpt")),
        "--resume",
        p(&milestone),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(f.path("full/p.ckpt")).unwrap(),
        std::fs::read(f.path("resumed/p.ckpt")).unwrap()
    );
}

#[test]
fn mismatched_checkpoint_exits_3() {
    let f = Fixture::new();
    let cfg = f.config("c.json", |_| {});
    assert_eq!(code(&f.pretrain(&cfg, "a/p.ckpt")), 0);
    let other = f.config("other.json", |v| v["encoder"]["lstm_hidden"] = 16.into());
    let out = seqclr(&[
        "pretrain",
        "--config",
        p(&other),
        "--data",
        p(&f.path("train")),
        "--out",
        p(&f.path("b/p.ckpt")),
        "--resume",
        p(&f.path("a/p.ckpt")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let junk = f.path("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = seqclr(&[
        "eval",
        "--ckpt",
        p(&junk),
        "--decoder",
        "ctc",
        "--data",
        p(&f.path("train")),
        "--report",
        p(&f.path("r.json")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn divergence_exits_4_and_leaves_a_checkpoint() {
    let f = Fixture::new();
    let cfg = f.config("c.json", |v| v["tau"] = 1e-308.into());
    let out = f.pretrain(&cfg, "d/p.ckpt");
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(f.path("d/diverged.ckpt").is_file());
}

#[test]
fn decoder_eval_finetune_and_eval() {
    let f = Fixture::new();
    let cfg = f.config("c.json", |_| {});
    assert_eq!(code(&f.pretrain(&cfg, "pre/p.ckpt")), 0);

    let out = seqclr(&[
        "decoder-eval",
        "--encoder",
        p(&f.path("pre/p.ckpt")),
        "--decoder",
        "ctc",
        "--config",
        p(&cfg),
        "--data",
        p(&f.path("train")),
        "--report",
        p(&f.path("de/report.json")),
        "--out",
        p(&f.path("de/model.ckpt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&std::fs::read(f.path("de/report.json")).unwrap()).unwrap();
    assert_eq!(report["phase"], "decoder_eval");
    assert_eq!(report["encoder_digest_before"], report["encoder_digest_after"]);
    assert!(report["acc"].as_f64().unwrap() <= report["ed1"].as_f64().unwrap());

    let eval = |decoder: &str| {
        seqclr(&[
            "eval",
            "--ckpt",
            p(&f.path("de/model.ckpt")),
            "--decoder",
            decoder,
            "--data",
            p(&f.path("train")),
            "--report",
            p(&f.path("ev/report.json")),
            "--dump-errors",
            p(&f.path("ev/errors.csv")),
        ])
    };
    let out = eval("ctc");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(f.path("ev/errors.csv")).unwrap();
    assert!(csv.starts_with("index,reference,prediction,distance"));
    assert_eq!(csv.lines().count(), 25);
    assert_eq!(code(&eval("attention")), 3);

    // a pretrained encoder without a decoder cannot be evaluated
    let out = seqclr(&[
        "eval",
        "--ckpt",
        p(&f.path("pre/p.ckpt")),
        "--decoder",
        "ctc",
        "--data",
        p(&f.path("train")),
        "--report",
        p(&f.path("x.json")),
    ]);
    assert_eq!(code(&out), 3);

    let out = seqclr(&[
        "finetune",
        "--ckpt",
        "none",
        "--decoder",
        "ctc",
        "--config",
        p(&cfg),
        "--data",
        p(&f.path("train")),
        "--fraction",
        "0.5",
        "--seed",
        "3",
        "--report",
        p(&f.path("ft/report.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let subset: Value = serde_json::from_slice(&std::fs::read(f.path("ft/report.subset.json")).unwrap()).unwrap();
    assert_eq!(subset["indices"].as_array().unwrap().len(), 12);
    assert_eq!(subset["seed"], 3);
}
