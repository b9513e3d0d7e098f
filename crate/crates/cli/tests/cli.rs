use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sliderquant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus and a 4-layer checkpoint trained for a few steps, shared
/// by every test in this file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus.txt");
        let words = ["the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "far"];
        let mut text = String::new();
        for i in 0..3000usize {
            text.push_str(words[(i * 7 + i / 5) % words.len()]);
            text.push(if i % 11 == 10 { '\n' } else { ' ' });
        }
        std::fs::write(&corpus, text).unwrap();
        let cfg = root.join("pretrain.json");
        std::fs::write(
            &cfg,
            r#"{"model": {"d_model": 16, "n_heads": 2, "n_layers": 4, "d_ff": 32, "max_seq_len": 16},
                "train": {"steps": 30, "batch_size": 4, "seq_len": 16, "warmup": 5, "log_every": 10}}"#,
        )
        .unwrap();
        let ckpt = root.join("tiny.slqm");
        let o = run(&[
            "pretrain",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(&ckpt),
            "--manifest",
            s(&root.join("pretrain.run.json")),
        ]);
        assert_eq!(code(&o), 0, "pretrain failed: {}", stderr(&o));
        Fixture {
            _dir: dir,
            root,
            corpus,
            ckpt,
        }
    })
}

fn quantize(fx: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let dir = fx.root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("model.slq");
    let mut args = vec![
        "quantize",
        "--ckpt",
        s(&fx.ckpt),
        "--corpus",
        s(&fx.corpus),
        "--out",
        s(&out),
        "--samples",
        "4",
        "--seq-len",
        "16",
        "--epochs",
        "1",
        "--ls",
        "1",
        "--ld",
        "1",
    ];
    args.extend_from_slice(extra);
    let o = bin().args(&args).output().unwrap();
    (out, o)
}

fn eval_ppl(args: &[&str]) -> f64 {
    let o = run(args);
    assert_eq!(code(&o), 0, "eval failed: {}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("perplexity")).expect("perplexity line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn dump_schedule_prints_default_windows() {
    let o = run(&["dump-schedule"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| l.contains("..")).collect();
    assert_eq!(lines.len(), 13, "{text}");
    assert!(lines[0].starts_with("PESW 0..0"));
    assert!(lines[4].starts_with("FSSW 3..4"));
    assert!(lines[12].starts_with("PCSW 11..11"));
}

#[test]
fn dump_schedule_json_has_membership() {
    let o = run(&["dump-schedule", "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let m: Vec<u64> = v["membership"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(m, [4, 3, 2, 2, 2, 2, 2, 2, 2, 2, 3, 4]);
}

#[test]
fn invalid_schedule_is_a_config_error() {
    let o = run(&["dump-schedule", "--L", "4", "--ls", "3", "--ld", "3"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[config]"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["quantize", "--no-such-flag"])), 2);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let fx = fixture();
    let missing = fx.root.join("absent.slqm");
    let o = run(&["quantize", "--ckpt", s(&missing), "--corpus", s(&fx.corpus), "--out", "x.slq"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unsupported_bit_width_is_a_config_error() {
    let fx = fixture();
    let (_, o) = quantize(fx, "bad-bits", &["--wbits", "5"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("wbits"));
}

#[test]
fn corrupt_artifact_is_a_format_error() {
    let fx = fixture();
    let bad = fx.root.join("corrupt.slq");
    std::fs::write(&bad, b"SLQ1 definitely not an artifact").unwrap();
    let o = run(&["eval", "--artifact", s(&bad), "--tokens", s(&fx.corpus)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn quantize_is_deterministic_and_manifest_reproduces() {
    let fx = fixture();
    let (a, o1) = quantize(fx, "det-a", &[]);
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    let (b, o2) = quantize(fx, "det-b", &[]);
    assert_eq!(code(&o2), 0, "{}", stderr(&o2));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    // the manifest of the first run, fed back as the config
    let manifest = a.parent().unwrap().join("run.json");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["outputs"]["artifact_crc32"].as_u64().unwrap() as u32, crc32fast::hash(&bytes));
    let c = fx.root.join("det-c");
    std::fs::create_dir_all(&c).unwrap();
    let out = c.join("model.slq");
    let o = run(&["quantize", "--config", s(&manifest), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(bytes, std::fs::read(&out).unwrap());

    let losses = std::fs::read_to_string(a.parent().unwrap().join("losses.csv")).unwrap();
    assert!(losses.starts_with("window_id,region,stage,epoch,loss"));
}

#[test]
fn sixteen_bit_artifact_matches_checkpoint_perplexity() {
    let fx = fixture();
    let (art, o) = quantize(fx, "w16", &["--wbits", "16", "--abits", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let common = ["--tokens", s(&fx.corpus), "--context", "15", "--max-tokens", "4000"];
    let fp = eval_ppl(&[&["eval", "--ckpt", s(&fx.ckpt)][..], &common].concat());
    let q = eval_ppl(&[&["eval", "--artifact", s(&art)][..], &common].concat());
    assert!((q - fp).abs() <= 1e-3 * fp, "fp {fp} vs w16a16 {q}");
}

#[test]
fn rtn_baseline_writes_artifact_and_eval_csv() {
    let fx = fixture();
    let dir = fx.root.join("rtn");
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("rtn.slq");
    let o = run(&[
        "baseline",
        "--kind",
        "rtn",
        "--ckpt",
        s(&fx.ckpt),
        "--corpus",
        s(&fx.corpus),
        "--out",
        s(&out),
        "--samples",
        "4",
        "--seq-len",
        "16",
        "--ls",
        "1",
        "--ld",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = dir.join("eval.csv");
    let ppl = eval_ppl(&[
        "eval",
        "--artifact",
        s(&out),
        "--tokens",
        s(&fx.corpus),
        "--context",
        "15",
        "--max-tokens",
        "2000",
        "--csv",
        s(&csv),
    ]);
    assert!(ppl.is_finite() && ppl > 1.0);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("model,kind,wbits,abits,split,tokens,context,ppl"), "{text}");
}

#[test]
fn probe_writes_both_curves() {
    let fx = fixture();
    let dir = fx.root.join("probe");
    let o = run(&[
        "probe",
        "--ckpt",
        s(&fx.ckpt),
        "--corpus",
        s(&fx.corpus),
        "--mode",
        "both",
        "--context",
        "15",
        "--max-tokens",
        "1000",
        "--samples",
        "4",
        "--seq-len",
        "16",
        "--ls",
        "1",
        "--ld",
        "1",
        "--jobs",
        "2",
        "--out-dir",
        s(&dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for csv in names.iter().filter(|n| n.ends_with(".csv")) {
        let text = std::fs::read_to_string(dir.join(csv)).unwrap();
        assert_eq!(text.lines().count(), 5, "{csv}: {text}");
    }
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 2, "{names:?}");
}
