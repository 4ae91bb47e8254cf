use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vitamin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitamin"))
        .args(args)
        .env_remove("VITAMIN_SEED")
        .env_remove("VITAMIN_SET")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: &str = r#"
seed = 3
batch_size = 8
total_samples = 48
warmup_steps = 1
lr = 2e-3
image_size = 16
log_every = 1
log_wall_time = false

[image]
kind = "vitamin"
name = "tiny"
stem_channels = 8
stage_depths = [1, 1, 1]
stage_channels = [8, 16, 24]
heads = 2
embed_dim = 16

[text]
vocab = 14
context = 8
width = 16
depth = 1
heads = 2
embed_dim = 16

[data]
context = 8

[eval]
zero_shot_per_class = 2
loss_batches = 1
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(params M, MACs G)` from the summary line `= 333.28M params, 72.57G MACs`.
fn totals(out: &str) -> (f64, f64) {
    let line = out.lines().find(|l| l.starts_with("= ")).expect("summary line");
    let nums: Vec<f64> = line
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|t| t.parse().ok())
        .collect();
    (nums[0], nums[1])
}

#[test]
fn analyze_reports_totals() {
    for (variant, params, macs) in [("vitamin-l", 333.32, 72.60), ("vitamin-s", 22.03, 5.50)] {
        let o = vitamin(&["analyze", "--variant", variant, "--input", "224"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let (p, m) = totals(&text(&o));
        assert!((p / params - 1.0).abs() < 0.02, "{variant}: {p}M");
        assert!((m / macs - 1.0).abs() < 0.02, "{variant}: {m}G");
    }
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("a");
    let o = vitamin(&["analyze", "--variant", "vitamin-s", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("cost.csv")).unwrap();
    assert!(csv.starts_with("module,params,macs"));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn unknown_variant_exits_2_without_files() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("a");
    let o = vitamin(&["analyze", "--variant", "vitamin-q", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("vitamin-q"));
    assert!(!out.exists());
}

#[test]
fn train_is_reproducible_and_guards_its_output() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", TINY);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let cfg_before = std::fs::read(&cfg).unwrap();
    for out in [&a, &b] {
        let o = vitamin(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    assert_eq!(std::fs::read(&cfg).unwrap(), cfg_before);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);

    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("--force"));
    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&a), "--force", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_ne!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn environment_overrides_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", TINY);
    let out = d.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_vitamin"))
        .args(["train", "--config", s(&cfg)])
        .env("VITAMIN_OUT", &out)
        .env("VITAMIN_SEED", "11")
        .env("VITAMIN_SET", "lr=0.001;log_every=2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    let eff = m["effective_config"].as_str().unwrap();
    assert!(eff.contains("lr = 0.001") && eff.contains("log_every = 2"), "{eff}");
}

#[test]
fn ltt_with_mismatched_text_tower_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", TINY);
    let teacher = d.path().join("teacher");
    assert_eq!(code(&vitamin(&["train", "--config", s(&cfg), "--out", s(&teacher)])), 0);
    let wide = TINY.replace("embed_dim = 16", "embed_dim = 32");
    let cfg2 = write_config(d.path(), "wide.toml", &wide);
    let ck = teacher.join("checkpoint.vtc");
    let o = vitamin(&["train", "--config", s(&cfg2), "--out", s(&d.path().join("l")), "--ltt", "--text-ckpt", s(&ck)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("embed_dim"), "{}", text(&o));
    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&d.path().join("ok")), "--ltt", "--text-ckpt", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn divergence_exits_3_and_keeps_a_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", TINY);
    let out = d.path().join("nan");
    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "lr=1e30"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("numeric error"), "{}", text(&o));
    assert!(out.join("checkpoint.vtc").exists());
}

#[test]
fn resume_continues_to_the_same_result() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", &TINY.replace("log_every = 1", "log_every = 1\ncheckpoint_every = 2"));
    let full = d.path().join("full");
    assert_eq!(code(&vitamin(&["train", "--config", s(&cfg), "--out", s(&full)])), 0);
    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&full), "--resume"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = vitamin(&["train", "--config", s(&cfg), "--out", s(&full), "--resume", "--seed", "4"]);
    assert_eq!(code(&o), 2, "resuming under a different config must fail");
}

#[test]
fn eval_is_deterministic_and_validates_inputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "tiny.toml", TINY);
    let run = d.path().join("run");
    assert_eq!(code(&vitamin(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let ck = run.join("checkpoint.vtc");
    let mut reports = Vec::new();
    for out in ["e1", "e2"] {
        let out = d.path().join(out);
        let o = vitamin(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        assert!(text(&o).contains("zero_shot_acc"));
        reports.push(std::fs::read(out.join("eval_report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let v: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    for r in v.as_array().unwrap() {
        let x = r["value"].as_f64().unwrap();
        if r["metric"] != "eval_loss" {
            assert!((0.0..=1.0).contains(&x));
        }
    }
    let o = vitamin(&["eval", "--checkpoint", s(&d.path().join("missing.vtc")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);

    // flip one byte inside the stored tensors: digest check fails
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let bad = d.path().join("bad.vtc");
    std::fs::write(&bad, bytes).unwrap();
    let o = vitamin(&["eval", "--checkpoint", s(&bad), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn sweep_grid_rows_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let base = TINY
        .replace("total_samples = 48\n", "")
        .replace("warmup_steps = 1", "warmup_steps = 0")
        .replace("\n[", "\n[base.")
        .replacen("seed = 3", "[base]\nseed = 3", 1);
    let grid = r#"
[grid]
budgets = [16, 32]
seeds = [1]

[[grid.variants]]
kind = "vitamin"
name = "tiny"
stem_channels = 8
stage_depths = [1, 1, 1]
stage_channels = [8, 16, 24]
heads = 2
embed_dim = 16

[[grid.variants]]
kind = "vit"
name = "tiny-vit"
patch = 4
width = 16
depth = 1
heads = 2
embed_dim = 16
"#;
    let cfg = write_config(d.path(), "sweep.toml", &format!("{base}\n{grid}"));
    let out = d.path().join("sw");
    let o = vitamin(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(
        csv.lines().next().unwrap(),
        "variant,budget_samples,params,macs,final_loss,zero_shot_acc,r_at_1,seed,status"
    );
    for m in ["final_loss", "zero_shot_acc", "r_at_1"] {
        assert!(out.join(format!("sweep_{m}.svg")).exists());
    }
    let stamp = std::fs::metadata(out.join("tiny-b16-s1/checkpoint.vtc")).unwrap().modified().unwrap();
    let o = vitamin(&["sweep", "--config", s(&cfg), "--out", s(&out), "--resume"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap(), csv);
    let again = std::fs::metadata(out.join("tiny-b16-s1/checkpoint.vtc")).unwrap().modified().unwrap();
    assert_eq!(stamp, again, "completed cell was retrained");

    let o = vitamin(&["sweep", "--config", s(&cfg), "--out", s(&d.path().join("nan")), "--set", "base.lr=1e30", "--set", "grid.budgets=[16, 24]"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    let failed = std::fs::read_to_string(d.path().join("nan/sweep.csv")).unwrap();
    assert_eq!(failed.lines().filter(|l| l.ends_with(",failed")).count(), 4, "{failed}");
    assert!(failed.contains("tiny,24,"));
}
