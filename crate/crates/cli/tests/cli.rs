use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use normlab_cli::manifest::{read_records, Manifest};
use normlab_cli::report;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_normlab");

const TINY: &[&str] = &[
    "--n-layer", "1", "--d-model", "32", "--n-head", "4", "--n-kv-head", "4", "--block-size", "16",
    "--steps", "10", "--warmup", "1", "--eval-interval", "5", "--eval-batches", "1", "--batch-size", "4",
    "--budget", "6000", "--val-tokens", "2000",
];

fn normlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("NORMLAB_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    normlab(dir, &args)
}

#[test]
fn train_writes_record_and_rejects_duplicates() {
    let d = tempfile::tempdir().unwrap();
    let args = ["--norm", "dyt", "--alpha-init", "2.0", "--seed", "1337", "--out", "o"];
    let o = train(d.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = read_records(&d.path().join("o/manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.variant, "dyt");
    assert_eq!(r.seed, 1337);
    assert!(d.path().join(format!("o/checkpoints/{}.ckpt", r.run_id)).exists());
    assert!(d.path().join(format!("o/runs/{}.json", r.run_id)).exists());

    let again = train(d.path(), &args);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("already in the manifest"));
    let forced = train(d.path(), &[&args[..], &["--force"]].concat());
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    let text = std::fs::read_to_string(d.path().join("o/manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(read_records(&d.path().join("o/manifest.jsonl")).unwrap().len(), 2);
}

#[test]
fn bad_config_and_usage_exit_one_io_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let o = train(d.path(), &["--norm", "dyt", "--alpha-init", "-1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("alpha_init"), "{}", stderr(&o));
    assert_eq!(code(&normlab(d.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&normlab(d.path(), &["train", "--norm", "batchnorm"])), 1);
    assert_eq!(code(&normlab(d.path(), &["report", "missing.jsonl"])), 2);
    assert_eq!(code(&normlab(d.path(), &["train", "--data", "nowhere.bin"])), 2);
    assert_eq!(code(&normlab(d.path(), &["--help"])), 0);
}

#[test]
fn config_file_with_flag_overrides_and_env_out() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("run.toml"),
        "[model]\nn_layer = 1\nd_model = 64\nn_head = 4\nn_kv_head = 4\nblock_size = 16\nnorm_kind = \"rmsnorm\"\n\
         [train]\nmax_steps = 10\nwarmup_steps = 1\neval_interval = 5\neval_batches = 1\nbatch_size = 4\n\
         [data]\ntrain_tokens = 6000\nval_tokens = 2000\n",
    )
    .unwrap();
    let o = Command::new(BIN)
        .args(["train", "--config", "run.toml", "--d-model", "32", "--seed", "5"])
        .current_dir(d.path())
        .env("NORMLAB_OUT", "envout")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = &read_records(&d.path().join("envout/manifest.jsonl")).unwrap()[0];
    assert_eq!((r.model.n_layer, r.model.d_model, r.seed), (1, 32, 5));
    assert_eq!(r.variant, "rmsnorm");
    assert_eq!(r.train.max_steps, 10);

    std::fs::write(d.path().join("bad.toml"), "[model]\nn_layers = 2\n").unwrap();
    assert_eq!(code(&normlab(d.path(), &["train", "--config", "bad.toml"])), 1);
}

#[test]
fn torn_manifest_line_is_dropped() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("m.jsonl");
    let mut records = normlab_cli::per_seed_records().unwrap();
    records.truncate(3);
    {
        let mut m = Manifest::open(&path).unwrap();
        for r in &records[..2] {
            m.append(r, false).unwrap();
        }
    }
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"schema_version\": 1, \"run_id\": \"half");
    std::fs::write(&path, text).unwrap();
    assert_eq!(read_records(&path).unwrap().len(), 2);
    let mut m = Manifest::open(&path).unwrap();
    assert_eq!(m.records().len(), 2);
    assert!(m.append(&records[0], false).is_err());
    m.append(&records[2], false).unwrap();
    let all = read_records(&path).unwrap();
    assert_eq!(all.len(), 3);
    for line in std::fs::read_to_string(&path).unwrap().lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
}

#[test]
fn fixture_manifest_reproduces_phase_diagram_rows() {
    let d = tempfile::tempdir().unwrap();
    let o = normlab(d.path(), &["fixtures", "--out", "o", "--manifest", "o/m.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["saturation_cells.json", "llama_cells.json", "per_seed.json", "significance.json"] {
        assert!(d.path().join("o/fixtures").join(f).exists(), "{f}");
    }
    assert_eq!(code(&normlab(d.path(), &["report", "o/m.jsonl", "--out", "r1"])), 0);
    assert_eq!(code(&normlab(d.path(), &["report", "o/m.jsonl", "--out", "r2"])), 0);
    for f in ["report.json", "report.md", "scatter.csv"] {
        let a = std::fs::read(d.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(d.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    let r: Value = serde_json::from_slice(&std::fs::read(d.path().join("r1/report.json")).unwrap()).unwrap();
    let deltas: Vec<f64> = r["comparisons"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["scale"] == "S1" && c["variant"] == "dyt")
        .map(|c| c["delta_percent"].as_f64().unwrap())
        .collect();
    for (got, want) in deltas.iter().zip([-27.3, 5.9, 19.7, 18.8]) {
        assert!((got - want).abs() <= 0.05, "{got} vs {want}");
    }
    assert_eq!(deltas.len(), 4);
    assert_eq!(r["family_size"], 12);
    let md = std::fs::read_to_string(d.path().join("r1/report.md")).unwrap();
    assert!(md.contains("family size m = 12"));
    assert!(md.contains("-27.3"));

    assert_eq!(code(&normlab(d.path(), &["report", "o/m.jsonl", "--family", "19", "--out", "r3"])), 0);
    let r: Value = serde_json::from_slice(&std::fs::read(d.path().join("r3/report.json")).unwrap()).unwrap();
    let s1 = r["comparisons"].as_array().unwrap().iter().find(|c| c["scale"] == "S1" && c["variant"] == "dyt").unwrap();
    assert!((s1["p_bonf"].as_f64().unwrap() - 0.032).abs() <= 0.002);
}

#[test]
fn report_edge_cases() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let o = normlab(d.path(), &["report", "empty.jsonl", "--out", "r"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_slice(&std::fs::read(d.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(r["cells"].as_array().unwrap().len(), 0);

    // One seed per condition, and a variant with no baseline.
    let mut records: Vec<_> = normlab_cli::per_seed_records().unwrap().into_iter().filter(|r| r.seed == 1337).collect();
    records.retain(|r| !(r.scale == "S4" && r.variant == "vanilla"));
    let rep = report::build(&records, None).unwrap();
    assert!(rep.cells.iter().all(|c| c.single_seed && c.std.is_none()));
    assert!(rep.comparisons.iter().all(|c| c.p_raw.is_none()));
    let orphan = rep.comparisons.iter().find(|c| c.scale == "S4").unwrap();
    assert!(orphan.delta_percent.is_none() && orphan.note.is_some());
    assert!(report::markdown(&rep).contains("single seed"));
}

fn sweep_spec(seeds: &str) -> String {
    format!(
        "seeds = {seeds}\nbudgets = [5000, 8000]\n\n\
         [model]\nn_layer = 1\nd_model = 32\nn_head = 4\nn_kv_head = 4\nblock_size = 16\n\n\
         [train]\nmax_steps = 6\nwarmup_steps = 1\neval_interval = 3\neval_batches = 1\nbatch_size = 2\n\n\
         [data]\nval_tokens = 2000\n\n\
         [[variants]]\nnorm_kind = \"layernorm\"\n\n[[variants]]\nnorm_kind = \"dyt\"\n"
    )
}

fn run_ids(path: &Path) -> BTreeSet<String> {
    read_records(path).unwrap().into_iter().map(|r| r.run_id).collect()
}

#[test]
fn sweep_grid_resumes_to_the_same_run_set() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("grid.toml"), sweep_spec("[1, 2, 3]")).unwrap();
    std::fs::write(d.path().join("dup.toml"), sweep_spec("[1, 2, 1]")).unwrap();
    let o = normlab(d.path(), &["sweep", "dup.toml", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("listed twice"));

    let o = normlab(d.path(), &["sweep", "grid.toml", "--out", "full", "--workers", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = run_ids(&d.path().join("full/manifest.jsonl"));
    assert_eq!(full.len(), 12);

    // Interrupted after 5 cells, then resumed.
    let o = normlab(d.path(), &["sweep", "grid.toml", "--out", "part", "--limit", "5", "--in-process"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(run_ids(&d.path().join("part/manifest.jsonl")).len(), 5);
    let o = normlab(d.path(), &["sweep", "grid.toml", "--out", "part", "--workers", "2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("5 already done, 7 ran"));
    assert_eq!(run_ids(&d.path().join("part/manifest.jsonl")), full);

    // Processes, threads and resumption all give the same traces.
    let by_id = |p: &str| {
        read_records(&d.path().join(p))
            .unwrap()
            .into_iter()
            .map(|r| (r.run_id, r.trace))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    assert_eq!(by_id("full/manifest.jsonl"), by_id("part/manifest.jsonl"));

    let o = normlab(d.path(), &["sweep", "grid.toml", "--out", "part"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 already done, 0 ran"));
}

#[test]
fn sweep_records_failing_cells_and_continues() {
    let d = tempfile::tempdir().unwrap();
    // Block size 16 needs more than 16 validation tokens; budget 10 fails.
    let spec = sweep_spec("[1]").replace("budgets = [5000, 8000]", "budgets = [10, 5000]");
    std::fs::write(d.path().join("grid.toml"), spec).unwrap();
    let o = normlab(d.path(), &["sweep", "grid.toml", "--out", "o", "--in-process"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("2 ran, 2 failed"), "{out}");
    let failures = std::fs::read_to_string(d.path().join("o/sweep-failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 2);
}

#[test]
fn probes_isolate_failures() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(d.path(), &["--norm", "dyt", "--out", "o"])), 0);
    assert_eq!(code(&train(d.path(), &["--out", "o"])), 0);
    let records = read_records(&d.path().join("o/manifest.jsonl")).unwrap();
    let ckpt = |i: usize| format!("o/checkpoints/{}.ckpt", records[i].run_id);

    let o = normlab(
        d.path(),
        &["probe", "--checkpoint", &ckpt(0), "--which", "alpha-report,saturation", "--batches", "2", "--out", "p"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("p/probe-alpha-report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "2L+1 sites plus header");
    let sat: Value = serde_json::from_slice(&std::fs::read(d.path().join("p/probe-saturation.json")).unwrap()).unwrap();
    assert_eq!(sat["threshold"], 2.0);
    assert_eq!(sat["sample"]["block_size"], 16);
    let all: Value = serde_json::from_slice(&std::fs::read(d.path().join("p/probes.json")).unwrap()).unwrap();
    assert_eq!(all[1]["seq_clamped_from"], 512);

    let o = normlab(
        d.path(),
        &["probe", "--checkpoint", &ckpt(1), "--which", "saturation,weight-geom,alpha-report", "--out", "q"],
    );
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("saturation: error"), "{stdout}");
    assert!(stdout.contains("weight-geom: ok"));
    let geom: Value = serde_json::from_slice(&std::fs::read(d.path().join("q/probe-weight-geom.json")).unwrap()).unwrap();
    assert!(geom["frobenius_total"].as_f64().unwrap() > 0.0);
    for m in geom["matrices"].as_array().unwrap() {
        let er = m["effective_rank"].as_f64().unwrap();
        let cap = m["rows"].as_f64().unwrap().min(m["cols"].as_f64().unwrap());
        assert!((1.0..=cap + 1e-9).contains(&er), "{m}");
    }
    assert_eq!(code(&normlab(d.path(), &["probe", "--checkpoint", "none.ckpt"])), 2);
}

#[test]
fn screen_paths() {
    let d = tempfile::tempdir().unwrap();
    for (t, want) in [("1e6", "try_dyt"), ("118e6", "prefer_norm"), ("10e6", "needs_calibration")] {
        let o = normlab(d.path(), &["screen", "--prior-only", "--params", "64e6", "--tokens", t, "--out", "s"]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).starts_with(&format!("verdict: {want}")));
        let j: Value = serde_json::from_slice(&std::fs::read(d.path().join("s/screen.json")).unwrap()).unwrap();
        assert_eq!(j["decision"]["verdict"], want);
    }

    let mut args = vec!["screen", "--ffn", "swiglu", "--seeds", "1,2", "--calibration-steps", "4", "--out", "s"];
    args.extend_from_slice(TINY);
    let o = normlab(d.path(), &args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("three seeds"), "{}", stderr(&o));

    let mut args = vec!["screen", "--seeds", "1,2", "--calibration-steps", "4", "--sample-batches", "2", "--out", "s"];
    args.extend_from_slice(TINY);
    let o = normlab(d.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j: Value = serde_json::from_slice(&std::fs::read(d.path().join("s/screen.json")).unwrap()).unwrap();
    assert_eq!(j["decision"]["evidence"]["mode"], "calibrated");
    assert_eq!(j["decision"]["per_seed_saturation"].as_array().unwrap().len(), 2);
    assert_eq!(j["calibrations"].as_array().unwrap().len(), 2);
}
