use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use squant_cli::commands::BENCH_HEADER;

const TINY: &str = r#"{"model": {"d_model": 16, "vocab": 16, "seq_len": 8, "batch": 2, "corpus_chars": 3000,
    "steps": 4, "teacher_steps": 20}, "ablation_seeds": [0, 1], "verify_cases": 100, "bench_reps": 3}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn squant(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squant"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn verify_passes_and_reports_injected_faults() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let ok = squant(&["verify-kernels"], &config, &out);
    assert_eq!(ok.status.code(), Some(0));
    let report = json(out.join("verify.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["cases"], 100);

    let bad = squant(&["verify-kernels", "--inject-fault"], &config, &out);
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("seed 0") && stderr.contains("M=") && stderr.contains("--cases 1"), "{stderr}");
}

#[test]
fn bench_report_has_fixed_header_and_halved_multiplies() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let run = squant(&["gemm-bench", "--shapes", "64x64x64,6x9x5"], &config, &out);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = csv_rows(out.join("gemm_bench.csv"));
    assert_eq!(header.join(","), BENCH_HEADER);
    assert_eq!(rows.len(), 6);
    let mul = |i: usize| rows[i][6].parse::<u64>().unwrap();
    assert_eq!(2 * mul(1), mul(0));
    assert_eq!(2 * mul(4), mul(3));
    assert_eq!(rows[2][0], "mixed");
    assert_eq!((rows[2][4].as_str(), rows[2][5].as_str()), ("32", "32"));
    assert!(rows.iter().all(|r| r[8].parse::<u64>().unwrap() > 0));
    let report = json(out.join("gemm_bench.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn train_eval_and_inspect_agree() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    for cmd in ["train", "eval", "inspect"] {
        let run = squant(&[cmd], &config, &out);
        assert_eq!(run.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&run.stderr));
    }
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["total"].as_f64().unwrap().is_finite()));
    let trained = json(out.join("train_summary.json"));
    let evaluated = json(out.join("eval.json"));
    assert_eq!(trained["student_ppl"], evaluated["student_ppl"]);
    assert_eq!(trained["teacher_ppl"], evaluated["teacher_ppl"]);
    assert_eq!(trained["config_hash"], evaluated["config_hash"]);

    let (_, plans) = csv_rows(out.join("bit_plans.csv"));
    assert_eq!(plans.len(), 2 * 8);
    assert!(plans.iter().all(|r| r[3] == "4" || r[3] == "8"));
    assert!(plans.iter().any(|r| r[3] == "4"));
    let (_, scores) = csv_rows(out.join("first_column.csv"));
    for model in ["teacher", "student"] {
        for layer in ["0", "1"] {
            let n = scores.iter().filter(|r| r[0] == model && r[1] == layer).count();
            assert_eq!(n, 8);
        }
    }
    let (header, stats) = csv_rows(out.join("qk_stats.csv"));
    assert_eq!(header[2..], ["teacher_q_var", "teacher_k_var", "student_q_var", "student_k_var"]);
    assert!(stats.iter().all(|r| r[2..].iter().all(|v| v.parse::<f64>().unwrap() > 0.0)));
    let (_, attn) = csv_rows(out.join("attention_avg.csv"));
    assert_eq!(attn.len(), 2 * 2 * 8 * 8);
    let manifest = json(out.join("inspect.manifest.json"));
    assert_eq!(manifest["config_hash"], trained["config_hash"]);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 5);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let run = squant(&["ablate"], &config, &out);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let (_, cells) = csv_rows(out.join("ablation.csv"));
    let (_, runs) = csv_rows(out.join("ablation_runs.csv"));
    assert_eq!(cells.len(), 20);
    assert_eq!(runs.len(), 40);
    assert!(cells.iter().all(|c| c[2] == "2"));
}

#[test]
fn usage_errors_exit_with_two() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let bad_key = dir.path().join("bad.json");
    std::fs::write(&bad_key, r#"{"model": {"layer": 3}}"#).unwrap();
    assert_eq!(squant(&["train"], &bad_key, &out).status.code(), Some(2));
    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"model": {"d_model": 15}}"#).unwrap();
    assert_eq!(squant(&["train"], &invalid, &out).status.code(), Some(2));
    assert_eq!(squant(&["train"], &dir.path().join("missing.json"), &out).status.code(), Some(2));
    assert_eq!(squant(&["gemm-bench", "--shapes", "4x4"], &config, &out).status.code(), Some(2));
    assert_eq!(squant(&["eval"], &config, &dir.path().join("empty")).status.code(), Some(2));
    assert_eq!(squant(&["frobnicate"], &config, &out).status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_the_config() {
    let (dir, config) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    squant(&["verify-kernels"], &config, &a);
    let run = Command::new(env!("CARGO_BIN_EXE_squant"))
        .args(["verify-kernels", "--seed", "9", "--cases", "10", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert!(run.status.success());
    let (ra, rb) = (json(a.join("verify.json")), json(b.join("verify.json")));
    assert_eq!((ra["seed"].as_u64(), rb["seed"].as_u64()), (Some(0), Some(9)));
    assert_eq!(rb["cases"], 10);
    assert_ne!(
        json(a.join("verify-kernels.manifest.json"))["config_hash"],
        json(b.join("verify-kernels.manifest.json"))["config_hash"]
    );
}
