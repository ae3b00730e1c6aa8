use std::path::Path;
use std::process::{Command, Output};

use quantfl::report::METRICS_COLUMNS;

fn quantfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantfl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("QUANTFL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn preset_with(name: &str, edit: impl FnOnce(String) -> String) -> String {
    let text = quantfl::config::preset(name).expect("preset exists").to_owned();
    edit(text)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    (header, r.records().map(Result::unwrap).collect())
}

#[test]
fn smoke_run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantfl(&["run", "--preset", "synthetic-smoke", "--out-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("out/metrics.csv"));
    assert_eq!(header, METRICS_COLUMNS);
    assert_eq!(rows.len(), 20);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), k);
        assert_eq!(row[13], row[14], "round bits equal wire bits in round {k}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 20);
    assert_eq!(summary["total_bits"], summary["wire_bits"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["source"], "preset:synthetic-smoke");
}

#[test]
fn metrics_header_is_stable() {
    let golden = "round,clients,refresh,train_loss,train_accuracy,test_loss,test_accuracy,\
uplink_payload_bits,uplink_overhead_bits,codebook_bits,codebook_bits_amortised,\
downlink_model_bits,downlink_overhead_bits,round_bits,wire_bits,cumulative_bits,\
update_range,update_variance,update_excess_kurtosis,client_update_range,\
client_update_variance,codebook_levels,codebook_fallbacks";
    assert_eq!(METRICS_COLUMNS.join(","), golden);
}

#[test]
fn reruns_are_byte_identical_and_seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = quantfl(&["run", "--preset", "synthetic-smoke", "--out-dir", sub], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let out = quantfl(&["run", "--preset", "synthetic-smoke", "--seed", "8", "--out-dir", "c"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let read = |s: &str| std::fs::read(dir.path().join(s)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(read("a/summary.json"), read("b/summary.json"));
    assert_ne!(read("a/metrics.csv"), read("c/metrics.csv"));
}

#[test]
fn out_dir_defaults_to_runs_and_honours_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantfl(&["run", "--preset", "synthetic-smoke"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("runs/synthetic-smoke/metrics.csv").is_file());

    let out = Command::new(env!("CARGO_BIN_EXE_quantfl"))
        .args(["run", "--preset", "synthetic-smoke"])
        .current_dir(dir.path())
        .env("QUANTFL_OUT_DIR", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("elsewhere/synthetic-smoke/metrics.csv").is_file());
}

#[test]
fn negative_levels_exit_with_code_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset_with("synthetic-smoke", |t| t.replace("levels = 64", "levels = -4"));
    let line = text.lines().position(|l| l.contains("levels = -4")).unwrap() + 1;
    std::fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = quantfl(&["run", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("quantiser.levels"), "{err}");
    assert!(err.contains(&format!("bad.toml:{line}")), "{err}");
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn unknown_keys_and_missing_sources_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset_with("synthetic-smoke", |t| t.replace("[local]", "[local]\nmomentum = 0.9"));
    std::fs::write(dir.path().join("typo.toml"), text).unwrap();
    let out = quantfl(&["run", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("momentum"), "{}", stderr(&out));

    assert_eq!(quantfl(&["run"], dir.path()).status.code(), Some(2));
    assert_eq!(quantfl(&["run", "--preset", "no-such-preset"], dir.path()).status.code(), Some(2));
}

#[test]
fn cost_command_prints_exact_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantfl(&["cost", "--preset", "mnist-paper-cost", "--csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header, quantfl::commands::COST_COLUMNS);
    let method = header.iter().position(|h| h == "method").unwrap();
    let levels = header.iter().position(|h| h == "levels").unwrap();
    let bits = header.iter().position(|h| h == "total_bits").unwrap();
    let lookup: Vec<(String, String, String)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[method].to_owned(), rec[levels].to_owned(), rec[bits].to_owned())
        })
        .collect();
    for (m, l, b) in [
        ("baseline", "", "3494400"),
        ("bu", "64", "2074903"),
        ("bu", "128", "2129605"),
        ("qsgd", "64", "2129560"),
        ("qsgd", "128", "2184160"),
    ] {
        assert!(lookup.contains(&(m.into(), l.into(), b.into())), "{m} {l}: {lookup:?}");
    }

    let table = quantfl(&["cost", "--preset", "mnist-paper-cost"], dir.path());
    assert!(table.status.success());
    assert!(stdout(&table).contains("40.62"), "{}", stdout(&table));
}

#[test]
fn alpha_sweep_runs_every_seed_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset_with("dirichlet-sweep", |t| t.replace("rounds = 30", "rounds = 4"));
    std::fs::write(dir.path().join("sweep.toml"), text).unwrap();
    let out = quantfl(&["sweep", "sweep.toml", "--axis", "alpha", "--out-dir", "s"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let (_, runs) = read_csv(&dir.path().join("s/sweep_runs.csv"));
    let (_, rows) = read_csv(&dir.path().join("s/sweep.csv"));
    let (_, curves) = read_csv(&dir.path().join("s/sweep_curves.csv"));
    assert_eq!(runs.len(), 15);
    assert_eq!(rows.len(), 3);
    assert_eq!(curves.len(), 3 * 4);
    assert!(rows.iter().all(|r| &r[2] == "5"));
    assert!(dir.path().join("s/manifest.json").is_file());
}

#[test]
fn levels_sweep_costs_strictly_more_bits_per_level_step() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset_with("dirichlet-sweep", |t| {
        t.replace("rounds = 30", "rounds = 3").replace("seeds = [1, 2, 3, 4, 5]", "seeds = [1, 2]")
    });
    std::fs::write(dir.path().join("sweep.toml"), text).unwrap();
    let out = quantfl(&["sweep", "sweep.toml", "--axis", "levels", "--out-dir", "s"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("s/sweep.csv"));
    let bits = header.iter().position(|h| h == "total_bits_mean").unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r[bits].parse().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!(values.windows(2).all(|w| w[0] < w[1]), "{values:?}");
}

#[test]
fn empty_sweep_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset_with("dirichlet-sweep", |t| t.replace("alpha = [1.0, 0.5, 0.1]", "alpha = []"));
    std::fs::write(dir.path().join("empty.toml"), text).unwrap();
    let out = quantfl(&["sweep", "empty.toml", "--axis", "alpha", "--out-dir", "s"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("sweep.alpha"), "{}", stderr(&out));
}

#[test]
fn presets_are_listed_and_printable() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantfl(&["presets"], dir.path());
    let names = stdout(&out);
    for name in ["mnist-paper-cost", "synthetic-smoke", "dirichlet-sweep"] {
        assert!(names.lines().any(|l| l == name), "{names}");
    }
    let one = quantfl(&["presets", "synthetic-smoke"], dir.path());
    assert!(stdout(&one).contains("name = \"synthetic-smoke\""));
}

#[test]
fn missing_idx_files_fail_at_runtime_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantfl(&["run", "--preset", "mnist-paper-cost", "--out-dir", "m"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "), "{}", stderr(&out));
}
