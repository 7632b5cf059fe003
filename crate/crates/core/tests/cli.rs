use std::path::Path;
use std::process::{Command, Output};

use mmv_core::cli::{execute, Task};
use mmv_core::model::{from_db, PriorParams, ProblemParams};
use mmv_core::replica::mmse;
use mmv_core::sim::{generate, MeasurementEnsemble, Setting};
use serde_json::Value;

fn mmv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn sets(pairs: &[(&str, &str)]) -> Vec<String> {
    pairs.iter().flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")]).collect()
}

fn run_ok(dir: &Path, sub: &str, pairs: &[(&str, &str)], out: &str, extra: &[&str]) -> String {
    let mut args: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    args.push(sub.into());
    args.extend(sets(pairs));
    args.extend(["-o".into(), out.into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = mmv(dir, &refs);
    assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(dir.join(out)).unwrap()
}

#[test]
fn phase_diagram_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [("delta_db", "-45:-25:3"), ("rate", "0.1:0.25:4"), ("j", "3")];
    let a = run_ok(dir.path(), "phase-diagram", &pairs, "a.csv", &[]);
    let b = run_ok(dir.path(), "phase-diagram", &pairs, "b.csv", &["--jobs", "1"]);
    let c = run_ok(dir.path(), "phase-diagram", &pairs, "c.csv", &["--jobs", "3"]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.starts_with("# mmv-csv schema=phase-diagram version=1\n"));
    assert_eq!(a.lines().count(), 2 + 12);
}

#[test]
fn amp_sim_is_reproducible_from_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [
        ("delta_db", "-35"),
        ("rate", "0.25"),
        ("n", "300"),
        ("trials", "3"),
        ("seed", "7"),
        ("traces", "true"),
    ];
    let a = run_ok(dir.path(), "amp-sim", &pairs, "a.csv", &[]);
    let b = run_ok(dir.path(), "amp-sim", &pairs, "b.csv", &["--jobs", "2"]);
    assert_eq!(a, b);
    assert!(a.starts_with("# mmv-csv schema=amp-sweep version=1\n"));
    let traces = std::fs::read_to_string(dir.path().join("a.traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3);
    for line in traces.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["mse_trace"].as_array().is_some_and(|t| !t.is_empty()));
    }
}

#[test]
fn sidecar_records_resolved_config_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# thresholds\nj = 5\nkind = bp\n").unwrap();
    let o = mmv(
        dir.path(),
        &["thresholds", "-c", "run.conf", "--set", "delta_db=-35", "--set", "j=3", "-o", "t.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(side["subcommand"], "thresholds");
    assert_eq!(side["schema"], "thresholds");
    assert_eq!(side["config"]["j"], "3");
    assert_eq!(side["config"]["kind"], "bp");
    assert_eq!(side["config"]["rho"], "0.1");
    for key in ["version", "started_unix", "wall_time_s", "threads", "tolerances", "db_convention"] {
        assert!(!side[key].is_null(), "missing {key}");
    }
}

#[test]
fn configuration_errors_exit_with_code_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["mmse", "--set", "bogus=1", "--set", "rate=0.2", "--set", "delta_db=-30"],
        &["mmse", "--set", "rate=0.2", "--set", "delta_db=-30", "--set", "rho=1.5"],
        &["mmse", "--set", "rate=0.2", "--set", "delta_db=-30", "--set", "delta=0.001"],
        &["amp-sim", "--set", "rate=0.2", "--set", "delta_db=-30", "--set", "setting=complex-complex"],
    ];
    let expected_keys = ["bogus", "rho", "delta", "setting"];
    for (args, key) in cases.iter().zip(expected_keys) {
        let o = mmv(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8_lossy(&o.stderr);
        let record: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
        assert_eq!(record["error"], "config");
        assert_eq!(record["exit_code"], 2);
        assert!(record["key"].as_str().unwrap().contains(key), "{args:?}: {record}");
    }
}

#[test]
fn plot_script_follows_the_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), "profile", &[("delta_db", "-35"), ("rate", "0.14")], "p.csv", &[]);
    let o = mmv(dir.path(), &["plot-script", "p.csv"]);
    assert!(o.status.success());
    let script = std::fs::read_to_string(dir.path().join("p.py")).unwrap();
    assert!(script.contains("p.csv") && script.contains("matplotlib"));

    std::fs::write(dir.path().join("other.csv"), "# mmv-csv schema=mystery version=1\na,b\n").unwrap();
    let o = mmv(dir.path(), &["plot-script", "other.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn complex_mmse_with_real_matrix_is_the_two_vector_mmse() {
    let map = [("delta_db", "-30,-40"), ("rate", "0.15,0.25"), ("matrix", "real")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let (outcome, _) = execute(Task::ComplexMmse, map).unwrap();
    let prior = PriorParams::new(0.1, 2).unwrap();
    assert_eq!(outcome.table.rows.len(), 4);
    for row in &outcome.table.rows {
        let (ddb, rate): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        let direct = mmse(&ProblemParams::new(prior, from_db(ddb), rate).unwrap()).unwrap();
        assert_eq!(row[3].parse::<f64>().unwrap(), direct);
    }
}

#[test]
fn amp_sim_archives_ensembles_that_regenerate_from_the_csv_seed() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [("delta_db", "-30"), ("rate", "0.3"), ("n", "100"), ("trials", "2"), ("seed", "3"), ("dump", "ens")];
    let csv = run_ok(dir.path(), "amp-sim", &pairs, "a.csv", &[]);
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for record in reader.records() {
        let record = record.unwrap();
        let trial = &record[col("trial")];
        let seed: u64 = record[col("seed")].parse().unwrap();
        let bytes = std::fs::read(dir.path().join(format!("ens/cell0_trial{trial}.mmve"))).unwrap();
        let archived = MeasurementEnsemble::read_from(bytes.as_slice()).unwrap();
        let fresh = generate(Setting::Mmv1, &PriorParams::new(0.1, 3).unwrap(), from_db(-30.0), 0.3, 100, seed).unwrap();
        assert_eq!(archived.seed, seed);
        assert_eq!(archived.measurements, fresh.measurements);
        assert_eq!(archived.signal, fresh.signal);
    }
}
