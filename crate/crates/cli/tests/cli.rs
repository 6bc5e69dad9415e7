//! Black-box checks of the binary's contract: printed output, exit
//! codes, and the no-partial-output guarantee on config errors.

use std::fs;
use std::process::Command;

fn conceptree(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_conceptree"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn count_8_prints_the_search_space_size() {
    let out = conceptree(&["count", "8"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "660032");
}

#[test]
fn enumerate_3_prints_four_hierarchies() {
    let out = conceptree(&["enumerate", "3"]);
    assert!(out.status.success());
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(lines, ["((0,1),2)", "((0,2),1)", "(0,(1,2))", "(0,1,2)"]);
}

#[test]
fn missing_config_exits_nonzero_without_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = conceptree(&["sweep", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty(), "no diagnostic");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0, "partial outputs left behind");
}

#[test]
fn invalid_config_errors_before_any_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    let output_dir = dir.path().join("out");
    fs::write(
        &config,
        serde_json::json!({
            "dataset": "mnist",
            "n_values": [],
            "modes": ["flat"],
            "hierarchy_source": "mnist_paper_default",
            "seeds": [0],
            "output_dir": output_dir,
        })
        .to_string(),
    )
    .unwrap();
    let out = conceptree(&["sweep", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_values"));
    assert!(!output_dir.exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(conceptree(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(conceptree(&["count", "--bogus-flag", "8"]).status.code(), Some(2));
}

#[test]
fn one_n_one_seed_both_modes_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    let output_dir = dir.path().join("out");
    fs::write(
        &config,
        serde_json::json!({
            "dataset": {"blobs": {
                "concept_count": 6,
                "dims": 12,
                "planted_hierarchy": "((0,1),(2,3),(4,5))",
                "super_cluster_separation": 10.0,
                "within_spread": 0.05,
                "examples_per_concept": 30,
            }},
            "n_values": [120],
            "modes": ["flat", "guided"],
            "hierarchy_source": {"fixed": "((0,1),(2,3),(4,5))"},
            "seeds": [0],
            "output_dir": output_dir,
        })
        .to_string(),
    )
    .unwrap();
    let out = conceptree(&["sweep", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(output_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per mode:\n{csv}");
}
