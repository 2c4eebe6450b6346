mod common;

use std::process::Command;

use common::{forge, stdout_json, workspace};

fn tree(root: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    if root.exists() {
        for e in std::fs::read_dir(root).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(tree(&p));
            } else {
                out.push(p.display().to_string());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_forge");
    assert_eq!(Command::new(bin).arg("bogus").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).args(["analyze"]).output().unwrap().status.code(), Some(1));

    let d = tempfile::tempdir().unwrap();
    let out = forge(&d.path().join("absent.json"), &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn full_run_writes_manifests() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 6);
    let ing = stdout_json(&forge(&cfg, &["ingest"]));
    assert_eq!(ing["group_b"], 12);

    let rw = stdout_json(&forge(&cfg, &["rewrite", "--limit", "5"]));
    assert_eq!(rw["complete"], false);
    let rw = stdout_json(&forge(&cfg, &["rewrite"]));
    assert_eq!((rw["resumed"].as_u64(), rw["ok"].as_u64(), rw["complete"].as_bool()), (Some(5), Some(12), Some(true)));

    let j = stdout_json(&forge(&cfg, &["judge"]));
    assert_eq!(j["kept"], 12);
    let s = stdout_json(&forge(&cfg, &["score"]));
    assert_eq!(s["scored"], 24);
    let m = stdout_json(&forge(&cfg, &["mix"]));
    assert_eq!((m[0]["n_rewritten"].as_u64(), m[0]["n_original"].as_u64()), (Some(2), Some(2)));
    let manifest = std::fs::read_to_string(m[0]["path"].as_str().unwrap()).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    let r = stdout_json(&forge(&cfg, &["report"]));
    for p in r["reports"].as_array().unwrap() {
        assert!(std::path::Path::new(p.as_str().unwrap()).is_file(), "{p}");
    }
    let table = forge(&cfg, &["analyze", "filter-rates", "--table"]);
    assert!(table.status.success());
    assert!(String::from_utf8_lossy(&table.stdout).contains("chart"));
}

#[test]
fn dry_runs_write_nothing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 4);
    let plan = stdout_json(&forge(&cfg, &["--dry-run", "ingest"]));
    assert_eq!(plan["sources"].as_array().unwrap().len(), 3);
    assert!(tree(&d.path().join("out")).is_empty());

    stdout_json(&forge(&cfg, &["ingest"]));
    let before = tree(&d.path().join("out"));
    stdout_json(&forge(&cfg, &["--dry-run", "rewrite"]));
    stdout_json(&forge(&cfg, &["--dry-run", "screen", "--source", "misc", "--n", "2"]));
    let mix = stdout_json(&forge(&cfg, &["--dry-run", "mix"]));
    assert_eq!(mix["plans"][0]["n_rewritten"], 2);
    stdout_json(&forge(&cfg, &["--dry-run", "report"]));
    assert_eq!(tree(&d.path().join("out")), before);
}

#[test]
fn seed_override_changes_screening_batch() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 40);
    let draw = |seed: &str| {
        let out = forge(&cfg, &["--seed", seed, "screen", "--source", "misc", "--n", "5"]);
        let v = stdout_json(&out);
        std::fs::read_to_string(v["path"].as_str().unwrap()).unwrap()
    };
    let a = draw("1");
    assert_eq!(a, draw("1"));
    assert_ne!(a, draw("2"));
    assert_eq!(a.lines().count(), 5);
}

#[test]
fn unknown_source_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 2);
    let out = forge(&cfg, &["screen", "--source", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}
