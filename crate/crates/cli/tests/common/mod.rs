#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

const SCRIPT: &str = r###"{
  "rules": [
    {"contains": "single word Yes or No", "response": "Yes"},
    {"contains": "Information Content Score (1-5)", "response": "1. Information Content Score (1-5): 4\n2. Relevance (1-5): 4"},
    {"contains": "##Instruction##", "response": "##Instruction##: Describe the trend.\n##Response##: It rises."},
    {"contains": "<Instruction:", "response": "<Instruction: Name the scene.>\n<Response: A harbour.>"}
  ]
}"###;

fn records(source: &str, n: usize) -> String {
    (0..n)
        .map(|i| {
            json!({
                "id": format!("{i}"),
                "image": format!("{source}_{i}.png"),
                "conversations": [
                    {"from": "human", "value": format!("<image>\nWhat does item {i} show?")},
                    {"from": "gpt", "value": format!("Item {i} of {source}")},
                ],
            })
            .to_string()
                + "\n"
        })
        .collect()
}

/// A run directory with a `chart` and a `caption` source in Group B, an
/// unscreened `misc` source, and mock endpoints driven by a script file.
pub fn workspace(dir: &Path, per_source: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let sources = [("chart", "chart", Some("B")), ("caption", "caption", Some("B")), ("misc", "general", None)];
    let mut registry = Vec::new();
    for (id, category, group) in sources {
        std::fs::write(dir.join(format!("data/{id}.jsonl")), records(id, per_source)).unwrap();
        let mut spec = json!({
            "source_id": id, "display_name": id, "root_path": format!("data/{id}.jsonl"),
            "format_tag": "llava_jsonl", "category": category,
        });
        if let Some(g) = group {
            spec["group"] = json!(g);
        }
        registry.push(spec);
    }
    std::fs::write(dir.join("sources.json"), serde_json::to_string(&registry).unwrap()).unwrap();
    std::fs::write(dir.join("mock.json"), SCRIPT).unwrap();
    let cfg = json!({
        "registry": "sources.json",
        "output_root": "out",
        "seed": 11,
        "endpoints": [
            {"base_url": "mock:", "model_name": "mm", "kind": "multimodal", "mock_script": "mock.json"},
            {"base_url": "mock:", "model_name": "txt", "kind": "text_only", "mock_script": "mock.json"},
        ],
        "mix_plans": [{"name": "even", "rewritten_fraction": 0.5, "total": 4}],
    });
    let path = dir.join("forge.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

pub fn forge(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}
