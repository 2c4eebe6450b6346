#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use forge_core::config::RunConfig;
use forge_core::corpus::{Category, Provenance, Sample, Turn};
use forge_core::inference::{BackoffPolicy, ChatBackend, Endpoint, EndpointSet, MockBackend};
use forge_core::pipeline::Pipeline;

pub const B_SOURCES: [(&str, &str); 5] =
    [("charts", "chart"), ("vqa", "general"), ("captions", "caption"), ("docs", "ocr"), ("geometry", "code_math")];

pub fn fnv(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn llava_line(i: usize, source: &str) -> String {
    serde_json::json!({
        "id": format!("{source}-{i:04}"),
        "image": format!("{source}/{i:04}.png"),
        "conversations": [
            {"from": "human", "value": format!("<image>\nWhat does panel {i} of {source} show?")},
            {"from": "gpt", "value": format!("Value {}", (i * 37) % 101)},
        ],
    })
    .to_string()
}

/// Five Group B sources of `per_source` records each plus one Group A source.
pub fn write_corpus(dir: &Path, per_source: usize, group_a: usize) -> RunConfig {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut registry = Vec::new();
    for (source, category) in B_SOURCES {
        let body: String = (0..per_source).map(|i| llava_line(i, source) + "\n").collect();
        std::fs::write(data.join(format!("{source}.jsonl")), body).unwrap();
        registry.push(serde_json::json!({
            "source_id": source, "display_name": source, "root_path": format!("data/{source}.jsonl"),
            "format_tag": "llava_jsonl", "category": category, "group": "B",
        }));
    }
    let body: String = (0..group_a).map(|i| llava_line(i, "keep") + "\n").collect();
    std::fs::write(data.join("keep.jsonl"), body).unwrap();
    registry.push(serde_json::json!({
        "source_id": "keep", "display_name": "keep", "root_path": "data/keep.jsonl",
        "format_tag": "llava_jsonl", "category": "general", "group": "A",
    }));
    std::fs::write(dir.join("sources.json"), serde_json::to_string_pretty(&registry).unwrap()).unwrap();

    let cfg = serde_json::json!({
        "registry": "sources.json",
        "output_root": "out",
        "seed": 7,
        "endpoints": [
            {"base_url": "mock:", "model_name": "mock-mm", "kind": "multimodal", "max_concurrent": 8},
            {"base_url": "mock:", "model_name": "mock-text", "kind": "text_only", "max_concurrent": 4},
        ],
        "mix_plans": [
            {"name": "mix70", "rewritten_fraction": 0.7, "total": 60},
            {"name": "mix30", "rewritten_fraction": 0.3, "total": 100},
        ],
        "batch_size": 16,
    });
    std::fs::write(dir.join("forge.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    RunConfig::load(&dir.join("forge.json")).unwrap()
}

/// Deterministic stand-in model: every answer is a function of the prompt.
pub fn scripted_mock(latency_seed: Option<u64>) -> MockBackend {
    let m = MockBackend::new().with_responder(|_model, prompt| {
        let h = fnv(prompt);
        let tag = h % 10_000;
        let reply = if prompt.contains("single word Yes or No") {
            if h.is_multiple_of(5) { "No".to_string() } else { "Yes".to_string() }
        } else if prompt.contains("Information Content Score (1-5)") {
            format!("1. Information Content Score (1-5): {}\n2. Relevance (1-5): {}", 1 + h % 5, 1 + (h >> 8) % 5)
        } else if prompt.contains("Simple Answer:") {
            format!("Revised Answer: <response: Step one sets up case {tag}. Step two solves it.>")
        } else if prompt.contains("Scenario:") {
            format!(
                "Scenario: A scanned page {tag}.\nHuman: What is printed?\nAssistant: The page shows entry {tag}.\nHuman: Why does it matter?\nAssistant: It records item {tag}."
            )
        } else if prompt.contains("##Instruction##") {
            format!("##Instruction##: Compare the bars in chart {tag}.\n##Response##: The first bar leads.\n##Instruction##: Explain trend {tag}.\n##Response##: It rises then falls.")
        } else if prompt.contains("<Instruction:") {
            format!("<Instruction: Describe scene {tag} in depth.>\n<Response: The scene has three parts.>")
        } else {
            return None;
        };
        Some(reply)
    });
    match latency_seed {
        Some(seed) => m.with_latency_us(20, 300, seed),
        None => m,
    }
}

pub fn pipeline(cfg: RunConfig, mock: Arc<MockBackend>) -> Pipeline {
    let endpoints = cfg
        .endpoints
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.backoff = BackoffPolicy::none();
            let backend: Arc<dyn ChatBackend> = Arc::new(mock.clone());
            Arc::new(Endpoint::new(c, backend).unwrap())
        })
        .collect();
    Pipeline::with_endpoints(cfg, EndpointSet::new(endpoints)).unwrap()
}

pub fn sample(id: &str, source: &str, category: Category, provenance: Provenance) -> Sample {
    Sample {
        id: id.into(),
        source_id: source.into(),
        category,
        media: vec![format!("{id}.png")],
        turns: vec![Turn::human(format!("<image>\nQuestion {id}")), Turn::assistant(format!("Answer {id}"))],
        provenance,
        parent_id: None,
        extra: Default::default(),
    }
}

/// Every file under `root`, relative path to bytes, skipping stage logs whose
/// line order follows completion order.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if rel.ends_with(".log.jsonl") || rel.ends_with(".manifest.json") {
                continue;
            }
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
    out
}
