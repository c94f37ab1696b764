#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn lorag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorag")).args(args).env_remove("LORAG_ENDPOINT").output().expect("spawn lorag")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Builds an index from the three-document fixture corpus.
pub fn fixture_index(dir: &Path) -> PathBuf {
    let index = dir.join("index");
    let out = lorag(&["ingest", "--corpus", path_str(&fixture("corpus3.jsonl")), "--index", path_str(&index)]);
    assert!(out.status.success(), "{}", stderr(&out));
    index
}

/// Questions whose answer sentence sits in the corpus but not in the
/// question itself, so echoing the question scores poorly.
pub const PLANTED: [(&str, &str); 20] = [
    ("why is the sky blue", "Sunlight scattering by air molecules makes the sky look blue."),
    ("what do bees make", "Bees make honey from flower nectar stored in wax combs."),
    ("how do plants feed", "Plants feed themselves through photosynthesis in green leaves."),
    ("what melts ice", "Heat above zero degrees melts ice into liquid water."),
    ("where do penguins live", "Most penguins live in cold southern oceans near antarctica."),
    ("what powers a volcano", "Molten rock under pressure powers a volcano eruption."),
    ("why do tides rise", "The pull of the moon makes ocean tides rise and fall."),
    ("what is rust", "Rust is iron oxide formed when iron meets oxygen and moisture."),
    ("how do bats navigate", "Bats navigate at night using echoes of their own calls."),
    ("what causes thunder", "Lightning heats air so fast that thunder follows the flash."),
    ("what do whales eat", "Baleen whales eat krill filtered from sea water."),
    ("why do leaves fall", "Trees drop leaves in autumn to save water through winter."),
    ("how are diamonds formed", "Diamonds are formed from carbon squeezed deep inside the mantle."),
    ("what makes bread rise", "Yeast releases gas bubbles that make bread dough rise."),
    ("why is the sea salty", "Rivers carry dissolved minerals that keep the sea salty."),
    ("how do magnets work", "Aligned electron spins let magnets work on nearby iron."),
    ("what causes earthquakes", "Sudden slips along tectonic faults cause earthquakes."),
    ("how do birds fly", "Curved wings give birds lift when they fly forward."),
    ("what is a glacier", "A glacier is a slow river of compacted snow and ice."),
    ("why do stars twinkle", "Turbulent air bends starlight so stars appear to twinkle."),
];

pub const DISTRACTORS: [&str; 6] = [
    "The museum opens at nine on weekdays.",
    "A blue car is parked near the river.",
    "Some people make bread at home on sundays.",
    "The old tree near the school has thick bark.",
    "Fishing boats leave the harbour before dawn.",
    "Winter roads can be icy in the mountains.",
];

/// Writes the planted corpus and the matching dataset; returns their paths.
pub fn planted_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("planted.jsonl");
    let dataset = dir.join("dataset.jsonl");
    let mut docs = String::new();
    let mut lines = String::new();
    for (i, (q, r)) in PLANTED.iter().enumerate() {
        docs.push_str(&serde_json::json!({ "id": format!("fact{i:02}"), "text": r }).to_string());
        docs.push('\n');
        lines.push_str(&serde_json::json!({ "query": q, "reference": r }).to_string());
        lines.push('\n');
    }
    for (i, d) in DISTRACTORS.iter().enumerate() {
        docs.push_str(&serde_json::json!({ "id": format!("noise{i}"), "text": d }).to_string());
        docs.push('\n');
    }
    std::fs::write(&corpus, docs).unwrap();
    std::fs::write(&dataset, lines).unwrap();
    (corpus, dataset)
}

/// Single `*.json` file in `dir` whose name starts with `prefix`.
pub fn only_file(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let found: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with(prefix) && name.ends_with(suffix)
        })
        .collect();
    assert_eq!(found.len(), 1, "expected one {prefix}*{suffix} in {}", dir.display());
    found.into_iter().next().unwrap()
}

/// Stub config selecting a single sentence per refinement.
pub fn single_sentence_config(dir: &Path) -> PathBuf {
    let path = dir.join("single.json");
    let cfg = serde_json::json!({
        "generator": {"backend": "stub", "max_tokens": 64, "top_sentences": 1},
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}
