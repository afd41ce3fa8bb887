#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rca_core::dumpio::load_ground_truth;
use rca_core::RawResponse;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn rca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rca"))
        .args(args)
        .env("RCA_LOG", "error")
        .output()
        .expect("spawn rca")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// One response per (image, category) echoing every ground-truth box of the
/// fixture in normalized coordinates.
pub fn write_perfect_responses(path: &Path) {
    let (gts, _) = load_ground_truth(&fixture("gt.json")).expect("fixture");
    let mut grouped: BTreeMap<(u64, String), Vec<String>> = BTreeMap::new();
    for g in &gts {
        grouped
            .entry((g.image_id, g.category.clone()))
            .or_default()
            .push(g.bbox.to_string());
    }
    let lines: Vec<String> = grouped
        .into_iter()
        .map(|((image_id, category), boxes)| {
            let resp = RawResponse {
                image_id,
                category,
                width: 1.0,
                height: 1.0,
                response_text: format!("Found: {}", boxes.join(" and ")),
            };
            serde_json::to_string(&resp).expect("serialize")
        })
        .collect();
    fs::write(path, lines.join("\n") + "\n").expect("write responses");
}

/// Relative path -> bytes for every file below `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("prefix").to_path_buf();
                out.insert(rel, fs::read(&path).expect("read"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
