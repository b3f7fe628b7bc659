#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use worldforge_cli::{run, PipelineManifest};

pub const PIPELINES: [&str; 5] = ["dream", "viewpair", "mimicpair", "sysid", "augment"];

pub fn manifest_in(dir: &Path, pipeline: &str, seed: u64, output: &str, config: serde_json::Value) -> PipelineManifest {
    let text = serde_json::json!({ "pipeline": pipeline, "seed": seed, "output": output, "config": config }).to_string();
    let path = dir.join(format!("{output}.json"));
    std::fs::write(&path, text).unwrap();
    PipelineManifest::load(&path, None).unwrap()
}

/// Every file under `dir` keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the default manifest of `pipeline` twice into separate directories
/// and returns `(files, identical)`.
pub fn rerun_identical(pipeline: &str, seed: u64) -> (usize, bool) {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&manifest_in(tmp.path(), pipeline, seed, "a", serde_json::json!({}))).unwrap();
    let b = run(&manifest_in(tmp.path(), pipeline, seed, "b", serde_json::json!({}))).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    (ta.len(), ta == tb)
}
