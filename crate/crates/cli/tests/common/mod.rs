//! Planted-corpus fixtures on disk and a wrapper around the built binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icl_forge_core::corpus::{Dataset, Example, Split};
use icl_forge_core::sim::{planted_corpus, PlantedConfig, PlantedCorpus};

pub struct Fixture {
    pub dir: PathBuf,
    pub corpus: PlantedCorpus,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Writes `clean.jsonl` (noise-free pool), `donor.jsonl` (another task),
/// `test.jsonl`, `emb.jsonl` and `model.json` into `dir`.
pub fn write_fixture(dir: &Path, cfg: &PlantedConfig) -> Fixture {
    let corpus = planted_corpus(&PlantedConfig { noise_rate: 0.0, ..cfg.clone() });
    let clean = Dataset::new(corpus.pool.examples().to_vec(), Split::Pool).unwrap();
    clean.save_jsonl(&dir.join("clean.jsonl")).unwrap();
    corpus.test.save_jsonl(&dir.join("test.jsonl")).unwrap();
    let donor: Vec<Example> = (0..60)
        .map(|i| Example::new(format!("d-{i:03}"), "donor", format!("donor question {i}"), format!("donor answer {i}")))
        .collect();
    Dataset::new(donor, Split::Pool).unwrap().save_jsonl(&dir.join("donor.jsonl")).unwrap();
    corpus.embeddings.save_jsonl(&dir.join("emb.jsonl")).unwrap();
    std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&corpus.model).unwrap()).unwrap();
    Fixture { dir: dir.to_path_buf(), corpus }
}

pub fn small_config(seed: u64) -> PlantedConfig {
    PlantedConfig { clusters: 8, per_cluster: 25, dim: 16, test_queries: 16, seed, ..PlantedConfig::default() }
}

/// Runs the binary in `dir` with the given arguments.
pub fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-forge"))
        .args(args)
        .current_dir(dir)
        .env_remove("ICL_FORGE_CACHE_DIR")
        .env_remove("ICL_FORGE_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}
