//! Loading inputs and constructing backends from URIs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use icl_forge_core::corpus::{check_disjoint, load_dataset, Dataset, DatasetFormat, Split};
use icl_forge_core::embedspace::{Bm25Index, CosineIndex, EmbedOn, EmbeddingMatrix, NeighborSearch};
use icl_forge_core::eval::{EchoBackend, HttpGenerator, InferenceBackend, PromptTemplate};
use icl_forge_core::lpr::LprSimilarity;
use icl_forge_core::scoring::{FileScorer, HttpScorer, PplOn, ScoreCache, ScorerBackend, SyntheticScorer, SyntheticScorerModel};
use icl_forge_core::API_KEY_ENV;

use crate::io::{require_file, usage};

pub const CACHE_DIR_ENV: &str = "ICL_FORGE_CACHE_DIR";

pub fn dataset(path: &Path, split: Split, what: &str) -> anyhow::Result<Dataset> {
    require_file(path, what)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => DatasetFormat::JsonArray,
        _ => DatasetFormat::Jsonl,
    };
    let mut ds = load_dataset(path, format).with_context(|| format!("loading {what} {}", path.display()))?;
    ds.split = split;
    Ok(ds)
}

pub fn pool_and_test(pool: &Path, test: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    let pool = dataset(pool, Split::Pool, "pool")?;
    let test = dataset(test, Split::Test, "test")?;
    check_disjoint(&pool, &test).map_err(|e| usage(e.to_string()))?;
    Ok((pool, test))
}

/// Manifest of a packed matrix: `<name>.f32` pairs with `<name>.json`.
pub fn packed_manifest(rows: &Path) -> PathBuf {
    rows.with_extension("json")
}

pub fn is_packed(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "f32")
}

pub fn embeddings(path: &Path) -> anyhow::Result<EmbeddingMatrix> {
    require_file(path, "embedding")?;
    let emb = if is_packed(path) {
        let manifest = packed_manifest(path);
        require_file(&manifest, "embedding manifest")?;
        EmbeddingMatrix::load_packed(path, &manifest)
    } else {
        EmbeddingMatrix::load_jsonl(path)
    };
    emb.with_context(|| format!("loading embeddings {}", path.display()))
}

/// Fails with a usage error naming the first ids without a vector.
pub fn check_coverage(emb: &EmbeddingMatrix, datasets: &[&Dataset]) -> anyhow::Result<()> {
    let missing: Vec<&str> = datasets
        .iter()
        .flat_map(|d| d.examples())
        .map(|e| e.id.as_str())
        .filter(|id| !emb.contains(id))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = missing.iter().take(5).copied().collect();
    Err(usage(format!("{} ids have no embedding, e.g. {}", missing.len(), shown.join(", "))))
}

pub fn template(path: Option<&Path>, pool: &Dataset) -> anyhow::Result<PromptTemplate> {
    match path {
        Some(p) => {
            require_file(p, "template")?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PromptTemplate::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
        None => {
            let task = pool.tasks().first().map_or_else(|| "default".to_string(), |t| t.to_string());
            Ok(PromptTemplate::question_answer(task))
        }
    }
}

pub fn is_remote(uri: &str) -> bool {
    uri.starts_with("http://") || uri.starts_with("https://")
}

pub fn api_key() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

/// `file:PATH`, `synthetic:MODEL.json` or an `http(s)://` base URL.
pub fn scorer(
    uri: &str,
    pool: &Dataset,
    model: Option<&str>,
    template: &PromptTemplate,
    ppl_on: PplOn,
) -> anyhow::Result<Box<dyn ScorerBackend>> {
    if let Some(path) = uri.strip_prefix("file:") {
        let path = Path::new(path);
        require_file(path, "score")?;
        return Ok(Box::new(FileScorer::load(path).with_context(|| format!("loading scores {}", path.display()))?));
    }
    if let Some(path) = uri.strip_prefix("synthetic:") {
        let path = Path::new(path);
        require_file(path, "synthetic model")?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let model: SyntheticScorerModel =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        model.validate().map_err(|e| usage(e.to_string()))?;
        return Ok(Box::new(SyntheticScorer::from_dataset(model, pool).map_err(|e| usage(e.to_string()))?));
    }
    if is_remote(uri) {
        let model = model.ok_or_else(|| usage("an HTTP scorer needs --model"))?;
        let s = HttpScorer::new(uri, model, template.clone(), ppl_on).with_api_key(api_key());
        return Ok(Box::new(s));
    }
    Err(usage(format!("unrecognised scorer URI {uri:?} (expected file:, synthetic: or http(s)://)")))
}

/// `echo:...` test doubles or an `http(s)://` base URL.
pub fn generator(
    uri: &str,
    test: &Dataset,
    model: Option<&str>,
    context_window: Option<usize>,
) -> anyhow::Result<Box<dyn InferenceBackend>> {
    if uri.starts_with("echo:") {
        let refs: HashMap<String, String> =
            test.examples().iter().map(|e| (e.id.clone(), e.output_text.clone())).collect();
        return Ok(Box::new(EchoBackend::from_uri(uri, refs).map_err(|e| usage(e.to_string()))?));
    }
    if is_remote(uri) {
        let model = model.ok_or_else(|| usage("an HTTP generator needs --model"))?;
        let mut g = HttpGenerator::new(uri, model).with_api_key(api_key());
        if let Some(w) = context_window {
            g = g.with_context_window(w);
        }
        return Ok(Box::new(g));
    }
    Err(usage(format!("unrecognised generator URI {uri:?} (expected echo:... or http(s)://)")))
}

/// `--cache`, else `$ICL_FORGE_CACHE_DIR/scores.jsonl`, else memory only.
pub fn cache(explicit: Option<&Path>) -> anyhow::Result<ScoreCache> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CACHE_DIR_ENV).filter(|d| !d.is_empty()).map(|d| PathBuf::from(d).join("scores.jsonl")),
    };
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            ScoreCache::open(&p).with_context(|| format!("opening score cache {}", p.display()))
        }
        None => Ok(ScoreCache::in_memory()),
    }
}

/// LPR neighbourhood search over the pool.
pub enum Neighbours {
    Cosine,
    Bm25(Bm25Index),
}

impl Neighbours {
    pub fn build(similarity: LprSimilarity, pool: &Dataset, embed_on: EmbedOn) -> anyhow::Result<Self> {
        Ok(match similarity {
            LprSimilarity::Cosine => Neighbours::Cosine,
            LprSimilarity::Bm25 => Neighbours::Bm25(
                Bm25Index::build(pool.examples().iter().map(|e| (e.id.clone(), embed_on.text(e))))
                    .context("building BM25 index")?,
            ),
        })
    }

    pub fn search<'a>(&'a self, index: &'a CosineIndex) -> &'a dyn NeighborSearch {
        match self {
            Neighbours::Cosine => index,
            Neighbours::Bm25(b) => b,
        }
    }
}
