use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use icl_forge_core::corpus::{Example, Split};
use icl_forge_core::embedspace::{EmbedOn, EmbeddingMatrix, HttpEmbedder};

use crate::config::RunConfig;
use crate::io::{sidecar, usage, write_json};
use crate::resources::{api_key, check_coverage, dataset, embeddings, is_packed, packed_manifest};

#[derive(Args, Debug)]
pub struct ImportEmbeddingsArgs {
    /// Existing matrix: JSONL rows or a packed `.f32` file with its `.json` manifest.
    #[arg(long, value_name = "PATH", conflicts_with = "endpoint")]
    pub input: Option<PathBuf>,
    /// OpenAI-compatible embeddings endpoint to fetch vectors from.
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Datasets whose ids must be covered (and, with --endpoint, whose texts are embedded).
    #[arg(long, value_name = "PATH")]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_name = "z|input")]
    pub embed_on: Option<EmbedOn>,
    /// Output: `.jsonl`, or `.f32` for the packed layout.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

pub fn run(a: ImportEmbeddingsArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    if let Some(on) = a.embed_on {
        cfg.embed_on = on;
    }
    let datasets = a.dataset.iter().map(|p| dataset(p, Split::Pool, "dataset")).collect::<anyhow::Result<Vec<_>>>()?;
    let emb = match (&a.input, &a.endpoint) {
        (Some(path), _) => embeddings(path)?,
        (None, Some(url)) => {
            let model = a.model.as_deref().ok_or_else(|| usage("--endpoint needs --model"))?;
            if datasets.is_empty() {
                return Err(usage("--endpoint needs at least one --dataset to embed"));
            }
            let examples: Vec<Example> = datasets.iter().flat_map(|d| d.examples().iter().cloned()).collect();
            HttpEmbedder::new(url, model)
                .with_api_key(api_key())
                .embed_examples(&examples, cfg.embed_on)
                .context("fetching embeddings")?
        }
        (None, None) => return Err(usage("give --input or --endpoint")),
    };
    check_coverage(&emb, &datasets.iter().collect::<Vec<_>>())?;
    save(&emb, &a.out)?;
    write_json(
        &sidecar(&a.out, ".meta.json"),
        &serde_json::json!({
            "command": "import-embeddings",
            "input": a.input,
            "endpoint": a.endpoint,
            "model": a.model,
            "rows": emb.len(),
            "dim": emb.dim(),
            "config": cfg.to_json(),
        }),
    )?;
    println!("{}: {} vectors of dimension {}", a.out.display(), emb.len(), emb.dim());
    Ok(())
}

fn save(emb: &EmbeddingMatrix, out: &std::path::Path) -> anyhow::Result<()> {
    if is_packed(out) {
        emb.save_packed(out, &packed_manifest(out))
    } else {
        emb.save_jsonl(out)
    }
    .with_context(|| format!("writing {}", out.display()))
}
