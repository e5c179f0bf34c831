use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use icl_forge_core::corpus::{import_relevant_noise, inject_irrelevant_noise, noise_count, NoiseSpec, Split};
use serde::Serialize;

use crate::config::RunConfig;
use crate::io::{require_file, sidecar, usage, write_json};
use crate::resources::dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// Outputs taken from another task's examples.
    Irrelevant,
    /// Wrong-but-related outputs read from a corruption file.
    #[value(alias = "relevant_import")]
    Relevant,
}

#[derive(Args, Debug)]
pub struct InjectNoiseArgs {
    #[arg(long, value_name = "PATH")]
    pub pool: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Fraction of examples to corrupt, in [0, 1].
    #[arg(long)]
    pub rate: f64,
    #[arg(long, value_enum, default_value = "irrelevant")]
    pub kind: KindArg,
    /// Dataset of another task supplying irrelevant outputs.
    #[arg(long, value_name = "PATH")]
    pub donor: Option<PathBuf>,
    /// Only use donor examples of this task.
    #[arg(long)]
    pub donor_task: Option<String>,
    /// JSONL of `{id, corrupted_output}` for relevant noise.
    #[arg(long, value_name = "PATH")]
    pub corruptions: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Provenance written next to the corrupted pool.
#[derive(Debug, Serialize)]
struct NoiseSidecar<'a> {
    source: &'a Path,
    noise_spec: &'a NoiseSpec,
    pool_size: usize,
    noisy_count: usize,
    noisy_ids: Vec<&'a str>,
    config: serde_json::Value,
}

pub fn sidecar_path(pool: &Path) -> PathBuf {
    sidecar(pool, ".noise.json")
}

pub fn run(a: InjectNoiseArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    if !(0.0..=1.0).contains(&a.rate) {
        return Err(usage(format!("--rate {} is outside [0, 1]", a.rate)));
    }
    let mut spec = match a.kind {
        KindArg::Irrelevant => NoiseSpec::irrelevant(a.rate, a.seed),
        KindArg::Relevant => {
            let path = a.corruptions.clone().ok_or_else(|| usage("--kind relevant needs --corruptions"))?;
            require_file(&path, "corruption")?;
            NoiseSpec::relevant_import(a.rate, a.seed, path)
        }
    };
    spec.donor_task = a.donor_task.clone();
    let pool = dataset(&a.pool, Split::Pool, "pool")?;

    let noisy = if noise_count(a.rate, pool.len()) == 0 {
        std::fs::copy(&a.pool, &a.out).with_context(|| format!("copying to {}", a.out.display()))?;
        None
    } else {
        let out = match a.kind {
            KindArg::Irrelevant => {
                let donor_path = a.donor.as_deref().ok_or_else(|| usage("--kind irrelevant needs --donor"))?;
                let donor = dataset(donor_path, Split::Pool, "donor")?;
                inject_irrelevant_noise(&pool, &donor, &spec)
            }
            KindArg::Relevant => import_relevant_noise(&pool, &spec),
        }
        .context("injecting noise")?;
        out.save_jsonl(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
        Some(out)
    };

    let noisy_ids: Vec<&str> = noisy
        .as_ref()
        .and_then(|d| d.ground_truth())
        .map(|t| t.noisy_ids().collect())
        .unwrap_or_default();
    let meta = NoiseSidecar {
        source: &a.pool,
        noise_spec: &spec,
        pool_size: pool.len(),
        noisy_count: noisy_ids.len(),
        noisy_ids,
        config: cfg.to_json(),
    };
    write_json(&sidecar_path(&a.out), &meta)?;
    println!("{}: {} of {} outputs corrupted", a.out.display(), meta.noisy_count, meta.pool_size);
    Ok(())
}
