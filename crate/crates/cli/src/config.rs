//! Run configuration: defaults, then the `--config` JSON, then flags.

use std::path::Path;

use icl_forge_core::embedspace::EmbedOn;
use icl_forge_core::eval::Metric;
use icl_forge_core::lpr::LprConfig;
use icl_forge_core::scoring::PplOn;
use icl_forge_core::selectors::SelectorConfig;
use serde::{Deserialize, Serialize};

use crate::io::usage;
use crate::{LprArgs, SelectorArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub selector: SelectorConfig,
    pub lpr_enabled: bool,
    pub lpr: LprConfig,
    pub global_rank: bool,
    pub seeds: Vec<u64>,
    pub metric: Metric,
    pub embed_on: EmbedOn,
    pub ppl_on: PplOn,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            selector: SelectorConfig::default(),
            lpr_enabled: false,
            lpr: LprConfig::default(),
            global_rank: false,
            seeds: vec![0],
            metric: Metric::Em,
            embed_on: EmbedOn::Z,
            ppl_on: PplOn::Sequence,
            jobs: None,
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

impl RunConfig {
    pub fn apply_selector(&mut self, a: &SelectorArgs) {
        if let Some(m) = a.selector {
            self.selector.method = m;
        }
        if let Some(k) = a.k_demos {
            self.selector.k_demos = k;
        }
        if let Some(m) = a.dpp_pool {
            self.selector.candidate_pool_size = m;
        }
        if let Some(s) = a.seed {
            self.selector.seed = s;
        }
    }

    pub fn apply_lpr(&mut self, a: &LprArgs) {
        if a.lpr {
            self.lpr_enabled = true;
            self.global_rank = false;
        }
        if a.global_rank {
            self.global_rank = true;
            self.lpr_enabled = false;
        }
        if let Some(k) = a.lpr_k {
            self.lpr.k = k;
        }
        if let Some(g) = a.lpr_gamma {
            self.lpr.gamma = g;
        }
        if let Some(s) = a.lpr_similarity {
            self.lpr.similarity = s;
        }
        if let Some(b) = a.lpr_rank_base {
            self.lpr.rank_base = b;
        }
        if let Some(t) = a.lpr_tie_rank {
            self.lpr.tie_rank = t;
        }
        if let Some(f) = a.lpr_flag_scope {
            self.lpr.flag_scope = f;
        }
        if a.no_reorder {
            self.lpr.reorder = false;
        }
    }

    pub fn apply_jobs(&mut self, jobs: Option<usize>) {
        if jobs.is_some() {
            self.jobs = jobs;
        }
    }

    /// The worker bound; HTTP stages default to 4.
    pub fn jobs_for(&self, remote: bool) -> usize {
        self.jobs.unwrap_or_else(|| {
            if remote {
                4
            } else {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            }
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.selector.validate().map_err(|e| usage(e.to_string()))?;
        self.lpr.validate().map_err(|e| usage(e.to_string()))?;
        if self.lpr_enabled && self.global_rank {
            return Err(usage("lpr and global_rank are mutually exclusive"));
        }
        if self.seeds.is_empty() {
            return Err(usage("seeds must not be empty"));
        }
        if self.jobs == Some(0) {
            return Err(usage("jobs must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}
