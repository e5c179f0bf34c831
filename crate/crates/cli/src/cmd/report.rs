use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use icl_forge_core::eval::EvalReport;

use crate::cmd::evaluate::print_table;
use crate::io::{require_file, to_pretty, usage};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report JSON files written by `evaluate`.
    #[arg(required = true, value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
    /// Print the reports as one JSON array instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(a: ReportArgs) -> anyhow::Result<()> {
    let mut reports = Vec::with_capacity(a.reports.len());
    for path in &a.reports {
        require_file(path, "report")?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        reports.push(r);
    }
    if a.json {
        print!("{}", to_pretty(&reports));
    } else {
        print_table(&reports);
    }
    Ok(())
}
