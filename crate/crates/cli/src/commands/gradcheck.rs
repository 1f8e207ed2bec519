use std::io::Write;

use clap::Args;
use serde::Serialize;

use secvit::gradcheck::{run_suite, GradCheckOptions};

use super::write_csv;
use crate::error::{CliError, Result};
use crate::{DTypeArg, GlobalArgs};

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Skews the backward of one graph op; the run must then fail.
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub op: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub passed: bool,
}

pub fn run(g: &GlobalArgs, a: &GradcheckArgs, out: &mut dyn Write) -> Result<Vec<GradRow>> {
    if g.dtype == Some(DTypeArg::F32) {
        return Err(CliError::Usage("gradcheck runs in f64 only".into()));
    }
    let mut rows: Vec<GradRow> = Vec::new();
    for seed in g.seed..g.seed + a.seeds.max(1) {
        let opts = GradCheckOptions {
            h: a.step,
            tol: a.tol,
            seed,
            tokens: a.tokens,
            dim: a.dim,
            heads: a.heads,
            corrupt: a.corrupt_op.clone(),
        };
        for r in run_suite(&opts)? {
            match rows.iter_mut().find(|row| row.op == r.name) {
                Some(row) => {
                    row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
                    row.passed = row.max_rel_err < a.tol;
                }
                None => rows.push(GradRow {
                    passed: r.max_rel_err < a.tol,
                    op: r.name,
                    max_rel_err: r.max_rel_err,
                    elements: r.elements,
                }),
            }
        }
    }
    for r in &rows {
        writeln!(
            out,
            "{:<28} max_rel_err={:.3e} elements={:<5} {}",
            r.op,
            r.max_rel_err,
            r.elements,
            if r.passed { "PASS" } else { "FAIL" }
        )?;
    }
    if let Some(path) = &g.out {
        write_csv(path, &rows)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}
