use std::io::Write;

use clap::Args;
use serde::{Deserialize, Serialize};

use secvit::baselines::{
    kmeans_cluster, planted_bands, score_partition, sec_partition, timed, window_partition, Distance,
    KMeansOptions,
};

use super::{csv_string, write_csv};
use crate::error::{CliError, Result};
use crate::GlobalArgs;

#[derive(Args, Debug, Clone)]
pub struct CompareArgs {
    /// Token count; must be a perfect square for the window grid.
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Group count for every strategy; its square root must divide the grid side.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    /// Planted similarity bands, which are the labels.
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = ["window".to_string(), "kmeans".to_string(), "sec".to_string()])]
    pub strategies: Vec<String>,
    /// k-means distance: cosine or euclidean.
    #[arg(long, default_value = "cosine")]
    pub distance: String,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
}

/// One partition metric row; field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    #[serde(rename = "L")]
    pub tokens: usize,
    pub d: usize,
    pub groups: usize,
    pub balance: f64,
    pub purity: f64,
    pub iterations: usize,
    pub wall_ns: u128,
}

pub fn compare(a: &CompareArgs, seed0: u64) -> Result<Vec<CompareRow>> {
    let side = (a.tokens as f64).sqrt().round() as usize;
    let per_side = (a.groups as f64).sqrt().round() as usize;
    for s in &a.strategies {
        if !["window", "kmeans", "sec"].contains(&s.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown strategy `{s}`; expected window, kmeans or sec"
            )));
        }
    }
    let wants_window = a.strategies.iter().any(|s| s == "window");
    if wants_window && (side * side != a.tokens || per_side * per_side != a.groups || side % per_side != 0) {
        return Err(CliError::Usage(format!(
            "window partition needs a square token grid tiled by {} square windows",
            a.groups
        )));
    }
    let distance: Distance = a.distance.parse()?;
    let mut rows = Vec::new();
    for seed in seed0..seed0 + a.seeds.max(1) {
        // planted_bands shuffles token order, so grid position carries no label information
        let (x, labels) = planted_bands(a.tokens, a.dim, a.bands, seed)?;
        for s in &a.strategies {
            let (p, ns) = match s.as_str() {
                "window" => timed(|| window_partition(side, side, side / per_side)),
                "kmeans" => timed(|| {
                    kmeans_cluster(
                        &x,
                        &KMeansOptions {
                            k: a.groups,
                            max_iter: a.max_iter,
                            seed,
                            distance,
                        },
                    )
                }),
                _ => timed(|| sec_partition(&x, a.groups)),
            };
            let m = score_partition(&p?, &labels, ns)?;
            rows.push(CompareRow {
                strategy: s.clone(),
                tokens: a.tokens,
                d: a.dim,
                groups: a.groups,
                balance: m.balance,
                purity: m.purity,
                iterations: m.iterations,
                wall_ns: m.wall_ns,
            });
        }
    }
    Ok(rows)
}

pub fn run(g: &GlobalArgs, a: &CompareArgs, out: &mut dyn Write) -> Result<Vec<CompareRow>> {
    let rows = compare(a, g.seed)?;
    match &g.out {
        Some(path) => {
            write_csv(path, &rows)?;
            for s in &a.strategies {
                let mine: Vec<&CompareRow> = rows.iter().filter(|r| &r.strategy == s).collect();
                let n = mine.len() as f64;
                writeln!(
                    out,
                    "{s:<7} purity={:.3} balance={:.3} iterations={:.1}",
                    mine.iter().map(|r| r.purity).sum::<f64>() / n,
                    mine.iter().map(|r| r.balance).sum::<f64>() / n,
                    mine.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
                )?;
            }
        }
        None => write!(out, "{}", csv_string(&rows)?)?,
    }
    Ok(rows)
}
