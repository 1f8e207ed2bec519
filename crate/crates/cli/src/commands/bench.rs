use std::io::Write;
use std::time::Instant;

use clap::Args;
use serde::Serialize;

use secvit::flops::FlopCounter;
use secvit::rng;
use secvit::{AttentionLayer, Graph, ParamSet, PlanStore, Scalar, Tensor};

use super::{csv_string, write_csv};
use crate::error::{CliError, Result};
use crate::{DTypeArg, GlobalArgs};

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Cluster counts; each must divide --tokens.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32])]
    pub clusters: Vec<usize>,
    /// Timed iterations per strategy.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub clusters: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub dtype: String,
    pub threads: usize,
    pub attn_core_flops: u64,
    pub total_flops: u64,
    pub flop_ratio: f64,
    pub wall_mean_ns: f64,
    pub wall_p50_ns: f64,
    pub wall_p95_ns: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

struct Timing {
    mean: f64,
    p50: f64,
    p95: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[pos]
}

fn time(iters: usize, warmup: usize, mut f: impl FnMut() -> secvit::Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ns = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        f()?;
        ns.push(start.elapsed().as_nanos() as f64);
    }
    let mean = ns.iter().sum::<f64>() / ns.len() as f64;
    ns.sort_by(f64::total_cmp);
    Ok(Timing {
        mean,
        p50: percentile(&ns, 0.5),
        p95: percentile(&ns, 0.95),
    })
}

/// Runs one attention forward and returns output and FLOP counts.
fn forward<T: Scalar>(
    layer: &AttentionLayer,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    clusters: Option<usize>,
) -> secvit::Result<(Tensor<T>, FlopCounter)> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = match clusters {
        None => layer.full_attention(&mut g, &b, xv)?,
        Some(m) => layer.cluster_attention(&mut g, &b, xv, m, &mut PlanStore::new())?,
    };
    Ok((g.value(y).clone(), g.flops().clone()))
}

pub fn bench<T: Scalar>(a: &BenchArgs, seed: u64, threads: usize) -> Result<Vec<BenchRow>> {
    if a.iters < 20 {
        return Err(CliError::Usage("--iters must be at least 20".into()));
    }
    if let Some(&m) = a.clusters.iter().find(|&&m| m == 0 || a.tokens % m != 0) {
        return Err(CliError::Usage(format!(
            "{m} clusters do not divide {} tokens",
            a.tokens
        )));
    }
    let mut params = ParamSet::<T>::new();
    let layer = AttentionLayer::new(&mut params, "attn", a.dim, a.heads, &mut rng::substream(seed, 0))?;
    let x = Tensor::<T>::rand_normal(&[a.tokens, a.dim], 1.0, &mut rng::substream(seed, 1));

    let (full_out, full_flops) = forward(&layer, &params, &x, None)?;
    let full_t = time(a.iters, a.warmup, || forward(&layer, &params, &x, None).map(|_| ()))?;
    let row = |strategy: &str, m: usize, flops: &FlopCounter, t: &Timing, diff: f64| BenchRow {
        strategy: strategy.to_string(),
        clusters: m,
        tokens: a.tokens,
        dim: a.dim,
        heads: a.heads,
        dtype: T::DTYPE.name().to_string(),
        threads,
        attn_core_flops: flops.attention_core(),
        total_flops: flops.total(),
        flop_ratio: full_flops.attention_core() as f64 / flops.attention_core() as f64,
        wall_mean_ns: t.mean,
        wall_p50_ns: t.p50,
        wall_p95_ns: t.p95,
        speedup: full_t.mean / t.mean,
        max_abs_diff: diff,
    };
    let mut rows = vec![row("full", 1, &full_flops, &full_t, 0.0)];
    for &m in &a.clusters {
        let (out, flops) = forward(&layer, &params, &x, Some(m))?;
        let t = time(a.iters, a.warmup, || forward(&layer, &params, &x, Some(m)).map(|_| ()))?;
        rows.push(row("sec", m, &flops, &t, out.max_abs_diff(&full_out)));
    }
    Ok(rows)
}

pub fn run(g: &GlobalArgs, a: &BenchArgs, out: &mut dyn Write) -> Result<Vec<BenchRow>> {
    let rows = match g.dtype.unwrap_or(DTypeArg::F32) {
        DTypeArg::F32 => bench::<f32>(a, g.seed, g.threads)?,
        DTypeArg::F64 => bench::<f64>(a, g.seed, g.threads)?,
    };
    writeln!(
        out,
        "L={} d={} heads={} threads={} iters={}",
        a.tokens, a.dim, a.heads, g.threads, a.iters
    )?;
    writeln!(
        out,
        "{:<6} {:>4} {:>14} {:>9} {:>12} {:>12} {:>12} {:>8} {:>10}",
        "", "M", "core FLOPs", "ratio", "mean ms", "p50 ms", "p95 ms", "speedup", "max diff"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<6} {:>4} {:>14} {:>9.3} {:>12.3} {:>12.3} {:>12.3} {:>8.2} {:>10.2e}",
            r.strategy,
            r.clusters,
            r.attn_core_flops,
            r.flop_ratio,
            r.wall_mean_ns / 1e6,
            r.wall_p50_ns / 1e6,
            r.wall_p95_ns / 1e6,
            r.speedup,
            r.max_abs_diff
        )?;
    }
    match &g.out {
        Some(path) => write_csv(path, &rows)?,
        None => write!(out, "{}", csv_string(&rows)?)?,
    }
    Ok(rows)
}
