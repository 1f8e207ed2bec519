use std::io::Write;

use clap::Args;
use serde::Serialize;

use secvit::rng;
use secvit::sec::GroupMode;
use secvit::{AttentionLayer, Graph, ParamSet, PlanStore, Scalar, Tensor};

use super::{csv_string, write_csv};
use crate::error::{CliError, Result};
use crate::{DTypeArg, GlobalArgs};

#[derive(Args, Debug, Clone)]
pub struct ConnectorArgs {
    #[arg(long, default_value_t = 576)]
    pub tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Output token counts; each must divide --tokens.
    #[arg(long, value_delimiter = ',', default_values_t = [288usize, 144])]
    pub groups: Vec<usize>,
    /// interleaved, sequential or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConnectorRow {
    pub mode: String,
    #[serde(rename = "L")]
    pub tokens: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    pub outputs: usize,
    pub max_weight_sum_dev: f64,
    pub min_rank_span: usize,
    pub max_rank_span: usize,
    pub mean_rank_span: f64,
}

fn modes(s: &str) -> Result<Vec<GroupMode>> {
    match s {
        "both" => Ok(vec![GroupMode::Interleaved, GroupMode::Sequential]),
        other => Ok(vec![other.parse()?]),
    }
}

fn mode_name(m: GroupMode) -> &'static str {
    match m {
        GroupMode::Interleaved => "interleaved",
        GroupMode::Sequential => "sequential",
    }
}

pub fn connector<T: Scalar>(a: &ConnectorArgs, seed: u64) -> Result<Vec<ConnectorRow>> {
    if let Some(&g) = a.groups.iter().find(|&&g| g == 0 || a.tokens % g != 0) {
        return Err(CliError::Usage(format!("{g} groups do not divide {} tokens", a.tokens)));
    }
    let mut params = ParamSet::<T>::new();
    let layer = AttentionLayer::new(&mut params, "connector", a.dim, a.heads, &mut rng::substream(seed, 0))?;
    let x = Tensor::<T>::rand_normal(&[a.tokens, a.dim], 1.0, &mut rng::substream(seed, 1));
    let mut rows = Vec::new();
    for mode in modes(&a.mode)? {
        for &groups in &a.groups {
            let mut g = Graph::new();
            let b = params.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let out = layer.connector(&mut g, &b, xv, groups, mode, &mut PlanStore::new())?;
            let w = g.value(out.weights);
            let dev = w
                .data()
                .chunks(w.last_dim())
                .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            let spans = out.groups[0].rank_spans();
            rows.push(ConnectorRow {
                mode: mode_name(mode).to_string(),
                tokens: a.tokens,
                groups,
                outputs: g.shape(out.output)[0],
                max_weight_sum_dev: dev,
                min_rank_span: *spans.iter().min().unwrap(),
                max_rank_span: *spans.iter().max().unwrap(),
                mean_rank_span: spans.iter().sum::<usize>() as f64 / spans.len() as f64,
            });
        }
    }
    Ok(rows)
}

pub fn run(g: &GlobalArgs, a: &ConnectorArgs, out: &mut dyn Write) -> Result<Vec<ConnectorRow>> {
    let rows = match g.dtype.unwrap_or(DTypeArg::F64) {
        DTypeArg::F32 => connector::<f32>(a, g.seed)?,
        DTypeArg::F64 => connector::<f64>(a, g.seed)?,
    };
    for r in &rows {
        writeln!(
            out,
            "{:<11} L={} G={} outputs={} weight_sum_dev={:.2e} rank_span min={} max={} mean={:.1}",
            r.mode,
            r.tokens,
            r.groups,
            r.outputs,
            r.max_weight_sum_dev,
            r.min_rank_span,
            r.max_rank_span,
            r.mean_rank_span
        )?;
    }
    match &g.out {
        Some(path) => write_csv(path, &rows)?,
        None => write!(out, "{}", csv_string(&rows)?)?,
    }
    Ok(rows)
}
