use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use secvit::data::checkpoint::{params_to_entries, save_checkpoint};
use secvit::data::config::{load_config, RunConfig};
use secvit::data::idx::load_idx;
use secvit::data::synth::synth_shapes;
use secvit::data::Dataset;
use secvit::train::{linear_probe, train, EpochStats};
use secvit::Scalar;

use super::write_csv;
use crate::error::{CliError, Result};
use crate::{DTypeArg, GlobalArgs};

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// IDX image file; synthetic shapes are generated when absent.
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// One cluster per stage, i.e. dense attention.
    #[arg(long)]
    pub single_cluster: bool,
    /// Train a softmax regression on raw pixels instead of the model.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochStats>,
    pub final_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

fn dataset(a: &TrainArgs, samples: usize, seed: u64) -> Result<Dataset> {
    match (&a.images, &a.labels) {
        (Some(i), Some(l)) => Ok(load_idx(i, l)?.take(samples)),
        _ => Ok(synth_shapes(samples, seed)),
    }
}

fn fit<T: Scalar>(
    g: &GlobalArgs,
    a: &TrainArgs,
    cfg: &RunConfig,
    data: &Dataset,
    dir: &std::path::Path,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let mut opts = cfg.train.clone();
    opts.single_cluster |= a.single_cluster;
    let mut log = |s: &EpochStats| {
        let _ = writeln!(
            out,
            "epoch {:>3} loss={:.4} acc={:.4} lr={:.2e} {:.1}s",
            s.epoch,
            s.loss,
            s.accuracy,
            s.lr,
            s.wall_ms / 1e3
        );
    };
    if a.probe {
        let mut history = Vec::new();
        let acc = linear_probe::<T>(data, &opts, g.seed, |s| {
            log(s);
            history.push(s.clone());
        })?;
        writeln!(out, "probe train accuracy {acc:.4}")?;
        write_csv(&dir.join("metrics.csv"), &history)?;
        return Ok(TrainSummary {
            history,
            final_accuracy: acc,
            checkpoint: None,
        });
    }
    let model_cfg = cfg.model_config()?;
    let trained = train::<T>(&model_cfg, data, &opts, g.seed, &mut log)?;
    write_csv(&dir.join("metrics.csv"), &trained.history)?;
    let ckpt = dir.join("checkpoint.secv");
    save_checkpoint(&ckpt, &params_to_entries(&trained.params))?;
    let final_accuracy = trained.history.last().map_or(0.0, |s| s.accuracy);
    writeln!(out, "checkpoint {}", ckpt.display())?;
    Ok(TrainSummary {
        history: trained.history,
        final_accuracy,
        checkpoint: Some(ckpt),
    })
}

pub fn run(g: &GlobalArgs, a: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let mut cfg = match &g.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.samples {
        cfg.train.samples = n;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.validate()?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("train_out"));
    std::fs::create_dir_all(&dir)?;
    let data = dataset(a, cfg.train.samples, g.seed)?;
    if data.is_empty() {
        return Err(CliError::Usage("no training samples".into()));
    }
    match g.dtype.unwrap_or(DTypeArg::F32) {
        DTypeArg::F32 => fit::<f32>(g, a, &cfg, &data, &dir, out),
        DTypeArg::F64 => fit::<f64>(g, a, &cfg, &data, &dir, out),
    }
}
