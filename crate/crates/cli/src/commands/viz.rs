use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use secvit::data::checkpoint::{load_checkpoint, load_params};
use secvit::data::config::load_config;
use secvit::data::synth::{synth_shapes, CLASS_NAMES};
use secvit::rng;
use secvit::sec::build_cluster_plan;
use secvit::{Graph, ModelConfig, ParamSet, PlanStore, SecVit, Tensor};

use crate::error::{CliError, Result};
use crate::ppm::{cluster_map, write_ppm};
use crate::GlobalArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VizSource {
    /// Keys of the last block of every stage of the model.
    Model,
    /// Raw pixel intensities of an image split into a dark and a bright half.
    Pixels,
}

#[derive(Args, Debug, Clone)]
pub struct VizArgs {
    #[arg(long, value_enum, default_value = "model")]
    pub source: VizSource,
    /// Trained parameters; random weights when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-stage cluster counts overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Option<Vec<usize>>,
    /// Which synthetic image to draw.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Image side for the pixels source.
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Pixel size of one token in the output image.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

/// Cluster ids of one rendered map.
#[derive(Clone, Debug)]
pub struct ClusterMap {
    pub path: PathBuf,
    pub side: usize,
    pub clusters: usize,
    pub assignment: Vec<usize>,
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn model_maps(g: &GlobalArgs, a: &VizArgs, base: &Path, out: &mut dyn Write) -> Result<Vec<ClusterMap>> {
    let mut cfg = match &g.config {
        Some(p) => load_config(p)?.model_config()?,
        None => ModelConfig::toy(),
    };
    if let Some(c) = &a.clusters {
        cfg.stage_clusters = c.clone();
        cfg.normalize()?;
    }
    let mut params = ParamSet::<f64>::new();
    let model = SecVit::new(&cfg, &mut params, g.seed)?;
    if let Some(path) = &a.checkpoint {
        load_params(&mut params, &load_checkpoint(path)?)?;
    }
    let data = synth_shapes(a.index + 1, g.seed);
    if data.channels != cfg.in_channels || data.height != cfg.image_size {
        return Err(CliError::Usage(format!(
            "synthetic images are {}×{}×{}; the model expects {} channels at {}²",
            data.channels, data.height, data.width, cfg.in_channels, cfg.image_size
        )));
    }
    let (x, labels) = data.batch::<f64>(&[a.index])?;
    writeln!(out, "image {} ({})", a.index, CLASS_NAMES[labels[0]])?;

    let mut graph = Graph::new();
    let b = params.bind_frozen(&mut graph);
    let xv = graph.constant(x);
    let mut plans = PlanStore::new();
    model.forward(&mut graph, &b, xv, &mut plans)?;

    let mut maps = Vec::new();
    for (s, stage) in model.stages.iter().enumerate() {
        let Some(block) = stage.blocks.last() else { continue };
        let plan = plans
            .find(&block.attn.name)
            .last()
            .ok_or_else(|| CliError::Failed(format!("no plan recorded for {}", block.attn.name)))?;
        let side = cfg.stage_side(s);
        let assignment = plan.assignment();
        let path = with_suffix(base, &format!(".stage{s}.ppm"));
        write_ppm(&path, &cluster_map(&assignment, side, side, a.scale)?)?;
        let mut sizes = vec![0usize; plan.num_clusters];
        for &c in &assignment {
            sizes[c] += 1;
        }
        writeln!(
            out,
            "stage {s}: {side}×{side} tokens, {} clusters of {:?} -> {}",
            plan.num_clusters,
            sizes,
            path.display()
        )?;
        maps.push(ClusterMap {
            path,
            side,
            clusters: plan.num_clusters,
            assignment,
        });
    }
    Ok(maps)
}

/// Left half near 0.1, right half near 0.9, with mild noise.
pub fn halves_image(side: usize, seed: u64) -> Vec<f64> {
    let noise = Tensor::<f64>::rand_normal(&[side * side], 0.02, &mut rng::seeded(seed));
    (0..side * side)
        .map(|i| {
            let base = if i % side < side / 2 { 0.1 } else { 0.9 };
            (base + noise.data()[i]).clamp(0.0, 1.0)
        })
        .collect()
}

fn pixel_map(g: &GlobalArgs, a: &VizArgs, base: &Path, out: &mut dyn Write) -> Result<Vec<ClusterMap>> {
    let side = a.side;
    if side < 2 || side % 2 != 0 {
        return Err(CliError::Usage("--side must be even and at least 2".into()));
    }
    let m = a.clusters.as_ref().and_then(|c| c.first().copied()).unwrap_or(2);
    let pixels = halves_image(side, g.seed);
    // a constant first coordinate keeps the cosine ranking monotone in intensity
    let embed: Vec<f64> = pixels.iter().flat_map(|&v| [1.0, v]).collect();
    let keys = Tensor::new(&[side * side, 2], embed)?;
    let plan = build_cluster_plan(&keys, m)?;
    let assignment = plan.assignment();
    let path = with_suffix(base, ".pixels.ppm");
    write_ppm(&path, &cluster_map(&assignment, side, side, a.scale)?)?;
    let mut counts = vec![[0usize; 2]; m];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c][usize::from(i % side >= side / 2)] += 1;
    }
    for (c, [left, right]) in counts.iter().enumerate() {
        writeln!(out, "cluster {c}: left={left} right={right}")?;
    }
    writeln!(out, "-> {}", path.display())?;
    Ok(vec![ClusterMap {
        path,
        side,
        clusters: m,
        assignment,
    }])
}

pub fn run(g: &GlobalArgs, a: &VizArgs, out: &mut dyn Write) -> Result<Vec<ClusterMap>> {
    if a.scale == 0 {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let base = g.out.clone().unwrap_or_else(|| PathBuf::from("clusters"));
    match a.source {
        VizSource::Model => model_maps(g, a, &base, out),
        VizSource::Pixels => pixel_map(g, a, &base, out),
    }
}
