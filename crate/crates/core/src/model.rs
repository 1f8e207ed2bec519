//! SECViT blocks, stages, and presets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, PlanStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvNorm, Cpe, Ffn, LayerNorm, Linear};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::tensor::Scalar;

/// Cluster counts used when a config leaves `stage_clusters` empty.
pub const DEFAULT_STAGE_CLUSTERS: [usize; 4] = [32, 8, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_clusters: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ffn_ratio == 0 {
            return Err(Error::invalid("ffn_ratio must be positive"));
        }
        if self.num_clusters == 0 {
            return Err(Error::invalid("num_clusters must be at least 1"));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide model dim {}",
                self.num_heads, self.model_dim
            )));
        }
        Ok(())
    }
}

/// Normalization after each stem convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemNorm {
    /// Zero mean, unit variance over each sample's whole feature map, no
    /// affine. Keeps absolute intensity differences between pixels.
    #[default]
    Sample,
    /// Per-pixel layer norm over channels with affine parameters.
    Layer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// Empty means the leading entries of [`DEFAULT_STAGE_CLUSTERS`].
    #[serde(default)]
    pub stage_clusters: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_stem_strides")]
    pub stem_strides: Vec<usize>,
    /// Width of the first two stem convolutions; defaults to half the
    /// first stage width.
    #[serde(default)]
    pub stem_channels: Option<usize>,
    #[serde(default)]
    pub stem_norm: StemNorm,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_in_channels() -> usize {
    3
}

fn default_image_size() -> usize {
    224
}

fn default_ffn_ratio() -> usize {
    3
}

fn default_stem_strides() -> Vec<usize> {
    vec![2, 1, 2, 1]
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Named size presets: `secvit-t`, `secvit-s`, `secvit-b`, `secvit-l`, `secvit-xl`.
    pub fn preset(name: &str) -> Result<Self> {
        let (depths, channels, heads): (&[usize], &[usize], &[usize]) = match name {
            "secvit-t" => (&[2, 2, 9, 2], &[64, 128, 256, 512], &[2, 4, 8, 16]),
            "secvit-s" => (&[4, 4, 18, 4], &[64, 128, 256, 512], &[2, 4, 8, 16]),
            "secvit-b" => (&[4, 8, 26, 9], &[80, 160, 320, 512], &[2, 4, 8, 16]),
            "secvit-l" => (&[4, 8, 26, 9], &[112, 224, 448, 640], &[4, 8, 14, 20]),
            "secvit-xl" => (&[6, 12, 28, 12], &[128, 256, 512, 1024], &[4, 8, 16, 32]),
            other => return Err(Error::invalid(format!("unknown preset `{other}`"))),
        };
        let mut cfg = ModelConfig {
            in_channels: 3,
            image_size: 224,
            stage_depths: depths.to_vec(),
            stage_channels: channels.to_vec(),
            stage_heads: heads.to_vec(),
            stage_clusters: Vec::new(),
            num_classes: 1000,
            ffn_ratio: 3,
            stem_strides: default_stem_strides(),
            stem_channels: None,
            stem_norm: StemNorm::Sample,
            norm_eps: default_norm_eps(),
        };
        cfg.normalize()?;
        Ok(cfg)
    }

    /// Two-stage model sized for CPU training on 32×32 grayscale images.
    pub fn toy() -> Self {
        let mut cfg = ModelConfig {
            in_channels: 1,
            image_size: 32,
            stage_depths: vec![2, 2],
            stage_channels: vec![32, 64],
            stage_heads: vec![2, 4],
            stage_clusters: vec![4, 1],
            num_classes: 10,
            ffn_ratio: 3,
            stem_strides: default_stem_strides(),
            stem_channels: None,
            stem_norm: StemNorm::Sample,
            norm_eps: default_norm_eps(),
        };
        cfg.normalize().expect("toy config is valid");
        cfg
    }

    /// Fills defaults and checks consistency.
    pub fn normalize(&mut self) -> Result<()> {
        let stages = self.stage_depths.len();
        if stages == 0 || stages > 4 {
            return Err(Error::invalid(format!("{stages} stages; expected 1 to 4")));
        }
        if self.stage_clusters.is_empty() {
            self.stage_clusters = DEFAULT_STAGE_CLUSTERS[..stages].to_vec();
        }
        for (key, len) in [
            ("stage_channels", self.stage_channels.len()),
            ("stage_heads", self.stage_heads.len()),
            ("stage_clusters", self.stage_clusters.len()),
        ] {
            if len != stages {
                return Err(Error::invalid(format!(
                    "{key} has {len} entries for {stages} stages"
                )));
            }
        }
        if self.stem_channels.is_none() {
            self.stem_channels = Some((self.stage_channels[0] / 2).max(1));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::invalid("num_classes and in_channels must be positive"));
        }
        if self.stem_strides.len() != 4 || self.stem_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::invalid("stem_strides must be four entries of 1 or 2"));
        }
        for s in 0..stages {
            self.block_config(s).validate()?;
        }
        let factor = self.total_stride();
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be divisible by {factor}",
                self.image_size
            )));
        }
        for s in 0..stages {
            let side = self.stage_side(s);
            if self.stage_clusters[s] > side * side {
                return Err(Error::invalid(format!(
                    "stage {s}: {} clusters for {} tokens",
                    self.stage_clusters[s],
                    side * side
                )));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Overall input-to-last-stage downsampling.
    pub fn total_stride(&self) -> usize {
        self.stem_strides.iter().product::<usize>() << (self.num_stages() - 1)
    }

    /// Spatial side of stage `s` feature maps.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.image_size / self.stem_strides.iter().product::<usize>()) >> s
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            model_dim: self.stage_channels[stage],
            num_heads: self.stage_heads[stage],
            num_clusters: self.stage_clusters[stage],
            ffn_ratio: self.ffn_ratio,
            norm_eps: self.norm_eps,
        }
    }
}

/// Token mixer used inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    Clustered,
    Full,
}

/// CPE, then pre-norm clustered attention and FFN, both residual.
#[derive(Clone, Debug)]
pub struct SecBlock {
    pub cfg: BlockConfig,
    pub cpe: Cpe,
    pub norm1: LayerNorm,
    pub attn: AttentionLayer,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl SecBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(SecBlock {
            cpe: Cpe::new(params, &format!("{name}.cpe"), d, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), d, cfg.norm_eps)?,
            attn: AttentionLayer::new(params, &format!("{name}.attn"), d, cfg.num_heads, rng)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), d, cfg.norm_eps)?,
            ffn: Ffn::new(params, &format!("{name}.ffn"), d, cfg.ffn_ratio, rng)?,
            cfg,
        })
    }

    /// `[C, H, W]` or `[B, C, H, W]` in, same shape out.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        plans: &mut PlanStore,
    ) -> Result<Var> {
        self.forward_with(g, b, x, plans, Mixer::Clustered)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        plans: &mut PlanStore,
        mixer: Mixer,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (bsz, c, h, w) = match shape[..] {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::shape(
                    "secvit_block",
                    format!("expected [C, H, W] or [B, C, H, W], got {shape:?}"),
                ))
            }
        };
        if c != self.cfg.model_dim {
            return Err(Error::shape(
                "secvit_block",
                format!("{c} channels for a block of width {}", self.cfg.model_dim),
            ));
        }
        let x = g.reshape(x, &[bsz, c, h, w])?;
        let x = self.cpe.forward(g, b, x)?;
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let t = g.reshape(t, &[bsz, h * w, c])?;

        let n = self.norm1.forward(g, b, t)?;
        let a = match mixer {
            Mixer::Clustered => self
                .attn
                .cluster_attention(g, b, n, self.cfg.num_clusters, plans)?,
            Mixer::Full => self.attn.full_attention(g, b, n)?,
        };
        let t = g.add(t, a)?;
        let n = self.norm2.forward(g, b, t)?;
        let f = self.ffn.forward(g, b, n)?;
        let t = g.add(t, f)?;

        let y = g.reshape(t, &[bsz, h, w, c])?;
        let y = g.permute(y, &[0, 3, 1, 2])?;
        g.reshape(y, &shape)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<ConvNorm>,
    pub blocks: Vec<SecBlock>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[num_classes]` for a single image, `[B, num_classes]` for a batch.
    pub logits: Var,
    /// Feature map after the last block of each stage, `[B, C, H, W]`.
    pub stage_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SecVit {
    pub cfg: ModelConfig,
    pub stem: Vec<ConvNorm>,
    pub stages: Vec<Stage>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

impl SecVit {
    /// Registers all parameters in `params`, initialized from `seed`.
    pub fn new<T: Scalar>(cfg: &ModelConfig, params: &mut ParamSet<T>, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.normalize()?;
        let mut rng = rng::seeded(seed);
        let eps = cfg.norm_eps;
        let c0 = cfg.stage_channels[0];
        let sc = cfg.stem_channels.unwrap_or(c0 / 2);
        let widths = [(cfg.in_channels, sc), (sc, sc), (sc, c0), (c0, c0)];
        let mut stem = Vec::with_capacity(4);
        for (i, (&(cin, cout), &stride)) in widths.iter().zip(&cfg.stem_strides).enumerate() {
            stem.push(ConvNorm::new(
                params,
                &format!("stem.{i}"),
                cin,
                cout,
                stride,
                true,
                cfg.stem_norm == StemNorm::Sample,
                eps,
                &mut rng,
            )?);
        }
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for s in 0..cfg.num_stages() {
            let downsample = if s == 0 {
                None
            } else {
                Some(ConvNorm::new(
                    params,
                    &format!("stage{s}.downsample"),
                    cfg.stage_channels[s - 1],
                    cfg.stage_channels[s],
                    2,
                    false,
                    false,
                    eps,
                    &mut rng,
                )?)
            };
            let blocks = (0..cfg.stage_depths[s])
                .map(|i| {
                    SecBlock::new(
                        params,
                        &format!("stage{s}.block{i}"),
                        cfg.block_config(s),
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let last = *cfg.stage_channels.last().unwrap();
        let head_norm = LayerNorm::new(params, "head.norm", last, eps)?;
        let head = Linear::new(params, "head.fc", last, cfg.num_classes, true, &mut rng)?;
        Ok(SecVit {
            cfg,
            stem,
            stages,
            head_norm,
            head,
        })
    }

    /// `[C, H, W]` or `[B, C, H, W]` images to logits.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        images: Var,
        plans: &mut PlanStore,
    ) -> Result<ModelOutput> {
        self.forward_with(g, b, images, plans, Mixer::Clustered)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        images: Var,
        plans: &mut PlanStore,
        mixer: Mixer,
    ) -> Result<ModelOutput> {
        let shape = g.shape(images).to_vec();
        let (single, bsz, c, h, w) = match shape[..] {
            [c, h, w] => (true, 1, c, h, w),
            [b, c, h, w] => (false, b, c, h, w),
            _ => {
                return Err(Error::shape(
                    "secvit_forward",
                    format!("expected [C, H, W] or [B, C, H, W], got {shape:?}"),
                ))
            }
        };
        let factor = self.cfg.total_stride();
        if c != self.cfg.in_channels || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "secvit_forward",
                format!(
                    "input {shape:?}: need {} channels and sides divisible by {factor}",
                    self.cfg.in_channels
                ),
            ));
        }
        let mut x = g.reshape(images, &[bsz, c, h, w])?;
        for layer in &self.stem {
            x = layer.forward(g, b, x)?;
        }
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(g, b, x)?;
            }
            for block in &stage.blocks {
                x = block.forward_with(g, b, x, plans, mixer)?;
            }
            stage_outputs.push(x);
        }
        let s = g.shape(x).to_vec();
        let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(t, 2)?;
        let pooled = self.head_norm.forward(g, b, pooled)?;
        let logits = self.head.forward(g, b, pooled)?;
        let logits = if single {
            g.reshape(logits, &[self.cfg.num_classes])?
        } else {
            logits
        };
        Ok(ModelOutput {
            logits,
            stage_outputs,
        })
    }
}

/// Parameter count of a config without allocating weights.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let mut cfg = cfg.clone();
    cfg.normalize()?;
    let ln = |d: usize| 2 * d;
    let lin = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize| i * o * 9;
    let c0 = cfg.stage_channels[0];
    let sc = cfg.stem_channels.unwrap_or(c0 / 2);
    let mut total = conv(cfg.in_channels, sc) + conv(sc, sc) + conv(sc, c0) + conv(c0, c0);
    if cfg.stem_norm == StemNorm::Layer {
        total += ln(sc) * 2 + ln(c0) * 2;
    }
    for s in 0..cfg.num_stages() {
        let d = cfg.stage_channels[s];
        if s > 0 {
            total += conv(cfg.stage_channels[s - 1], d) + ln(d);
        }
        let block = 9 * d + 2 * ln(d) + 4 * lin(d, d) + lin(d, d * cfg.ffn_ratio) + lin(d * cfg.ffn_ratio, d);
        total += block * cfg.stage_depths[s];
    }
    let last = *cfg.stage_channels.last().unwrap();
    total += ln(last) + lin(last, cfg.num_classes);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn presets_and_defaults() {
        let t = ModelConfig::preset("secvit-t").unwrap();
        assert_eq!(t.stage_depths, [2, 2, 9, 2]);
        assert_eq!(t.stage_channels, [64, 128, 256, 512]);
        assert_eq!(t.stage_clusters, [32, 8, 2, 1]);
        assert!(ModelConfig::preset("secvit-q").is_err());
    }

    #[test]
    fn count_matches_construction() {
        let cfg = ModelConfig::toy();
        let mut p = ParamSet::<f32>::new();
        SecVit::new(&cfg, &mut p, 0).unwrap();
        assert_eq!(p.num_scalars(), count_parameters(&cfg).unwrap());
    }

    #[test]
    fn toy_forward_shapes() {
        let cfg = ModelConfig::toy();
        let mut p = ParamSet::<f32>::new();
        let model = SecVit::new(&cfg, &mut p, 3).unwrap();
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let img = g.constant(Tensor::rand_uniform(&[1, 32, 32], 0.0, 1.0, &mut rng::seeded(1)));
        let out = model.forward(&mut g, &b, img, &mut PlanStore::new()).unwrap();
        assert_eq!(g.shape(out.logits), &[10]);
        assert!(g.value(out.logits).is_finite());
        assert_eq!(g.shape(out.stage_outputs[0]), &[1, 32, 8, 8]);
        assert_eq!(g.shape(out.stage_outputs[1]), &[1, 64, 4, 4]);
    }

    #[test]
    fn bad_resolution_is_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 36;
        assert!(cfg.normalize().is_err());
    }
}
