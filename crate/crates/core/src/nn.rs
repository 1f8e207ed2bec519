//! Small parameterized layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flops::FlopCategory;
use crate::params::{fan_in_uniform, Bound, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// `y = x · Wᵀ + b`, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_dim, in_dim], in_dim, rng),
        )?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.linear(x, b[self.weight], self.bias.map(|id| b[id]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    /// Normalizes the last axis.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b[self.gamma], b[self.beta], self.eps)
    }

    /// Normalizes the channel axis of `[B, C, H, W]` at every pixel.
    pub fn forward_channels<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 {
            return Err(Error::shape(
                "channel_norm",
                format!("expected [B, C, H, W], got {:?}", g.shape(x)),
            ));
        }
        let last = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(g, b, last)?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

/// Two-layer MLP with GELU: `d → ratio·d → d`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Ffn {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, dim * ratio, true, rng)?,
            fc2: Linear::new(params, &format!("{name}.fc2"), dim * ratio, dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.with_category(FlopCategory::Ffn, |g| {
            let h = self.fc1.forward(g, b, x)?;
            let h = g.gelu(h)?;
            self.fc2.forward(g, b, h)
        })
    }
}

/// Conditional positional encoding: `x + dwconv3x3(x)`.
#[derive(Clone, Debug)]
pub struct Cpe {
    pub kernels: ParamId,
}

impl Cpe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Cpe {
            kernels: params.add(
                format!("{name}.kernels"),
                fan_in_uniform(&[channels, 3, 3], 9, rng),
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let conv = g.dwconv2d_3x3(x, b[self.kernels])?;
        g.add(x, conv)
    }
}

/// Normalization applied after a [`ConvNorm`] convolution.
#[derive(Clone, Debug)]
pub enum ConvNormKind {
    /// Layer norm over channels at every pixel.
    Channel(LayerNorm),
    /// Zero mean, unit variance over each sample's whole feature map.
    Sample { eps: f64 },
}

/// 3×3 convolution, normalization, optional GELU.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub weight: ParamId,
    pub norm: ConvNormKind,
    pub stride: usize,
    pub activate: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        activate: bool,
        per_sample: bool,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.conv.weight"),
            fan_in_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
        )?;
        let norm = if per_sample {
            ConvNormKind::Sample { eps }
        } else {
            ConvNormKind::Channel(LayerNorm::new(params, &format!("{name}.norm"), out_ch, eps)?)
        };
        Ok(ConvNorm {
            weight,
            norm,
            stride,
            activate,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b[self.weight], self.stride)?;
        let y = match &self.norm {
            ConvNormKind::Channel(norm) => norm.forward_channels(g, b, y)?,
            ConvNormKind::Sample { eps } => {
                let shape = g.shape(y).to_vec();
                let n = shape[1..].iter().product::<usize>();
                let flat = g.reshape(y, &[shape[0], n])?;
                let ones = g.constant(Tensor::ones(&[n]));
                let zeros = g.constant(Tensor::zeros(&[n]));
                let flat = g.layer_norm(flat, ones, zeros, *eps)?;
                g.reshape(flat, &shape)?
            }
        };
        if self.activate {
            g.gelu(y)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn ffn_with_zero_weights_is_zero() {
        let mut p = ParamSet::<f64>::new();
        let ffn = Ffn::new(&mut p, "ffn", 4, 3, &mut seeded(1)).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::rand_normal(&[5, 4], 1.0, &mut seeded(2)));
        let y = ffn.forward(&mut g, &b, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_bias_path() {
        // zero weights in fc1, so gelu(0) = 0 and the output is fc2's bias
        let mut p = ParamSet::<f64>::new();
        let ffn = Ffn::new(&mut p, "ffn", 2, 3, &mut seeded(1)).unwrap();
        p.get_mut(ffn.fc1.weight).data_mut().fill(0.0);
        p.get_mut(ffn.fc2.bias.unwrap())
            .data_mut()
            .copy_from_slice(&[0.5, -1.5]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::rand_normal(&[3, 2], 1.0, &mut seeded(2)));
        let y = ffn.forward(&mut g, &b, x).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn ffn_hidden_width_uses_ratio() {
        let mut p = ParamSet::<f32>::new();
        let ffn = Ffn::new(&mut p, "ffn", 8, 3, &mut seeded(1)).unwrap();
        assert_eq!(p.get(ffn.fc1.weight).shape(), &[24, 8]);
        assert_eq!(p.get(ffn.fc2.weight).shape(), &[8, 24]);
    }

    #[test]
    fn cpe_examples() {
        let mut p = ParamSet::<f64>::new();
        let cpe = Cpe::new(&mut p, "cpe", 2, &mut seeded(3)).unwrap();
        let x = Tensor::rand_normal(&[2, 4, 4], 1.0, &mut seeded(4));

        p.get_mut(cpe.kernels).data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = cpe.forward(&mut g, &b, xv).unwrap();
        assert_eq!(g.value(y), &x);

        for c in 0..2 {
            p.get_mut(cpe.kernels).data_mut()[c * 9 + 4] = 1.0;
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = cpe.forward(&mut g, &b, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);
    }
}
