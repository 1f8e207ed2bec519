//! Central finite-difference checks of the tape's gradients.
//!
//! Each case builds a small graph over `f64` inputs, reduces it to a scalar
//! `Σ out ⊙ R` with a fixed random `R`, and compares the tape gradient of
//! every input element against `(f(x + h) − f(x − h)) / 2h`. Cluster plans
//! recorded on the analytic pass are replayed for every perturbed pass.

use std::sync::Arc;

use crate::attention::{AttentionLayer, PlanStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BlockConfig, SecBlock};
use crate::nn::{Cpe, Ffn};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::sec::GroupMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    /// Token count for the attention cases.
    pub tokens: usize,
    /// Model width for the attention cases.
    pub dim: usize,
    pub heads: usize,
    /// Graph op whose backward is deliberately skewed.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-6,
            seed: 0,
            tokens: 8,
            dim: 8,
            heads: 2,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central differences of `f` with respect to every element of `inputs[which]`.
pub fn finite_difference(
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    which: usize,
    h: f64,
) -> Result<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for j in 0..inputs[which].numel() {
        let x0 = inputs[which].data()[j];
        work[which].data_mut()[j] = x0 + h;
        let fp = f(&work)?;
        work[which].data_mut()[j] = x0 - h;
        let fm = f(&work)?;
        work[which].data_mut()[j] = x0;
        grad.data_mut()[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var], &mut PlanStore) -> Result<Var> + 'a;

/// Compares tape and finite-difference gradients of `build` at `inputs`.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut plans = PlanStore::new();
    let mut g = Graph::new();
    if let Some(op) = &opts.corrupt {
        g.corrupt_backward(op.clone());
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars, &mut plans)?;
    let weights = Tensor::<f64>::rand_normal(g.shape(out), 1.0, &mut rng::substream(opts.seed, 77));
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        plans.rewind();
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars, &mut plans)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut worst = 0f64;
    let mut elements = 0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_difference(&mut eval, inputs, i, opts.h)?;
        for (&x, &y) in a.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(x, y));
        }
        elements += a.numel();
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        elements,
    })
}

/// A named check over freshly drawn inputs.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(&GradCheckOptions) -> Result<GradCheckReport>,
}

fn normal(shape: &[usize], seed: u64, stream: u64) -> Tensor<f64> {
    Tensor::rand_normal(shape, 1.0, &mut rng::substream(seed, stream))
}

fn unary(
    name: &str,
    shape: &[usize],
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    check_gradients(name, &[normal(shape, opts.seed, 1)], &|g, v, _| f(g, v[0]), opts)
}

fn binary(
    name: &str,
    a: &[usize],
    b: &[usize],
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let inputs = [normal(a, opts.seed, 1), normal(b, opts.seed, 2)];
    check_gradients(name, &inputs, &|g, v, _| f(g, v[0], v[1]), opts)
}

/// Runs `f` on a module whose parameters are appended after `x` in the inputs.
fn with_params(
    name: &str,
    x: Tensor<f64>,
    params: ParamSet<f64>,
    opts: &GradCheckOptions,
    f: &dyn Fn(&mut Graph<f64>, &Bound, Var, &mut PlanStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    // perturb the default init so norms and biases are not at special values
    for (k, t) in inputs.iter_mut().enumerate().skip(1) {
        let noise = normal(t.shape(), opts.seed, 100 + k as u64);
        *t = t.zip_map(&noise, |a, b| a + 0.1 * b)?;
    }
    check_gradients(
        name,
        &inputs,
        &|g, v, plans| {
            let b = Bound::from_vars(v[1..].to_vec());
            f(g, &b, v[0], plans)
        },
        opts,
    )
}

fn attention_layer(opts: &GradCheckOptions) -> Result<(ParamSet<f64>, AttentionLayer)> {
    let mut p = ParamSet::new();
    let layer = AttentionLayer::new(
        &mut p,
        "attn",
        opts.dim,
        opts.heads,
        &mut rng::substream(opts.seed, 3),
    )?;
    Ok((p, layer))
}

fn tokens(opts: &GradCheckOptions) -> Tensor<f64> {
    normal(&[opts.tokens, opts.dim], opts.seed, 1)
}

fn case_cluster_attention(opts: &GradCheckOptions, m: usize, name: &str) -> Result<GradCheckReport> {
    let (p, layer) = attention_layer(opts)?;
    with_params(name, tokens(opts), p, opts, &|g, b, x, plans| {
        layer.cluster_attention(g, b, x, m, plans)
    })
}

fn case_connector(opts: &GradCheckOptions, mode: GroupMode, name: &str) -> Result<GradCheckReport> {
    let (p, layer) = attention_layer(opts)?;
    let groups = if opts.tokens % 4 == 0 { opts.tokens / 4 } else { 1 };
    with_params(name, tokens(opts), p, opts, &|g, b, x, plans| {
        Ok(layer.connector(g, b, x, groups, mode, plans)?.output)
    })
}

/// Every differentiable graph op, then the composite layers.
pub fn standard_suite() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            run: |o| binary("add", &[3, 4], &[3, 4], o, |g, a, b| g.add(a, b)),
        },
        GradCase {
            name: "add_bias",
            run: |o| binary("add_bias", &[2, 3, 4], &[4], o, |g, a, b| g.add_bias(a, b)),
        },
        GradCase {
            name: "mul",
            run: |o| binary("mul", &[3, 4], &[3, 4], o, |g, a, b| g.mul(a, b)),
        },
        GradCase {
            name: "scale",
            run: |o| unary("scale", &[5], o, |g, x| g.scale(x, -1.7)),
        },
        GradCase {
            name: "sum",
            run: |o| unary("sum", &[2, 3], o, |g, x| g.sum(x)),
        },
        GradCase {
            name: "matmul",
            run: |o| binary("matmul", &[2, 3, 4], &[4, 5], o, |g, a, b| g.matmul(a, b)),
        },
        GradCase {
            name: "matmul_batched",
            run: |o| binary("matmul", &[2, 2, 3, 4], &[2, 2, 4, 3], o, |g, a, b| g.matmul(a, b)),
        },
        GradCase {
            name: "linear",
            run: |o| {
                let inputs = [
                    normal(&[3, 4], o.seed, 1),
                    normal(&[5, 4], o.seed, 2),
                    normal(&[5], o.seed, 3),
                ];
                check_gradients("linear", &inputs, &|g, v, _| g.linear(v[0], v[1], Some(v[2])), o)
            },
        },
        GradCase {
            name: "permute",
            run: |o| unary("permute", &[2, 3, 4], o, |g, x| g.permute(x, &[2, 0, 1])),
        },
        GradCase {
            name: "transpose_last2",
            run: |o| unary("transpose_last2", &[2, 3, 4], o, |g, x| g.transpose_last2(x)),
        },
        GradCase {
            name: "reshape",
            run: |o| unary("reshape", &[2, 6], o, |g, x| g.reshape(x, &[3, 4])),
        },
        GradCase {
            name: "softmax",
            run: |o| unary("softmax", &[3, 5], o, |g, x| g.softmax_lastdim(x)),
        },
        GradCase {
            name: "softmax_masked",
            run: |o| {
                let mask: Vec<bool> = (0..15).map(|i| i % 5 != 3).collect();
                unary("softmax", &[3, 5], o, move |g, x| g.softmax_masked(x, &mask))
            },
        },
        GradCase {
            name: "gelu",
            run: |o| unary("gelu", &[4, 5], o, |g, x| g.gelu(x)),
        },
        GradCase {
            name: "layer_norm",
            run: |o| {
                let inputs = [
                    normal(&[3, 6], o.seed, 1),
                    normal(&[6], o.seed, 2),
                    normal(&[6], o.seed, 3),
                ];
                check_gradients(
                    "layer_norm",
                    &inputs,
                    &|g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-6),
                    o,
                )
            },
        },
        GradCase {
            name: "mean_axis",
            run: |o| unary("mean_axis", &[2, 3, 4], o, |g, x| g.mean_axis(x, 1)),
        },
        GradCase {
            name: "mean_pool_tokens",
            run: |o| unary("mean_pool_tokens", &[5, 3], o, |g, x| g.mean_pool_tokens(x)),
        },
        GradCase {
            name: "select_rows",
            run: |o| {
                let idx = Arc::new(vec![3, 0, 0, 2, 3]);
                unary("select_rows", &[4, 3], o, move |g, x| g.select_rows(x, idx.clone()))
            },
        },
        GradCase {
            name: "gather_rows",
            run: |o| unary("select_rows", &[4, 3], o, |g, x| g.gather_rows(x, &[2, 0, 3, 1])),
        },
        GradCase {
            name: "pad_rows",
            run: |o| unary("pad_rows", &[3, 2], o, |g, x| g.pad_rows(x, 2)),
        },
        GradCase {
            name: "dwconv2d_3x3",
            run: |o| binary("dwconv2d_3x3", &[2, 2, 4, 5], &[2, 3, 3], o, |g, x, k| g.dwconv2d_3x3(x, k)),
        },
        GradCase {
            name: "conv2d",
            run: |o| binary("conv2d", &[1, 2, 5, 4], &[3, 2, 3, 3], o, |g, x, w| g.conv2d(x, w, 1)),
        },
        GradCase {
            name: "conv2d_stride2",
            run: |o| binary("conv2d", &[2, 2, 5, 6], &[3, 2, 3, 3], o, |g, x, w| g.conv2d(x, w, 2)),
        },
        GradCase {
            name: "cross_entropy",
            run: |o| unary("cross_entropy", &[4, 5], o, |g, x| g.cross_entropy(x, &[0, 4, 2, 2])),
        },
        GradCase {
            name: "ffn",
            run: |o| {
                let mut p = ParamSet::new();
                let ffn = Ffn::new(&mut p, "ffn", o.dim, 3, &mut rng::substream(o.seed, 3))?;
                with_params("ffn", tokens(o), p, o, &|g, b, x, _| ffn.forward(g, b, x))
            },
        },
        GradCase {
            name: "cpe",
            run: |o| {
                let mut p = ParamSet::new();
                let cpe = Cpe::new(&mut p, "cpe", 3, &mut rng::substream(o.seed, 3))?;
                let x = normal(&[3, 4, 4], o.seed, 1);
                with_params("cpe", x, p, o, &|g, b, x, _| cpe.forward(g, b, x))
            },
        },
        GradCase {
            name: "full_attention",
            run: |o| {
                let (p, layer) = attention_layer(o)?;
                with_params("full_attention", tokens(o), p, o, &|g, b, x, _| {
                    layer.full_attention(g, b, x)
                })
            },
        },
        GradCase {
            name: "cluster_attention",
            run: |o| case_cluster_attention(o, 2, "cluster_attention"),
        },
        GradCase {
            name: "cluster_attention_padded",
            run: |o| case_cluster_attention(o, 3, "cluster_attention_padded"),
        },
        GradCase {
            name: "secvit_block",
            run: |o| {
                let mut p = ParamSet::new();
                let cfg = BlockConfig {
                    model_dim: o.dim,
                    num_heads: o.heads,
                    num_clusters: 2,
                    ffn_ratio: 3,
                    norm_eps: 1e-6,
                };
                let block = SecBlock::new(&mut p, "block", cfg, &mut rng::substream(o.seed, 3))?;
                let x = normal(&[o.dim, 2, 4], o.seed, 1);
                with_params("secvit_block", x, p, o, &|g, b, x, plans| {
                    block.forward(g, b, x, plans)
                })
            },
        },
        GradCase {
            name: "connector_interleaved",
            run: |o| case_connector(o, GroupMode::Interleaved, "connector_interleaved"),
        },
        GradCase {
            name: "connector_sequential",
            run: |o| case_connector(o, GroupMode::Sequential, "connector_sequential"),
        },
    ]
}

/// Runs every case; the caller decides pass or fail from `tol`.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    if opts.dim % opts.heads.max(1) != 0 || opts.tokens < 3 {
        return Err(Error::invalid(
            "gradcheck needs heads dividing dim and at least 3 tokens",
        ));
    }
    standard_suite()
        .into_iter()
        .map(|c| {
            let mut r = (c.run)(opts)?;
            r.name = c.name.to_string();
            Ok(r)
        })
        .collect()
}
