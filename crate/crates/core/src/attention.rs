//! Multi-head attention: dense, clustered, and the connector pooling variant.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flops::FlopCategory;
use crate::nn::Linear;
use crate::params::{Bound, ParamSet};
use crate::sec::{build_cluster_plan, group_plan_for, ClusterPlan, GroupMode, GroupPlan};
use crate::tensor::{Scalar, Tensor};

/// Records cluster plans during a forward pass and replays them afterwards.
///
/// A fresh store records. After [`PlanStore::rewind`] the same sequence of
/// requests is answered from the recording, which freezes the clustering
/// for finite differences or for perturbation experiments.
#[derive(Clone, Debug, Default)]
pub struct PlanStore {
    entries: Vec<(String, ClusterPlan)>,
    cursor: usize,
}

impl PlanStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.cursor = 0;
    }

    pub fn entries(&self) -> &[(String, ClusterPlan)] {
        &self.entries
    }

    /// All recorded plans under `tag`, in request order.
    pub fn find<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a ClusterPlan> + 'a {
        self.entries
            .iter()
            .filter(move |(t, _)| t == tag)
            .map(|(_, p)| p)
    }

    /// Replays the next recorded plan, or computes and records a new one.
    pub fn next(
        &mut self,
        tag: &str,
        tokens: usize,
        clusters: usize,
        make: impl FnOnce() -> Result<ClusterPlan>,
    ) -> Result<ClusterPlan> {
        if let Some((t, plan)) = self.entries.get(self.cursor) {
            if t != tag || plan.tokens() != tokens || plan.num_clusters != clusters {
                return Err(Error::PlanMismatch(format!(
                    "request {} wants `{tag}` over {tokens} tokens into {clusters} clusters, \
                     recorded `{t}` over {} tokens into {}",
                    self.cursor,
                    plan.tokens(),
                    plan.num_clusters
                )));
            }
            self.cursor += 1;
            return Ok(plan.clone());
        }
        let plan = make()?;
        self.entries.push((tag.to_string(), plan.clone()));
        self.cursor += 1;
        Ok(plan)
    }
}

/// Connector forward result.
#[derive(Clone, Debug)]
pub struct ConnectorOutput {
    /// `[G, d]` or `[B, G, d]`.
    pub output: Var,
    /// Attention weights `[B·G, h, 1, S]`.
    pub weights: Var,
    pub groups: Vec<GroupPlan>,
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

struct TokenView {
    batch: usize,
    len: usize,
    shape: Vec<usize>,
    flat: Var,
}

impl AttentionLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide model dim {dim}"
            )));
        }
        Ok(AttentionLayer {
            name: name.to_string(),
            dim,
            heads,
            wq: Linear::new(params, &format!("{name}.wq"), dim, dim, true, rng)?,
            wk: Linear::new(params, &format!("{name}.wk"), dim, dim, true, rng)?,
            wv: Linear::new(params, &format!("{name}.wv"), dim, dim, true, rng)?,
            wo: Linear::new(params, &format!("{name}.wo"), dim, dim, true, rng)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn view<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<TokenView> {
        let shape = g.shape(x).to_vec();
        let (batch, len) = match shape[..] {
            [l, d] if d == self.dim => (1, l),
            [b, l, d] if d == self.dim => (b, l),
            _ => {
                return Err(Error::shape(
                    "attention",
                    format!("expected [L, {0}] or [B, L, {0}], got {shape:?}", self.dim),
                ))
            }
        };
        if len == 0 {
            return Err(Error::shape("attention", "no tokens"));
        }
        let flat = g.reshape(x, &[batch * len, self.dim])?;
        Ok(TokenView {
            batch,
            len,
            shape,
            flat,
        })
    }

    fn qkv<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        g.with_category(FlopCategory::Projections, |g| {
            Ok((
                self.wq.forward(g, b, x)?,
                self.wk.forward(g, b, x)?,
                self.wv.forward(g, b, x)?,
            ))
        })
    }

    fn output<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, y: Var, shape: &[usize]) -> Result<Var> {
        let y = g.with_category(FlopCategory::Projections, |g| self.wo.forward(g, b, y))?;
        g.reshape(y, shape)
    }

    /// `[R·n, d]` rows to `[R, h, n, hd]`.
    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, n: usize) -> Result<Var> {
        let rows = g.shape(x)[0] / n;
        let x = g.reshape(x, &[rows, n, self.heads, self.head_dim()])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `[R, h, n, hd]` back to `[R·n, d]`.
    fn merge_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * s[2], self.dim])
    }

    /// Scaled dot-product attention over `[R, h, n, hd]` operands.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let q = g.scale(q, 1.0 / (self.head_dim() as f64).sqrt())?;
        let kt = g.transpose_last2(k)?;
        let scores = g.with_category(FlopCategory::AttnScores, |g| g.matmul(q, kt))?;
        let probs = match mask {
            Some(m) => g.softmax_masked(scores, m)?,
            None => g.softmax_lastdim(scores)?,
        };
        let out = g.with_category(FlopCategory::AttnValues, |g| g.matmul(probs, v))?;
        Ok((out, probs))
    }

    /// Dense attention over all `L` tokens. Accepts `[L, d]` or `[B, L, d]`.
    pub fn full_attention<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let tv = self.view(g, x)?;
        let (q, k, v) = self.qkv(g, b, tv.flat)?;
        let q = self.split_heads(g, q, tv.len)?;
        let k = self.split_heads(g, k, tv.len)?;
        let v = self.split_heads(g, v, tv.len)?;
        let (y, _) = self.attend(g, q, k, v, None)?;
        let y = self.merge_heads(g, y)?;
        self.output(g, b, y, &tv.shape)
    }

    /// Attention restricted to `clusters` equal-size semantic clusters.
    ///
    /// Each sample gets its own plan, built from its keys (all heads share
    /// it). When `L` is not a multiple of `clusters`, zero dummy rows pad the
    /// last cluster and are masked out as keys.
    pub fn cluster_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        clusters: usize,
        plans: &mut PlanStore,
    ) -> Result<Var> {
        let tv = self.view(g, x)?;
        let (bsz, l) = (tv.batch, tv.len);
        let (q, k, v) = self.qkv(g, b, tv.flat)?;

        let keys = g.value(k).clone();
        let mut sample_plans = Vec::with_capacity(bsz);
        for s in 0..bsz {
            let rows = Tensor::new(
                &[l, self.dim],
                keys.data()[s * l * self.dim..(s + 1) * l * self.dim].to_vec(),
            )?;
            sample_plans.push(plans.next(&self.name, l, clusters, || {
                build_cluster_plan(&rows, clusters)
            })?);
        }
        let padded = sample_plans[0].padded;
        let n = sample_plans[0].cluster_size;
        let lp = l + padded;

        // dummies point at one shared zero row appended after all real rows
        let zero_row = bsz * l;
        let mut gather = Vec::with_capacity(bsz * lp);
        for (s, plan) in sample_plans.iter().enumerate() {
            gather.extend(
                plan.idx
                    .iter()
                    .map(|&t| if t < l { s * l + t } else { zero_row }),
            );
        }
        let gather = Arc::new(gather);
        let mut sorted = Vec::with_capacity(3);
        for t in [q, k, v] {
            let t = if padded > 0 { g.pad_rows(t, 1)? } else { t };
            let t = g.select_rows(t, gather.clone())?;
            sorted.push(self.split_heads(g, t, n)?);
        }

        let mask = (padded > 0).then(|| {
            let mut m = Vec::with_capacity(bsz * clusters * self.heads * n * n);
            for plan in &sample_plans {
                for c in 0..clusters {
                    let real: Vec<bool> = plan.members(c).iter().map(|&t| t < l).collect();
                    for _ in 0..self.heads * n {
                        m.extend_from_slice(&real);
                    }
                }
            }
            m
        });
        let (y, _) = self.attend(g, sorted[0], sorted[1], sorted[2], mask.as_deref())?;
        let y = self.merge_heads(g, y)?;

        let mut restore = Vec::with_capacity(bsz * l);
        for (s, plan) in sample_plans.iter().enumerate() {
            restore.extend(plan.inv_idx[..l].iter().map(|&r| s * lp + r));
        }
        let y = g.select_rows(y, Arc::new(restore))?;
        self.output(g, b, y, &tv.shape)
    }

    /// Compresses `L` tokens to `groups` tokens.
    ///
    /// Tokens are ranked by key similarity to the mean key, split into
    /// groups by `mode`, and each group is summarized by one query (the mean
    /// of its members' queries) attending over the members.
    pub fn connector<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        groups: usize,
        mode: GroupMode,
        plans: &mut PlanStore,
    ) -> Result<ConnectorOutput> {
        let tv = self.view(g, x)?;
        let (bsz, l) = (tv.batch, tv.len);
        if groups == 0 || groups > l || l % groups != 0 {
            return Err(Error::invalid(format!(
                "{groups} connector groups must divide {l} tokens"
            )));
        }
        let size = l / groups;
        let (q, k, v) = self.qkv(g, b, tv.flat)?;

        let keys = g.value(k).clone();
        let tag = format!("{}.rank", self.name);
        let mut group_plans = Vec::with_capacity(bsz);
        let mut order = Vec::with_capacity(bsz * l);
        for s in 0..bsz {
            let rows = Tensor::new(
                &[l, self.dim],
                keys.data()[s * l * self.dim..(s + 1) * l * self.dim].to_vec(),
            )?;
            let plan = plans.next(&tag, l, 1, || build_cluster_plan(&rows, 1))?;
            let gp = group_plan_for(&plan.idx, groups, mode)?;
            for members in &gp.members {
                order.extend(members.iter().map(|&t| s * l + t));
            }
            group_plans.push(gp);
        }
        let order = Arc::new(order);

        let qg = g.select_rows(q, order.clone())?;
        let qg = g.reshape(qg, &[bsz * groups, size, self.dim])?;
        let qg = g.mean_axis(qg, 1)?;
        let qg = self.split_heads(g, qg, 1)?;
        let kg = g.select_rows(k, order.clone())?;
        let kg = self.split_heads(g, kg, size)?;
        let vg = g.select_rows(v, order)?;
        let vg = self.split_heads(g, vg, size)?;

        let (y, weights) = self.attend(g, qg, kg, vg, None)?;
        let y = self.merge_heads(g, y)?;
        let out_shape = if tv.shape.len() == 2 {
            vec![groups, self.dim]
        } else {
            vec![bsz, groups, self.dim]
        };
        let output = self.output(g, b, y, &out_shape)?;
        Ok(ConnectorOutput {
            output,
            weights,
            groups: group_plans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn layer(dim: usize, heads: usize, seed: u64) -> (ParamSet<f64>, AttentionLayer) {
        let mut p = ParamSet::new();
        let a = AttentionLayer::new(&mut p, "attn", dim, heads, &mut seeded(seed)).unwrap();
        (p, a)
    }

    #[test]
    fn one_cluster_matches_dense() {
        let (p, a) = layer(8, 2, 1);
        let x = Tensor::rand_normal(&[2, 12, 8], 1.0, &mut seeded(2));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x);
        let full = a.full_attention(&mut g, &b, xv).unwrap();
        let sec = a
            .cluster_attention(&mut g, &b, xv, 1, &mut PlanStore::new())
            .unwrap();
        assert!(g.value(full).max_abs_diff(g.value(sec)) < 1e-12);
    }

    #[test]
    fn store_replays_and_detects_mismatch() {
        let (p, a) = layer(4, 1, 3);
        let x = Tensor::rand_normal(&[8, 4], 1.0, &mut seeded(4));
        let mut store = PlanStore::new();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x.clone());
        a.cluster_attention(&mut g, &b, xv, 2, &mut store).unwrap();
        assert_eq!(store.entries().len(), 1);
        store.rewind();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x);
        assert!(matches!(
            a.cluster_attention(&mut g, &b, xv, 4, &mut store),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn padded_output_has_input_shape() {
        let (p, a) = layer(6, 3, 5);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(Tensor::rand_normal(&[10, 6], 1.0, &mut seeded(6)));
        let mut store = PlanStore::new();
        let y = a.cluster_attention(&mut g, &b, xv, 4, &mut store).unwrap();
        assert_eq!(g.shape(y), &[10, 6]);
        assert_eq!(store.entries()[0].1.padded, 2);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn connector_shapes() {
        let (p, a) = layer(8, 2, 7);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(Tensor::rand_normal(&[24, 8], 1.0, &mut seeded(8)));
        let out = a
            .connector(&mut g, &b, xv, 6, GroupMode::Interleaved, &mut PlanStore::new())
            .unwrap();
        assert_eq!(g.shape(out.output), &[6, 8]);
        assert_eq!(g.shape(out.weights), &[6, 2, 1, 4]);
        assert!(a
            .connector(&mut g, &b, xv, 5, GroupMode::Interleaved, &mut PlanStore::new())
            .is_err());
    }
}
