//! Library outputs against direct re-implementations written from scratch.

use secvit::baselines::{kmeans_cluster, kmeans_init, Distance, KMeansOptions};
use secvit::data::synth::synth_shapes;
use secvit::flops::FlopCategory;
use secvit::rng::seeded;
use secvit::{AttentionLayer, Graph, ParamSet, PlanStore, Tensor};

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(|r| r.to_vec()).collect()
}

fn project(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| r[i] * w.data()[o * din + i]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Multi-head softmax attention over all tokens, three nested loops.
fn dense_oracle(p: &ParamSet<f64>, heads: usize, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let get = |n: &str, part: &str| p.by_name(&format!("attn.{n}.{part}")).unwrap();
    let xr = rows(x);
    let q = project(&xr, get("wq", "weight"), get("wq", "bias"));
    let k = project(&xr, get("wk", "weight"), get("wk", "bias"));
    let v = project(&xr, get("wv", "weight"), get("wv", "bias"));
    let (l, d) = (xr.len(), xr[0].len());
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; l];
    for h in 0..heads {
        for i in 0..l {
            let mut s = vec![0.0; l];
            for j in 0..l {
                for e in h * hd..(h + 1) * hd {
                    s[j] += q[i][e] * k[j][e];
                }
                s[j] /= (hd as f64).sqrt();
            }
            let top = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - top).exp()).sum();
            for j in 0..l {
                let a = (s[j] - top).exp() / z;
                for e in h * hd..(h + 1) * hd {
                    out[i][e] += a * v[j][e];
                }
            }
        }
    }
    project(&out, get("wo", "weight"), get("wo", "bias"))
}

#[test]
fn full_attention_matches_loops() {
    for (seed, (l, d, heads)) in [(5, 4, 1), (9, 8, 2), (16, 12, 3), (1, 4, 4)].into_iter().enumerate() {
        let mut p = ParamSet::new();
        let a = AttentionLayer::new(&mut p, "attn", d, heads, &mut seeded(seed as u64)).unwrap();
        let x = Tensor::rand_normal(&[l, d], 1.0, &mut seeded(100 + seed as u64));
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = a.full_attention(&mut g, &b, xv).unwrap();
        let want = Tensor::from_rows(&dense_oracle(&p, heads, &x)).unwrap();
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn attention_core_flops_follow_the_closed_form() {
    // scores and values each cost L·(L/M)·d multiply-adds per cluster sum
    for (l, d, m) in [(64usize, 8usize, 1usize), (64, 8, 4), (60, 16, 3)] {
        let mut p = ParamSet::<f64>::new();
        let a = AttentionLayer::new(&mut p, "attn", d, 2, &mut seeded(1)).unwrap();
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let xv = g.constant(Tensor::rand_normal(&[l, d], 1.0, &mut seeded(2)));
        a.cluster_attention(&mut g, &b, xv, m, &mut PlanStore::new()).unwrap();
        let macs = (l * (l / m) * d) as u64;
        assert_eq!(g.flops().get(FlopCategory::AttnScores), 2 * macs);
        assert_eq!(g.flops().get(FlopCategory::AttnValues), 2 * macs);
    }
}

/// Plain Lloyd with cosine distance from the same initial centroids.
fn lloyd(x: &[Vec<f64>], init: &[usize], max_iter: usize) -> (Vec<usize>, usize) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    };
    let mut cents: Vec<Vec<f64>> = init.iter().map(|&i| x[i].clone()).collect();
    let mut prev: Vec<usize> = Vec::new();
    for it in 1..=max_iter {
        let assign: Vec<usize> = x
            .iter()
            .map(|p| {
                let mut best = 0;
                for c in 1..cents.len() {
                    if cos(p, &cents[c]) < cos(p, &cents[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect();
        if assign == prev {
            return (assign, it);
        }
        for (c, cent) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = x.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            assert!(!members.is_empty(), "oracle does not handle empty clusters");
            for (e, v) in cent.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[e]).sum::<f64>() / members.len() as f64;
            }
        }
        prev = assign;
    }
    (prev, max_iter)
}

#[test]
fn kmeans_matches_plain_lloyd_on_separated_blobs() {
    for seed in 0..10u64 {
        // four tight angular blobs
        let mut rng = seeded(seed);
        let noise = Tensor::<f64>::rand_normal(&[40, 4], 0.05, &mut rng);
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..4).map(|e| f64::from(u8::from(e == i % 4)) + noise.data()[i * 4 + e]).collect())
            .collect();
        let init = kmeans_init(40, 4, seed);
        let t = Tensor::<f64>::from_rows(&x).unwrap();
        let opts = KMeansOptions {
            distance: Distance::Cosine,
            ..KMeansOptions::new(4, seed)
        };
        let p = kmeans_cluster(&t, &opts).unwrap();
        let covers = {
            let mut blobs: Vec<usize> = init.iter().map(|i| i % 4).collect();
            blobs.sort();
            blobs == [0, 1, 2, 3]
        };
        if !covers {
            continue;
        }
        let (want, iters) = lloyd(&x, &init, 50);
        assert_eq!(p.assignment, want);
        assert_eq!(p.iterations, iters);
    }
}

#[test]
fn synthetic_shapes_are_balanced_and_seeded() {
    let a = synth_shapes(200, 3);
    let b = synth_shapes(200, 3);
    assert_eq!(a.images, b.images);
    assert_ne!(a.images, synth_shapes(200, 4).images);
    a.validate().unwrap();
    for c in 0..10 {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 20);
    }
}

fn eval(p: &ParamSet<f64>, f: impl FnOnce(&mut Graph<f64>, &secvit::Bound) -> secvit::Var) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let y = f(&mut g, &b);
    g.value(y).clone()
}

/// `W_O(W_V x + b_V) + b_O` per row.
fn value_then_output(p: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let get = |n: &str| p.by_name(&format!("attn.{n}")).unwrap();
    let v = project(&rows(x), get("wv.weight"), get("wv.bias"));
    Tensor::from_rows(&project(&v, get("wo.weight"), get("wo.bias"))).unwrap()
}

#[test]
fn singleton_clusters_and_groups_reduce_to_value_rows() {
    let mut p = ParamSet::new();
    let a = AttentionLayer::new(&mut p, "attn", 8, 2, &mut seeded(3)).unwrap();
    let x = Tensor::rand_normal(&[6, 8], 1.0, &mut seeded(4));
    let want = value_then_output(&p, &x);
    let y = eval(&p, |g, b| {
        let xv = g.constant(x.clone());
        a.cluster_attention(g, b, xv, 6, &mut PlanStore::new()).unwrap()
    });
    assert!(y.max_abs_diff(&want) < 1e-12);

    for mode in [secvit::sec::GroupMode::Interleaved, secvit::sec::GroupMode::Sequential] {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = a.connector(&mut g, &b, xv, 6, mode, &mut PlanStore::new()).unwrap();
        // group order follows the similarity ranking
        let order: Vec<usize> = out.groups[0].members.iter().map(|m| m[0]).collect();
        let want_sorted = secvit::ops::select_rows(&want, &order).unwrap();
        assert!(g.value(out.output).max_abs_diff(&want_sorted) < 1e-12);
    }
}

#[test]
fn one_token_and_uniform_rows() {
    let mut p = ParamSet::new();
    let a = AttentionLayer::new(&mut p, "attn", 4, 1, &mut seeded(5)).unwrap();
    let x = Tensor::rand_normal(&[1, 4], 1.0, &mut seeded(6));
    let y = eval(&p, |g, b| {
        let xv = g.constant(x.clone());
        a.full_attention(g, b, xv).unwrap()
    });
    assert!(y.max_abs_diff(&value_then_output(&p, &x)) < 1e-12);

    let row = Tensor::<f64>::rand_normal(&[4], 1.0, &mut seeded(7));
    let uniform = Tensor::new(&[5, 4], row.data().repeat(5)).unwrap();
    let y = eval(&p, |g, b| {
        let xv = g.constant(uniform.clone());
        a.full_attention(g, b, xv).unwrap()
    });
    for r in rows(&y) {
        assert_eq!(r, rows(&y)[0]);
    }
}

#[test]
fn identical_group_members_pool_to_their_value() {
    let mut p = ParamSet::new();
    let a = AttentionLayer::new(&mut p, "attn", 4, 2, &mut seeded(8)).unwrap();
    let row = Tensor::<f64>::rand_normal(&[4], 1.0, &mut seeded(9));
    let x = Tensor::new(&[6, 4], row.data().repeat(6)).unwrap();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = a
        .connector(&mut g, &b, xv, 2, secvit::sec::GroupMode::Interleaved, &mut PlanStore::new())
        .unwrap();
    let want = value_then_output(&p, &Tensor::new(&[2, 4], row.data().repeat(2)).unwrap());
    assert!(g.value(out.output).max_abs_diff(&want) < 1e-12);
}
