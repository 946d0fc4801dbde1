//! Loop oracles and fixtures shared by the integration test targets.
#![allow(dead_code)]

use attention_vig::aggregate::{aggregate, AttentionTrace, AggregateOptions, AggregatorKind, AggregatorParams, Nonlinearity, COSINE_EPS, GAT_NEGATIVE_SLOPE};
use attention_vig::tensor::gelu_scalar;
use attention_vig::{Adjacency, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `row · W + b` with `W: [in, out]`.
pub fn affine(row: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(row.len(), din);
    (0..dout)
        .map(|o| {
            let z: f64 = (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum();
            z + b.map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    [a, b].concat()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

pub fn oracle(p: &AggregatorParams, x: &Tensor, lists: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let c = x.shape()[1];
    let zero = vec![0.0; c];
    let t = |n: &str| p.get(n);
    (0..lists.len())
        .map(|i| {
            let xi = x.row(i);
            let nb = &lists[i];
            let ys: Vec<&[f64]> = nb.iter().map(|&j| x.row(j)).collect();
            match p.kind {
                AggregatorKind::CrossAttention => {
                    let beta = p.beta().unwrap();
                    let dh = c / p.heads;
                    let q = affine(xi, t("wq"), None);
                    let mut agg = vec![0.0; c];
                    let mut raw = Vec::new();
                    for y in &ys {
                        let k = affine(y, t("wk"), None);
                        let v = affine(y, t("wv"), None);
                        let ws: Vec<f64> = (0..p.heads)
                            .map(|h| {
                                let s = cosine(&q[h * dh..(h + 1) * dh], &k[h * dh..(h + 1) * dh]);
                                -beta * (1.0 - s)
                            })
                            .collect();
                        raw.push((ws, v));
                    }
                    for h in 0..p.heads {
                        let denom = match p.nonlinearity {
                            Nonlinearity::ExpAffinity => 1.0,
                            Nonlinearity::ExpAffinityNormalized => ys.len() as f64,
                            Nonlinearity::Softmax => raw.iter().map(|(w, _)| w[h].exp()).sum(),
                        };
                        for (w, v) in &raw {
                            let a = w[h].exp() / denom;
                            for d in h * dh..(h + 1) * dh {
                                agg[d] += a * v[d];
                            }
                        }
                    }
                    affine(&cat(xi, &agg), t("wout"), Some(t("bout")))
                        .into_iter()
                        .map(gelu_scalar)
                        .collect()
                }
                AggregatorKind::MaxRelative => {
                    let mut m = if ys.is_empty() { zero.clone() } else { vec![f64::NEG_INFINITY; c] };
                    for y in &ys {
                        for d in 0..c {
                            m[d] = m[d].max(y[d] - xi[d]);
                        }
                    }
                    affine(&cat(xi, &m), t("w"), Some(t("b")))
                }
                AggregatorKind::Gat => {
                    let h = |r: &[f64]| affine(r, t("w"), None);
                    let a = t("a").data();
                    let hi = h(xi);
                    let es: Vec<f64> = ys
                        .iter()
                        .map(|y| {
                            let hj = h(y);
                            let z: f64 = (0..c).map(|d| a[d] * hi[d] + a[c + d] * hj[d]).sum();
                            if z > 0.0 { z } else { GAT_NEGATIVE_SLOPE * z }
                        })
                        .collect();
                    let mx = es.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = es.iter().map(|e| (e - mx).exp()).sum();
                    let mut out = zero.clone();
                    for (e, y) in es.iter().zip(&ys) {
                        let hj = h(y);
                        for d in 0..c {
                            out[d] += (e - mx).exp() / denom * hj[d];
                        }
                    }
                    out.into_iter().map(gelu_scalar).collect()
                }
                AggregatorKind::Gin => {
                    let eps = t("eps").item();
                    let mut s: Vec<f64> = xi.iter().map(|v| (1.0 + eps) * v).collect();
                    for y in &ys {
                        for d in 0..c {
                            s[d] += y[d];
                        }
                    }
                    affine(&s, t("w"), Some(t("b"))).into_iter().map(gelu_scalar).collect()
                }
                AggregatorKind::Sage => {
                    let mut m = zero.clone();
                    for y in &ys {
                        for d in 0..c {
                            m[d] += y[d] / ys.len() as f64;
                        }
                    }
                    affine(&cat(xi, &m), t("w"), Some(t("b")))
                }
                AggregatorKind::EdgeConv => {
                    let mut m = if ys.is_empty() { zero.clone() } else { vec![f64::NEG_INFINITY; c] };
                    for y in &ys {
                        let rel: Vec<f64> = (0..c).map(|d| y[d] - xi[d]).collect();
                        let f = affine(&cat(xi, &rel), t("w"), Some(t("b")));
                        for d in 0..c {
                            m[d] = m[d].max(gelu_scalar(f[d]));
                        }
                    }
                    m
                }
            }
        })
        .collect()
}

pub fn run(p: &AggregatorParams, x: &Tensor, lists: &[Vec<usize>]) -> Tensor {
    run_with(p, x, lists, AggregateOptions::default())
}

pub fn run_with(p: &AggregatorParams, x: &Tensor, lists: &[Vec<usize>], opts: AggregateOptions) -> Tensor {
    let tape = Tape::inference();
    let adj = Adjacency::from_lists(lists);
    let (out, _) = aggregate(tape.constant(x.clone()), &adj, &p.bind(&tape), opts).unwrap();
    out.to_tensor()
}

pub fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = b.concat();
    assert_eq!(a.numel(), flat.len());
    a.data().iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random graph on `n` nodes: each node gets 0..=max_deg distinct neighbors other than itself.
pub fn random_lists(n: usize, max_deg: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(rng);
            let d = rng.random_range(0..=max_deg.min(n - 1));
            let mut l = others[..d].to_vec();
            l.sort_unstable();
            l
        })
        .collect()
}

pub fn params(kind: AggregatorKind, c: usize, heads: usize, nl: Nonlinearity, seed: u64) -> AggregatorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AggregatorParams::random(kind, c, heads, nl, &mut rng).unwrap()
}


pub fn trace_for(p: &AggregatorParams, x: &Tensor, lists: &[Vec<usize>]) -> AttentionTrace {
    let tape = Tape::inference();
    let adj = Adjacency::from_lists(lists);
    let (_, trace) = aggregate(tape.constant(x.clone()), &adj, &p.bind(&tape), Default::default()).unwrap();
    trace.unwrap()
}

/// Relabels node `i` as `perm[i]`.
pub fn permute(x: &Tensor, lists: &[Vec<usize>], perm: &[usize]) -> (Tensor, Vec<Vec<usize>>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut px = Tensor::zeros(&[n, c]);
    let mut pl = vec![Vec::new(); n];
    for i in 0..n {
        px.data_mut()[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(x.row(i));
        let mut l: Vec<usize> = lists[i].iter().map(|&j| perm[j]).collect();
        l.sort_unstable();
        pl[perm[i]] = l;
    }
    (px, pl)
}
