//! Node–neighbor aggregation functions.
//!
//! Every aggregator maps node features `x: [N, C]` and an [`Adjacency`] to new
//! features `[N, C]`. Edge `e` of node `i` carries the neighbor feature
//! `y = x[neighbors[e]]`. Nodes without neighbors see a zero aggregate.
//!
//! Cross-attention takes its query from the node and its keys and values from
//! the neighbors:
//!
//! ```text
//! q = Wq·x_i   k_j = Wk·y_j   v_j = Wv·y_j
//! s_j = cos(q, k_j)              (per head)
//! α_j = exp(−β (1 − s_j))        (β = exp(log_beta), shared by all heads)
//! o_i = GeLU(Wout·[x_i, Σ_j α_j v_j] + b)
//! ```

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::params::{init_tensor, ParamKind};
use crate::tensor::{Tape, Tensor, Var};

/// Floor on query/key norms in cosine scores.
pub const COSINE_EPS: f64 = 1e-12;
/// Negative slope of the LeakyReLU inside GAT scores.
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    CrossAttention,
    MaxRelative,
    Gat,
    Gin,
    Sage,
    EdgeConv,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 6] = [
        AggregatorKind::CrossAttention,
        AggregatorKind::MaxRelative,
        AggregatorKind::Gat,
        AggregatorKind::Gin,
        AggregatorKind::Sage,
        AggregatorKind::EdgeConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::CrossAttention => "cross_attention",
            AggregatorKind::MaxRelative => "max_relative",
            AggregatorKind::Gat => "gat",
            AggregatorKind::Gin => "gin",
            AggregatorKind::Sage => "sage",
            AggregatorKind::EdgeConv => "edgeconv",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Learnable tensors as `(name, shape, kind)` for `channels` features.
    pub fn param_shapes(self, channels: usize) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        let c = channels;
        use ParamKind::*;
        match self {
            AggregatorKind::CrossAttention => vec![
                ("wq", vec![c, c], Weight),
                ("wk", vec![c, c], Weight),
                ("wv", vec![c, c], Weight),
                ("wout", vec![2 * c, c], Weight),
                ("bout", vec![c], Bias),
                ("log_beta", vec![], Temperature),
            ],
            AggregatorKind::MaxRelative | AggregatorKind::Sage | AggregatorKind::EdgeConv => {
                vec![("w", vec![2 * c, c], Weight), ("b", vec![c], Bias)]
            }
            AggregatorKind::Gat => vec![("w", vec![c, c], Weight), ("a", vec![2 * c, 1], Weight)],
            AggregatorKind::Gin => vec![
                ("w", vec![c, c], Weight),
                ("b", vec![c], Bias),
                ("eps", vec![], Scalar),
            ],
        }
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `exp(−β(1 − s))`, no normalization across neighbors.
    ExpAffinity,
    /// Softmax over neighbors of `−β(1 − s)`.
    Softmax,
    /// Exponential affinity divided by the neighbor count.
    ExpAffinityNormalized,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 3] = [
        Nonlinearity::ExpAffinity,
        Nonlinearity::Softmax,
        Nonlinearity::ExpAffinityNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::ExpAffinity => "exp_affinity",
            Nonlinearity::Softmax => "softmax",
            Nonlinearity::ExpAffinityNormalized => "exp_affinity_normalized",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Owned parameters of one aggregation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub kind: AggregatorKind,
    pub channels: usize,
    pub heads: usize,
    pub nonlinearity: Nonlinearity,
    pub tensors: IndexMap<String, Tensor>,
}

impl AggregatorParams {
    pub fn init<R: Rng + ?Sized>(
        kind: AggregatorKind,
        channels: usize,
        heads: usize,
        nonlinearity: Nonlinearity,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(kind, channels, heads)?;
        let tensors = kind
            .param_shapes(channels)
            .into_iter()
            .map(|(name, shape, pk)| (name.to_string(), init_tensor(&shape, pk, rng)))
            .collect();
        Ok(AggregatorParams {
            kind,
            channels,
            heads,
            nonlinearity,
            tensors,
        })
    }

    /// Random parameters at unit scale, for tests that need non-trivial mixing.
    pub fn random<R: Rng + ?Sized>(
        kind: AggregatorKind,
        channels: usize,
        heads: usize,
        nonlinearity: Nonlinearity,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::init(kind, channels, heads, nonlinearity, rng)?;
        let fan = (channels as f64).sqrt();
        for (name, t) in p.tensors.iter_mut() {
            *t = match name.as_str() {
                "log_beta" => Tensor::scalar(rng.random_range(-0.5..1.5)),
                "eps" => Tensor::scalar(rng.random_range(-0.3..0.3)),
                _ => Tensor::randn(t.shape(), 1.0 / fan, rng),
            };
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("unknown aggregator tensor")
    }

    /// `β = exp(log_beta)` for cross-attention layers.
    pub fn beta(&self) -> Option<f64> {
        self.tensors.get("log_beta").map(|t| t.item().exp())
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> AggregatorVars<'t> {
        AggregatorVars {
            kind: self.kind,
            heads: self.heads,
            nonlinearity: self.nonlinearity,
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t.clone())))
                .collect(),
        }
    }
}

fn check_heads(kind: AggregatorKind, channels: usize, heads: usize) -> Result<()> {
    if kind == AggregatorKind::CrossAttention && (heads == 0 || channels % heads != 0) {
        return Err(Error::config(format!(
            "{channels} channels are not divisible into {heads} attention heads"
        )));
    }
    Ok(())
}

/// Aggregator parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct AggregatorVars<'t> {
    pub kind: AggregatorKind,
    pub heads: usize,
    pub nonlinearity: Nonlinearity,
    pub vars: IndexMap<String, Var<'t>>,
}

impl<'t> AggregatorVars<'t> {
    fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("{} aggregator is missing `{name}`", self.kind)))
    }
}

/// Per-edge, per-head scores and weights of one cross-attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    /// `[E, heads]` cosine scores.
    pub scores: Vec<f64>,
    /// `[E, heads]` attention weights.
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// `[degree, heads]` scores of `node`, row-major.
    pub fn node_scores(&self, node: usize) -> &[f64] {
        &self.scores[self.offsets[node] * self.heads..self.offsets[node + 1] * self.heads]
    }

    pub fn node_weights(&self, node: usize) -> &[f64] {
        &self.weights[self.offsets[node] * self.heads..self.offsets[node + 1] * self.heads]
    }

    /// Sum of weights over the neighbors of `node` for each head.
    pub fn weight_sums(&self, node: usize) -> Vec<f64> {
        let mut sums = vec![0.0; self.heads];
        for row in self.node_weights(node).chunks(self.heads) {
            for (s, w) in sums.iter_mut().zip(row) {
                *s += w;
            }
        }
        sums
    }
}

/// Per-head cosine similarity between each edge's query and key rows.
pub fn cosine_scores<'t>(queries: Var<'t>, keys: Var<'t>, heads: usize) -> Result<Var<'t>> {
    queries.head_cosine(keys, heads, COSINE_EPS)
}

/// Turns `[E, heads]` scores into attention weights.
pub fn attention_weights<'t>(
    scores: Var<'t>,
    log_beta: Var<'t>,
    nonlinearity: Nonlinearity,
    adj: &Adjacency,
) -> Result<Var<'t>> {
    let beta = log_beta.exp();
    // β(s − 1) = −β(1 − s)
    let logits = scores.add_scalar(-1.0).mul_scalar(beta)?;
    match nonlinearity {
        Nonlinearity::ExpAffinity => Ok(logits.exp()),
        Nonlinearity::Softmax => logits.segment_softmax(adj.offsets()),
        Nonlinearity::ExpAffinityNormalized => logits.exp().scale_rows(adj.inverse_degree_per_edge()),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AggregateOptions {
    /// Replaces every attention weight with this constant.
    pub alpha_override: Option<f64>,
}

fn check_nodes(x: &Var<'_>, adj: &Adjacency) -> Result<usize> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != adj.node_count() {
        return Err(Error::Dimension {
            op: "aggregate",
            lhs: shape,
            rhs: vec![adj.node_count()],
        });
    }
    Ok(shape[1])
}

pub fn cross_attention_aggregate<'t>(
    x: Var<'t>,
    adj: &Adjacency,
    p: &AggregatorVars<'t>,
    opts: AggregateOptions,
) -> Result<(Var<'t>, AttentionTrace)> {
    let c = check_nodes(&x, adj)?;
    check_heads(AggregatorKind::CrossAttention, c, p.heads)?;
    let tape = x.tape();
    let q = x.matmul(p.var("wq")?)?;
    let k = x.matmul(p.var("wk")?)?;
    let v = x.matmul(p.var("wv")?)?;
    let q_e = q.gather_rows(adj.centers())?;
    let k_e = k.gather_rows(adj.neighbors())?;
    let v_e = v.gather_rows(adj.neighbors())?;
    let scores = cosine_scores(q_e, k_e, p.heads)?;
    let alpha = match opts.alpha_override {
        Some(a) => tape.constant(Tensor::full(&[adj.edge_count(), p.heads], a)),
        None => attention_weights(scores, p.var("log_beta")?, p.nonlinearity, adj)?,
    };
    let agg = v_e.head_scale(alpha)?.segment_sum(adj.offsets())?;
    let out = x
        .concat_cols(agg)?
        .linear(p.var("wout")?, Some(p.var("bout")?))?
        .gelu();
    let trace = AttentionTrace {
        heads: p.heads,
        offsets: adj.offsets().to_vec(),
        neighbors: adj.neighbors().to_vec(),
        scores: scores.value().data().to_vec(),
        weights: alpha.value().data().to_vec(),
    };
    Ok((out, trace))
}

/// `W·[x_i, max_j (y_j − x_i)] + b`.
pub fn max_relative_aggregate<'t>(x: Var<'t>, adj: &Adjacency, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_nodes(&x, adj)?;
    let rel = x.gather_rows(adj.neighbors())?.sub(x.gather_rows(adj.centers())?)?;
    let max = rel.segment_max(adj.offsets())?;
    x.concat_cols(max)?.linear(w, Some(b))
}

/// GAT with a shared projection `W` and attention vector `a = [a_src; a_dst]`:
/// `GeLU(Σ_j softmax_j(LeakyReLU(a·[W x_i, W y_j])) W y_j)`.
pub fn gat_aggregate<'t>(x: Var<'t>, adj: &Adjacency, w: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let c = check_nodes(&x, adj)?;
    let h = x.matmul(w)?;
    let a_src = a.slice_rows(0, c)?;
    let a_dst = a.slice_rows(c, 2 * c)?;
    let e_src = h.matmul(a_src)?.gather_rows(adj.centers())?;
    let e_dst = h.matmul(a_dst)?.gather_rows(adj.neighbors())?;
    let alpha = e_src
        .add(e_dst)?
        .leaky_relu(GAT_NEGATIVE_SLOPE)
        .segment_softmax(adj.offsets())?;
    Ok(h.gather_rows(adj.neighbors())?
        .head_scale(alpha)?
        .segment_sum(adj.offsets())?
        .gelu())
}

/// `GeLU(W·((1 + eps)·x_i + Σ_j y_j) + b)`.
pub fn gin_aggregate<'t>(x: Var<'t>, adj: &Adjacency, w: Var<'t>, b: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    check_nodes(&x, adj)?;
    let sum = x.gather_rows(adj.neighbors())?.segment_sum(adj.offsets())?;
    let own = x.mul_scalar(eps.add_scalar(1.0))?;
    Ok(own.add(sum)?.linear(w, Some(b))?.gelu())
}

/// `W·[x_i, mean_j y_j] + b`.
pub fn sage_aggregate<'t>(x: Var<'t>, adj: &Adjacency, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_nodes(&x, adj)?;
    let mean = x.gather_rows(adj.neighbors())?.segment_mean(adj.offsets())?;
    x.concat_cols(mean)?.linear(w, Some(b))
}

/// `max_j GeLU(W·[x_i, y_j − x_i] + b)`.
pub fn edgeconv_aggregate<'t>(x: Var<'t>, adj: &Adjacency, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_nodes(&x, adj)?;
    let own = x.gather_rows(adj.centers())?;
    let rel = x.gather_rows(adj.neighbors())?.sub(own)?;
    own.concat_cols(rel)?
        .linear(w, Some(b))?
        .gelu()
        .segment_max(adj.offsets())
}

/// Dispatches on the aggregator kind. Only cross-attention yields a trace.
pub fn aggregate<'t>(
    x: Var<'t>,
    adj: &Adjacency,
    p: &AggregatorVars<'t>,
    opts: AggregateOptions,
) -> Result<(Var<'t>, Option<AttentionTrace>)> {
    Ok(match p.kind {
        AggregatorKind::CrossAttention => {
            let (out, trace) = cross_attention_aggregate(x, adj, p, opts)?;
            (out, Some(trace))
        }
        AggregatorKind::MaxRelative => (max_relative_aggregate(x, adj, p.var("w")?, p.var("b")?)?, None),
        AggregatorKind::Gat => (gat_aggregate(x, adj, p.var("w")?, p.var("a")?)?, None),
        AggregatorKind::Gin => (gin_aggregate(x, adj, p.var("w")?, p.var("b")?, p.var("eps")?)?, None),
        AggregatorKind::Sage => (sage_aggregate(x, adj, p.var("w")?, p.var("b")?)?, None),
        AggregatorKind::EdgeConv => (edgeconv_aggregate(x, adj, p.var("w")?, p.var("b")?)?, None),
    })
}

/// Multiply-accumulates of one aggregation over `nodes` nodes and `edges` edges.
pub fn aggregation_macs(kind: AggregatorKind, channels: usize, nodes: usize, edges: usize) -> u64 {
    let (c, n, e) = (channels as u64, nodes as u64, edges as u64);
    match kind {
        // Q, K, V, output projection; cosine dot and weighted value sum per edge
        AggregatorKind::CrossAttention => 3 * n * c * c + 2 * n * c * c + 2 * e * c,
        AggregatorKind::MaxRelative | AggregatorKind::Sage => 2 * n * c * c,
        AggregatorKind::Gat => n * c * c + 2 * n * c + e * c,
        AggregatorKind::Gin => n * c * c,
        AggregatorKind::EdgeConv => 2 * e * c * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_svga;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_edge_adj() -> Adjacency {
        Adjacency::from_lists(&[vec![1], vec![]])
    }

    #[test]
    fn exact_alignment_gives_unit_weight_for_any_beta() {
        let adj = Adjacency::from_lists(&[vec![1, 2, 3], vec![], vec![], vec![]]);
        for lb in [-3.0, 0.0, 1.9, 3.4] {
            let tape = Tape::new();
            let s = tape.constant(Tensor::ones(&[3, 2]));
            let a = attention_weights(s, tape.constant(Tensor::scalar(lb)), Nonlinearity::ExpAffinity, &adj).unwrap();
            assert!(a.value().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn learned_beta_kernel_value() {
        let adj = single_edge_adj();
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[1, 1]));
        let lb = tape.constant(Tensor::scalar(6.79f64.ln()));
        let a = attention_weights(s, lb, Nonlinearity::ExpAffinity, &adj).unwrap();
        let v = a.value().item();
        assert!((v - (-6.79f64).exp()).abs() < 1e-15);
        // 1.1250e-3; a four-digit truncation reads 1.124e-3
        assert!((v - 1.124e-3).abs() < 1e-6);
    }

    #[test]
    fn equal_scores_softmax_halves_exp_affinity_does_not() {
        let adj = Adjacency::from_lists(&[vec![1, 2], vec![], vec![]]);
        let tape = Tape::new();
        let s = tape.constant(Tensor::full(&[2, 1], 0.3));
        let lb = tape.constant(Tensor::scalar(0.4));
        let soft = attention_weights(s, lb, Nonlinearity::Softmax, &adj).unwrap();
        assert_eq!(soft.value().data(), &[0.5, 0.5]);
        let exp = attention_weights(s, lb, Nonlinearity::ExpAffinity, &adj).unwrap();
        let e = exp.to_tensor();
        assert_eq!(e.data()[0], e.data()[1]);
        assert!((e.sum() - 1.0).abs() > 1e-3);
        let norm = attention_weights(s, lb, Nonlinearity::ExpAffinityNormalized, &adj).unwrap();
        assert!((norm.value().data()[0] - e.data()[0] / 2.0).abs() < 1e-16);
    }

    #[test]
    fn empty_neighbor_set_uses_zero_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = AggregatorParams::random(AggregatorKind::CrossAttention, 4, 2, Nonlinearity::ExpAffinity, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let adj = build_svga(1, 1).unwrap().adjacency();
        let tape = Tape::new();
        let (out, trace) = cross_attention_aggregate(tape.constant(x.clone()), &adj, &p.bind(&tape), Default::default()).unwrap();
        assert_eq!(trace.degree(0), 0);
        // GeLU(Wout·[x, 0] + b)
        let wout = p.get("wout");
        let expected: Vec<f64> = (0..4)
            .map(|o| {
                let z: f64 = (0..4).map(|i| x.data()[i] * wout.data()[i * 4 + o]).sum::<f64>() + p.get("bout").data()[o];
                crate::tensor::gelu_scalar(z)
            })
            .collect();
        for (a, b) in out.value().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_aligned_neighbor_contributes_its_value_projection() {
        // query of node 0 equals the key of node 1 when Wq = Wk and x0 = x1
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut p = AggregatorParams::random(AggregatorKind::CrossAttention, 4, 2, Nonlinearity::ExpAffinity, &mut rng).unwrap();
        let wq = p.get("wq").clone();
        *p.get_mut("wk") = wq;
        let row = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let x = Tensor::new(&[2, 4], [row.data(), row.data()].concat()).unwrap();
        let adj = single_edge_adj();
        let tape = Tape::new();
        let (_, trace) = cross_attention_aggregate(tape.constant(x), &adj, &p.bind(&tape), Default::default()).unwrap();
        for &w in trace.node_weights(0) {
            assert!((w - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn head_mismatch_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        assert!(matches!(
            AggregatorParams::init(AggregatorKind::CrossAttention, 6, 4, Nonlinearity::ExpAffinity, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for k in AggregatorKind::ALL {
            assert_eq!(AggregatorKind::from_name(k.name()), Some(k));
        }
        for n in Nonlinearity::ALL {
            assert_eq!(Nonlinearity::from_name(n.name()), Some(n));
        }
        assert_eq!(AggregatorKind::from_name("mean"), None);
    }

    #[test]
    fn log_beta_initializes_to_unit_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = AggregatorParams::init(AggregatorKind::CrossAttention, 8, 8, Nonlinearity::ExpAffinity, &mut rng).unwrap();
        assert_eq!(p.beta(), Some(1.0));
    }
}
