//! Composite blocks: stem, inverted residual block, downsample, Grapher and
//! classifier head.
//!
//! A layer is a small descriptor holding names and shapes. `register` creates
//! its parameters in a [`ParamStore`]; `forward` looks them up through the
//! [`ForwardCtx`] binder, so the same descriptors drive training, inference and
//! gradient checks.

use std::cell::RefCell;

use rand::Rng;

use crate::aggregate::{aggregate, AggregateOptions, AggregatorKind, AggregatorVars, AttentionTrace, Nonlinearity};
use crate::error::{Error, Result};
use crate::graph::{build_knn_grid, Adjacency, GraphPolicy, PatchGraph};
use crate::params::{Binder, Buffers, ParamKind, ParamStore};
use crate::tensor::{BatchStats, Mode, Tape, Tensor, Var};

/// Expansion ratio of inverted residual blocks and Grapher FFNs.
pub const EXPANSION: usize = 4;

/// Per-forward state shared by all layers.
pub struct ForwardCtx<'t, 'p> {
    pub binder: Binder<'t, 'p>,
    pub buffers: &'p Buffers,
    pub mode: Mode,
    pub alpha_override: Option<f64>,
    pub keep_traces: bool,
    pub capture_inputs: bool,
    bn_stats: RefCell<Vec<(String, BatchStats)>>,
    traces: RefCell<Vec<(String, AttentionTrace)>>,
    captures: RefCell<Vec<(String, Tensor)>>,
}

/// What a forward pass leaves behind besides its output.
#[derive(Debug, Default)]
pub struct ForwardRecord {
    /// Batch statistics per batch norm, to be folded into running buffers.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Cross-attention traces per Grapher, when requested.
    pub traces: Vec<(String, AttentionTrace)>,
    /// Aggregation inputs `[N·H·W, C]` per Grapher, when requested.
    pub captures: Vec<(String, Tensor)>,
}

impl<'t, 'p> ForwardCtx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore, buffers: &'p Buffers, mode: Mode) -> Self {
        ForwardCtx {
            binder: Binder::new(tape, params, tape.is_recording()),
            buffers,
            mode,
            alpha_override: None,
            keep_traces: false,
            capture_inputs: false,
            bn_stats: RefCell::new(Vec::new()),
            traces: RefCell::new(Vec::new()),
            captures: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.binder.tape()
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.binder.var(name)
    }

    fn buffer(&self, name: &str) -> Result<&'p Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::input(format!("unknown buffer `{name}`")))
    }

    /// Splits into the bound parameter vars and the side record.
    pub fn finish(self) -> (indexmap::IndexMap<String, Var<'t>>, ForwardRecord) {
        let record = ForwardRecord {
            bn_stats: self.bn_stats.into_inner(),
            traces: self.traces.into_inner(),
            captures: self.captures.into_inner(),
        };
        (self.binder.into_bound(), record)
    }
}

fn expect_nchw(op: &'static str, x: &Var<'_>, channels: usize) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Dimension {
            op,
            lhs: s,
            rhs: vec![channels],
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

// ---------- primitives ----------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Linear {
            name: name.into(),
            c_in,
            c_out,
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.init(format!("{}.weight", self.name), &[self.c_in, self.c_out], ParamKind::Weight, rng)?;
        store.init(format!("{}.bias", self.name), &[self.c_out], ParamKind::Bias, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = ctx.var(&format!("{}.bias", self.name))?;
        x.linear(w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.c_in * self.c_out) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            groups: 1,
            bias: true,
        }
    }

    /// Drops the bias, for convolutions feeding a batch norm that would cancel it.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Conv {
            groups: channels,
            ..Conv::new(name, channels, channels, kernel, 1)
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.kernel, self.kernel]
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.init(format!("{}.weight", self.name), &self.weight_shape(), ParamKind::Weight, rng)?;
        if self.bias {
            store.init(format!("{}.bias", self.name), &[self.c_out], ParamKind::Bias, rng)?;
        }
        Ok(())
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.var(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.conv2d(w, b, self.stride, self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.c_out } else { 0 }
    }

    /// Multiply-accumulates over an input of `h × w` per image.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let ho = crate::tensor::conv_out_extent(h, self.kernel, self.stride);
        let wo = crate::tensor::conv_out_extent(w, self.kernel, self.stride);
        (batch * self.c_out * ho * wo * (self.c_in / self.groups) * self.kernel * self.kernel) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut Buffers, rng: &mut R) -> Result<()> {
        let c = self.channels;
        store.init(format!("{}.gamma", self.name), &[c], ParamKind::NormScale, rng)?;
        store.init(format!("{}.beta", self.name), &[c], ParamKind::NormShift, rng)?;
        buffers.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        buffers.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]));
        Ok(())
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = ctx.var(&format!("{}.gamma", self.name))?;
        let beta = ctx.var(&format!("{}.beta", self.name))?;
        let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
        let var = ctx.buffer(&format!("{}.running_var", self.name))?;
        let (y, stats) = x.batchnorm2d(gamma, beta, mean, var, ctx.mode)?;
        if let Some(stats) = stats {
            ctx.bn_stats.borrow_mut().push((self.name.clone(), stats));
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

// ---------- blocks ----------

/// Two stride-2 3×3 convolutions, each followed by batch norm and GeLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl Stem {
    pub fn new(name: &str, c_in: usize, c_out: usize) -> Self {
        let mid = c_out / 2;
        Stem {
            conv1: Conv::new(format!("{name}.conv1"), c_in, mid, 3, 2).without_bias(),
            bn1: BatchNorm::new(format!("{name}.bn1"), mid),
            conv2: Conv::new(format!("{name}.conv2"), mid, c_out, 3, 2).without_bias(),
            bn2: BatchNorm::new(format!("{name}.bn2"), c_out),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut Buffers, rng: &mut R) -> Result<()> {
        self.conv1.register(store, rng)?;
        self.bn1.register(store, buffers, rng)?;
        self.conv2.register(store, rng)?;
        self.bn2.register(store, buffers, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [_, _, h, w] = expect_nchw("stem", &x, self.conv1.c_in)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!("stem input {h}×{w} is not divisible by 4")));
        }
        let x = self.bn1.forward(ctx, self.conv1.forward(ctx, x)?)?.gelu();
        Ok(self.bn2.forward(ctx, self.conv2.forward(ctx, x)?)?.gelu())
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.bn1.param_count() + self.conv2.param_count() + self.bn2.param_count()
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.conv1.macs(batch, h, w) + self.conv2.macs(batch, h / 2, w / 2)
    }
}

/// Inverted residual block: 1×1 expand, depthwise 3×3, 1×1 project, with a
/// residual around the whole branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Irb {
    pub expand: Conv,
    pub bn1: BatchNorm,
    pub dw: Conv,
    pub bn2: BatchNorm,
    pub project: Conv,
    pub bn3: BatchNorm,
}

impl Irb {
    pub fn new(name: &str, channels: usize) -> Self {
        let hidden = channels * EXPANSION;
        Irb {
            expand: Conv::new(format!("{name}.expand"), channels, hidden, 1, 1).without_bias(),
            bn1: BatchNorm::new(format!("{name}.bn1"), hidden),
            dw: Conv::depthwise(format!("{name}.dw"), hidden, 3).without_bias(),
            bn2: BatchNorm::new(format!("{name}.bn2"), hidden),
            project: Conv::new(format!("{name}.project"), hidden, channels, 1, 1).without_bias(),
            bn3: BatchNorm::new(format!("{name}.bn3"), channels),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut Buffers, rng: &mut R) -> Result<()> {
        self.expand.register(store, rng)?;
        self.bn1.register(store, buffers, rng)?;
        self.dw.register(store, rng)?;
        self.bn2.register(store, buffers, rng)?;
        self.project.register(store, rng)?;
        self.bn3.register(store, buffers, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_nchw("irb", &x, self.expand.c_in)?;
        let h = self.bn1.forward(ctx, self.expand.forward(ctx, x)?)?.gelu();
        let h = self.bn2.forward(ctx, self.dw.forward(ctx, h)?)?.gelu();
        let h = self.bn3.forward(ctx, self.project.forward(ctx, h)?)?;
        x.add(h)
    }

    pub fn param_count(&self) -> usize {
        [&self.expand, &self.dw, &self.project].iter().map(|c| c.param_count()).sum::<usize>()
            + [&self.bn1, &self.bn2, &self.bn3].iter().map(|b| b.param_count()).sum::<usize>()
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.expand.macs(batch, h, w) + self.dw.macs(batch, h, w) + self.project.macs(batch, h, w)
    }
}

/// Stride-2 3×3 convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Downsample {
    pub fn new(name: &str, c_in: usize, c_out: usize) -> Self {
        Downsample {
            conv: Conv::new(format!("{name}.conv"), c_in, c_out, 3, 2).without_bias(),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, buffers: &mut Buffers, rng: &mut R) -> Result<()> {
        self.conv.register(store, rng)?;
        self.bn.register(store, buffers, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_nchw("downsample", &x, self.conv.c_in)?;
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.conv.macs(batch, h, w)
    }
}

/// Conditional positional encoding: `x + dwconv3×3(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpe {
    pub conv: Conv,
}

impl Cpe {
    pub fn new(name: &str, channels: usize) -> Self {
        Cpe {
            conv: Conv::depthwise(format!("{name}.conv"), channels, 3),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv.register(store, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_nchw("cpe", &x, self.conv.c_in)?;
        x.add(self.conv.forward(ctx, x)?)
    }
}

/// Node-wise MLP with a residual: `x + fc2(GeLU(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(name: &str, channels: usize) -> Self {
        Ffn {
            fc1: Linear::new(format!("{name}.fc1"), channels, channels * EXPANSION),
            fc2: Linear::new(format!("{name}.fc2"), channels * EXPANSION, channels),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        x.add(self.fc2.forward(ctx, h)?)
    }
}

/// Node–neighbor aggregation with parameters stored under `name`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub name: String,
    pub kind: AggregatorKind,
    pub channels: usize,
    pub heads: usize,
    pub nonlinearity: Nonlinearity,
}

impl Aggregation {
    pub fn param_name(&self, tensor: &str) -> String {
        format!("{}.{tensor}", self.name)
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.kind == AggregatorKind::CrossAttention && (self.heads == 0 || self.channels % self.heads != 0) {
            return Err(Error::config(format!(
                "{} channels are not divisible into {} attention heads",
                self.channels, self.heads
            )));
        }
        for (t, shape, kind) in self.kind.param_shapes(self.channels) {
            store.init(self.param_name(t), &shape, kind, rng)?;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, ctx: &ForwardCtx<'t, '_>) -> Result<AggregatorVars<'t>> {
        let mut vars = indexmap::IndexMap::new();
        for (t, _, _) in self.kind.param_shapes(self.channels) {
            vars.insert(t.to_string(), ctx.var(&self.param_name(t))?);
        }
        Ok(AggregatorVars {
            kind: self.kind,
            heads: self.heads,
            nonlinearity: self.nonlinearity,
            vars,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kind
            .param_shapes(self.channels)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// CPE, then aggregation over the patch graph, then FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct Grapher {
    pub name: String,
    pub cpe: Cpe,
    pub agg: Aggregation,
    pub ffn: Ffn,
}

impl Grapher {
    pub fn new(name: &str, channels: usize, kind: AggregatorKind, heads: usize, nonlinearity: Nonlinearity) -> Self {
        Grapher {
            name: name.to_string(),
            cpe: Cpe::new(&format!("{name}.cpe"), channels),
            agg: Aggregation {
                name: format!("{name}.agg"),
                kind,
                channels,
                heads,
                nonlinearity,
            },
            ffn: Ffn::new(&format!("{name}.ffn"), channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.agg.channels
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.cpe.register(store, rng)?;
        self.agg.register(store, rng)?;
        self.ffn.register(store, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>, graph: &StageGraph) -> Result<Var<'t>> {
        let [n, c, h, w] = expect_nchw("grapher", &x, self.channels())?;
        if (h, w) != (graph.height, graph.width) {
            return Err(Error::config(format!(
                "{} expects a {}×{} grid but got {h}×{w}",
                self.name, graph.height, graph.width
            )));
        }
        let tape = ctx.tape();
        tape.mark(format!("{}.cpe", self.name));
        let y = self.cpe.forward(ctx, x)?;
        let rows = y.nchw_to_rows()?;
        tape.mark(format!("{}.agg", self.name));
        let adj = match &graph.fixed {
            Some(g) => g.adjacency_batched(n),
            None => {
                let GraphPolicy::Knn { k } = graph.policy else {
                    unreachable!("only kNN graphs are built per image")
                };
                knn_batched(&rows.value(), n, h, w, k, tape)?
            }
        };
        if ctx.capture_inputs {
            ctx.captures.borrow_mut().push((self.name.clone(), rows.to_tensor()));
        }
        let opts = AggregateOptions {
            alpha_override: ctx.alpha_override,
        };
        let (o, trace) = aggregate(rows, &adj, &self.agg.bind(ctx)?, opts)?;
        if let (true, Some(trace)) = (ctx.keep_traces, trace) {
            ctx.traces.borrow_mut().push((self.name.clone(), trace));
        }
        tape.mark(format!("{}.ffn", self.name));
        let out = self.ffn.forward(ctx, o)?;
        out.rows_to_nchw(n, c, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.cpe.conv.param_count() + self.agg.param_count() + self.ffn.fc1.param_count() + self.ffn.fc2.param_count()
    }

    pub fn macs(&self, batch: usize, graph: &StageGraph) -> u64 {
        let (h, w) = (graph.height, graph.width);
        let nodes = batch * h * w;
        let c = self.channels();
        let edges = batch * graph.edges_per_image();
        let knn = if graph.fixed.is_none() {
            (batch * (h * w) * (h * w) * c) as u64
        } else {
            0
        };
        self.cpe.conv.macs(batch, h, w)
            + knn
            + crate::aggregate::aggregation_macs(self.agg.kind, c, nodes, edges)
            + self.ffn.fc1.macs(nodes)
            + self.ffn.fc2.macs(nodes)
    }
}

/// The patch graph a Grapher runs on: fixed connectivity, or kNN rebuilt per
/// image from the features entering the aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGraph {
    pub height: usize,
    pub width: usize,
    pub policy: GraphPolicy,
    fixed: Option<PatchGraph>,
}

impl StageGraph {
    pub fn new(policy: GraphPolicy, height: usize, width: usize) -> Result<Self> {
        let fixed = match policy {
            GraphPolicy::Svga => Some(crate::graph::build_svga(height, width)?),
            GraphPolicy::Knn { k } => {
                if k == 0 || k >= height * width {
                    return Err(Error::config(format!(
                        "k = {k} needs 1 ≤ k < {} nodes on a {height}×{width} grid",
                        height * width
                    )));
                }
                None
            }
        };
        Ok(StageGraph {
            height,
            width,
            policy,
            fixed,
        })
    }

    /// Uses `graph` for every image.
    pub fn fixed(graph: PatchGraph) -> Self {
        StageGraph {
            height: graph.height(),
            width: graph.width(),
            policy: graph.policy(),
            fixed: Some(graph),
        }
    }

    pub fn graph(&self) -> Option<&PatchGraph> {
        self.fixed.as_ref()
    }

    pub fn edges_per_image(&self) -> usize {
        match (&self.fixed, self.policy) {
            (Some(g), _) => g.edge_count(),
            (None, GraphPolicy::Knn { k }) => k * self.height * self.width,
            (None, GraphPolicy::Svga) => unreachable!("SVGA graphs are always fixed"),
        }
    }
}

/// Builds one kNN graph per image and stacks them block-diagonally.
fn knn_batched(rows: &Tensor, n: usize, h: usize, w: usize, k: usize, tape: &Tape) -> Result<Adjacency> {
    let (hw, c) = (h * w, rows.shape()[1]);
    let mut lists = Vec::with_capacity(n * hw);
    for b in 0..n {
        let feats = Tensor::new(&[hw, c], rows.data()[b * hw * c..(b + 1) * hw * c].to_vec())?;
        let g = build_knn_grid(&feats, h, w, k)?;
        lists.extend(g.neighbor_lists().iter().map(|l| l.iter().map(|j| j + b * hw).collect()));
        tape.add_macs((hw * hw * c) as u64);
    }
    Ok(Adjacency::from_lists(&lists))
}

/// Global average pool, then a two-layer MLP to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Head {
    pub fn new(name: &str, channels: usize, hidden: usize, classes: usize) -> Self {
        Head {
            fc1: Linear::new(format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, classes),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_nchw("head", &x, self.fc1.c_in)?;
        let pooled = x.global_avg_pool()?;
        let h = self.fc1.forward(ctx, pooled)?.gelu();
        self.fc2.forward(ctx, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self, batch: usize) -> u64 {
        self.fc1.macs(batch) + self.fc2.macs(batch)
    }
}
