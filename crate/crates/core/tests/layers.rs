use attention_vig::aggregate::{AggregatorKind, Nonlinearity};
use attention_vig::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use attention_vig::graph::GraphPolicy;
use attention_vig::layers::{Cpe, Downsample, ForwardCtx, Grapher, Head, Irb, StageGraph, Stem};
use attention_vig::params::{Buffers, ParamStore};
use attention_vig::tensor::{gelu_scalar, Mode};
use attention_vig::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    store: ParamStore,
    buffers: Buffers,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Fixture {
            store: ParamStore::new(),
            buffers: Buffers::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Replaces every parameter with unit-scale noise so branches are not near zero.
    fn randomize(&mut self) {
        let names: Vec<String> = self.store.names().map(String::from).collect();
        for n in names {
            let t = self.store.get_mut(&n).unwrap();
            let fan = (t.numel() as f64).sqrt().max(1.0);
            *t = Tensor::randn(t.shape(), 1.0 / fan.sqrt(), &mut self.rng);
        }
    }

    fn run(&self, x: &Tensor, mode: Mode, f: impl for<'t> Fn(&ForwardCtx<'t, '_>, Var<'t>) -> Result<Var<'t>>) -> Tensor {
        let tape = Tape::inference();
        let ctx = ForwardCtx::new(&tape, &self.store, &self.buffers, mode);
        f(&ctx, tape.constant(x.clone())).unwrap().to_tensor()
    }

    /// Gradient check of `sum(out ⊙ r)` over the input and every parameter.
    fn grad_check(
        &self,
        x: &Tensor,
        cfg: GradCheck,
        f: impl for<'t> Fn(&ForwardCtx<'t, '_>, Var<'t>) -> Result<Var<'t>>,
    ) -> GradCheckReport {
        let names: Vec<String> = self.store.names().map(String::from).collect();
        let mut inputs = vec![x.clone()];
        inputs.extend(names.iter().map(|n| self.store.get(n).unwrap().clone()));
        let out_shape = self.run(x, Mode::Train, &f).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let weights = Tensor::randn(&out_shape, 1.0, &mut rng);
        check_gradients(&inputs, cfg, |tape, vars| {
            let ctx = ForwardCtx::new(tape, &self.store, &self.buffers, Mode::Train);
            for (n, v) in names.iter().zip(&vars[1..]) {
                ctx.binder.preset(n.clone(), *v);
            }
            let out = f(&ctx, vars[0])?;
            Ok(out.mul(tape.constant(weights.clone()))?.sum())
        })
        .unwrap()
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---------- CPE ----------

#[test]
fn cpe_with_zero_kernel_is_identity() {
    let mut fx = Fixture::new(1);
    let cpe = Cpe::new("cpe", 3);
    cpe.register(&mut fx.store, &mut fx.rng).unwrap();
    *fx.store.get_mut("cpe.conv.weight").unwrap() = Tensor::zeros(&[3, 1, 3, 3]);
    let x = input(&[2, 3, 5, 4], 2);
    let y = fx.run(&x, Mode::Infer, |ctx, x| cpe.forward(ctx, x));
    assert!(y.bit_eq(&x));
}

#[test]
fn cpe_with_delta_kernel_doubles() {
    let mut fx = Fixture::new(3);
    let cpe = Cpe::new("cpe", 3);
    cpe.register(&mut fx.store, &mut fx.rng).unwrap();
    let mut k = Tensor::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 9 + 4] = 1.0;
    }
    *fx.store.get_mut("cpe.conv.weight").unwrap() = k;
    let x = input(&[1, 3, 4, 4], 4);
    let y = fx.run(&x, Mode::Infer, |ctx, x| cpe.forward(ctx, x));
    assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)) == 0.0);
}

#[test]
fn cpe_commutes_with_translation_in_the_interior() {
    let mut fx = Fixture::new(5);
    let cpe = Cpe::new("cpe", 2);
    cpe.register(&mut fx.store, &mut fx.rng).unwrap();
    fx.randomize();
    let (h, w) = (9, 9);
    let x = input(&[1, 2, h, w], 6);
    // shift right by one column, left edge padded with zeros
    let shifted = Tensor::from_fn(&[1, 2, h, w], |i| {
        let col = i % w;
        if col == 0 { 0.0 } else { x.data()[i - 1] }
    });
    let y = fx.run(&x, Mode::Infer, |ctx, x| cpe.forward(ctx, x));
    let ys = fx.run(&shifted, Mode::Infer, |ctx, x| cpe.forward(ctx, x));
    for c in 0..2 {
        for r in 1..h - 1 {
            for col in 2..w - 1 {
                let a = ys.data()[(c * h + r) * w + col];
                let b = y.data()[(c * h + r) * w + col - 1];
                assert!((a - b).abs() < 1e-13);
            }
        }
    }
}

// ---------- Grapher ----------

fn grapher_fixture(c: usize, seed: u64) -> (Fixture, Grapher) {
    let mut fx = Fixture::new(seed);
    let g = Grapher::new("g", c, AggregatorKind::CrossAttention, 2, Nonlinearity::ExpAffinity);
    g.register(&mut fx.store, &mut fx.rng).unwrap();
    fx.randomize();
    (fx, g)
}

#[test]
fn grapher_preserves_shape() {
    let (fx, g) = grapher_fixture(4, 7);
    for (n, h, w) in [(1, 4, 4), (3, 2, 5), (2, 1, 1)] {
        let graph = StageGraph::new(GraphPolicy::Svga, h, w).unwrap();
        let x = input(&[n, 4, h, w], 8);
        let y = fx.run(&x, Mode::Infer, |ctx, x| g.forward(ctx, x, &graph));
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn grapher_without_neighbor_projection_is_a_per_node_pathway() {
    let (mut fx, g) = grapher_fixture(4, 9);
    // zero the half of the output projection that reads the neighbor aggregate
    let wout = fx.store.get_mut("g.agg.wout").unwrap();
    for v in &mut wout.data_mut()[16..] {
        *v = 0.0;
    }
    let store = fx.store.clone();
    let graph = StageGraph::new(GraphPolicy::Svga, 4, 4).unwrap();
    let x = input(&[1, 4, 4, 4], 10);
    let y = fx.run(&x, Mode::Infer, |ctx, x| g.forward(ctx, x, &graph));

    // oracle: CPE, then per node GeLU(W_self·z + b), then the FFN
    let cpe = fx.run(&x, Mode::Infer, |ctx, x| g.cpe.forward(ctx, x));
    let p = |n: &str| store.get(n).unwrap().data().to_vec();
    let (wout, bout) = (p("g.agg.wout"), p("g.agg.bout"));
    let (w1, b1, w2, b2) = (p("g.ffn.fc1.weight"), p("g.ffn.fc1.bias"), p("g.ffn.fc2.weight"), p("g.ffn.fc2.bias"));
    for node in 0..16 {
        let z: Vec<f64> = (0..4).map(|c| cpe.data()[c * 16 + node]).collect();
        let o: Vec<f64> = (0..4)
            .map(|j| gelu_scalar((0..4).map(|i| z[i] * wout[i * 4 + j]).sum::<f64>() + bout[j]))
            .collect();
        let hdn: Vec<f64> = (0..16)
            .map(|j| gelu_scalar((0..4).map(|i| o[i] * w1[i * 16 + j]).sum::<f64>() + b1[j]))
            .collect();
        for c in 0..4 {
            let out = o[c] + (0..16).map(|i| hdn[i] * w2[i * 4 + c]).sum::<f64>() + b2[c];
            assert!((y.data()[c * 16 + node] - out).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_attention_makes_nodes_independent() {
    let (fx, g) = grapher_fixture(4, 11);
    let graph = StageGraph::new(GraphPolicy::Svga, 4, 4).unwrap();
    let run = |x: &Tensor| {
        let tape = Tape::inference();
        let mut ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
        ctx.alpha_override = Some(0.0);
        g.forward(&ctx, tape.constant(x.clone()), &graph).unwrap().to_tensor()
    };
    let x = input(&[1, 4, 4, 4], 12);
    let base = run(&x);
    let mut bumped = x.clone();
    // perturb node (0, 0) in every channel
    for c in 0..4 {
        bumped.data_mut()[c * 16] += 1.0;
    }
    let y = run(&bumped);
    // CPE still mixes the 3×3 neighbourhood of (0,0); every node outside it is unchanged
    for node in 0..16 {
        let (r, col) = (node / 4, node % 4);
        if r <= 1 && col <= 1 {
            continue;
        }
        for c in 0..4 {
            assert_eq!(y.data()[c * 16 + node], base.data()[c * 16 + node], "node {node}");
        }
    }
    // with attention on, the perturbation reaches SVGA neighbours outside the CPE window
    let tape = Tape::inference();
    let ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
    let on_base = g.forward(&ctx, tape.constant(x), &graph).unwrap().to_tensor();
    let on_bumped = g.forward(&ctx, tape.constant(bumped), &graph).unwrap().to_tensor();
    // node (0, 3) is an SVGA neighbour of (0, 0) two columns past the CPE window
    assert!((0..4).any(|c| on_base.data()[c * 16 + 3] != on_bumped.data()[c * 16 + 3]));
}

#[test]
fn grapher_runs_cpe_then_aggregation_then_ffn() {
    let (fx, g) = grapher_fixture(4, 13);
    let graph = StageGraph::new(GraphPolicy::Svga, 2, 2).unwrap();
    let tape = Tape::inference();
    let ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
    g.forward(&ctx, tape.constant(input(&[1, 4, 2, 2], 14)), &graph).unwrap();
    assert_eq!(tape.marks(), vec!["g.cpe", "g.agg", "g.ffn"]);
}

#[test]
fn grapher_gradients_match_finite_differences() {
    let (fx, g) = grapher_fixture(8, 15);
    let graph = StageGraph::new(GraphPolicy::Svga, 4, 4).unwrap();
    let x = input(&[1, 8, 4, 4], 16);
    let report = fx.grad_check(&x, GradCheck::default(), |ctx, x| g.forward(ctx, x, &graph));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

// ---------- IRB, stem, downsample, head ----------

#[test]
fn irb_with_zero_projection_is_identity() {
    let mut fx = Fixture::new(17);
    let irb = Irb::new("irb", 4);
    irb.register(&mut fx.store, &mut fx.buffers, &mut fx.rng).unwrap();
    fx.randomize();
    for n in ["irb.project.weight"] {
        let t = fx.store.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    // zero shift so the normalized zero branch stays zero
    let t = fx.store.get_mut("irb.bn3.beta").unwrap();
    *t = Tensor::zeros(t.shape());
    let x = input(&[2, 4, 3, 3], 18);
    for mode in [Mode::Train, Mode::Infer] {
        let y = fx.run(&x, mode, |ctx, x| irb.forward(ctx, x));
        assert!(y.bit_eq(&x), "{mode:?}");
    }
}

#[test]
fn irb_gradients_match_finite_differences() {
    let mut fx = Fixture::new(19);
    let irb = Irb::new("irb", 8);
    irb.register(&mut fx.store, &mut fx.buffers, &mut fx.rng).unwrap();
    fx.randomize();
    let x = input(&[1, 8, 4, 4], 20);
    let report = fx.grad_check(&x, GradCheck::sampled(24, 1), |ctx, x| irb.forward(ctx, x));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn stem_grid_arithmetic_and_gradients() {
    let mut fx = Fixture::new(21);
    let stem = Stem::new("stem", 3, 8);
    stem.register(&mut fx.store, &mut fx.buffers, &mut fx.rng).unwrap();
    fx.randomize();
    let tape = Tape::inference();
    let ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
    let big = stem.forward(&ctx, tape.constant(Tensor::zeros(&[1, 3, 224, 224]))).unwrap();
    assert_eq!(big.shape(), vec![1, 8, 56, 56]);
    let x = input(&[2, 3, 8, 8], 22);
    let report = fx.grad_check(&x, GradCheck::sampled(24, 2), |ctx, x| stem.forward(ctx, x));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn downsample_halves_grid_and_passes_gradient_check() {
    let mut fx = Fixture::new(23);
    let d = Downsample::new("down", 4, 8);
    d.register(&mut fx.store, &mut fx.buffers, &mut fx.rng).unwrap();
    fx.randomize();
    let tape = Tape::inference();
    let ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
    let y = d.forward(&ctx, tape.constant(Tensor::zeros(&[1, 4, 56, 56]))).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 28, 28]);
    let x = input(&[2, 4, 4, 4], 24);
    let report = fx.grad_check(&x, GradCheck::sampled(24, 3), |ctx, x| d.forward(ctx, x));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn head_pools_constants_exactly_and_passes_gradient_check() {
    let mut fx = Fixture::new(25);
    let head = Head::new("head", 4, 6, 3);
    head.register(&mut fx.store, &mut fx.rng).unwrap();
    fx.randomize();
    let v = [0.5, -1.0, 2.0, 0.25];
    let x = Tensor::from_fn(&[1, 4, 3, 3], |i| v[i / 9]);
    let y = fx.run(&x, Mode::Infer, |ctx, x| head.forward(ctx, x));
    let flat = Tensor::new(&[1, 4], v.to_vec()).unwrap();
    let tape = Tape::inference();
    let ctx = ForwardCtx::new(&tape, &fx.store, &fx.buffers, Mode::Infer);
    let h = head.fc1.forward(&ctx, tape.constant(flat)).unwrap().gelu();
    let direct = head.fc2.forward(&ctx, h).unwrap().to_tensor();
    assert!(y.max_abs_diff(&direct) < 1e-15);

    for n in [1, 5] {
        let y = fx.run(&input(&[n, 4, 2, 2], 26), Mode::Infer, |ctx, x| head.forward(ctx, x));
        assert_eq!(y.shape(), &[n, 3]);
    }
    let report = fx.grad_check(&input(&[2, 4, 2, 2], 27), GradCheck::default(), |ctx, x| head.forward(ctx, x));
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
