//! AttentionViG assembly: stem, stages of inverted residual blocks and
//! Graphers joined by downsampling, and a classifier head.

mod checkpoint;
mod config;
mod count;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, StageConfig, GRAPHERS_PER_STAGE};
pub use count::{count_flops, count_flops_with, count_macs, count_params, FlopConvention};

use crate::aggregate::AttentionTrace;
use crate::error::{Error, Result};
use crate::layers::{Downsample, ForwardCtx, ForwardRecord, Grapher, Head, Irb, StageGraph, Stem};
use crate::params::{Buffers, ParamKind, ParamStore};
use crate::tensor::{BatchStats, Mode, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct StageLayers {
    pub downsample: Option<Downsample>,
    pub irbs: Vec<Irb>,
    pub graphers: Vec<Grapher>,
}

/// Layer descriptors of a configuration, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub stem: Stem,
    pub stages: Vec<StageLayers>,
    pub head: Head,
}

/// One row of a layer inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSummary {
    pub channels: usize,
    pub irbs: usize,
    pub graphers: usize,
    pub downsampled: bool,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c1 = config.stages[0].channels;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageLayers {
                downsample: (i > 0).then(|| Downsample::new(&format!("stages.{i}.down"), config.stages[i - 1].channels, s.channels)),
                irbs: (0..s.irb_count)
                    .map(|j| Irb::new(&format!("stages.{i}.irb.{j}"), s.channels))
                    .collect(),
                graphers: (0..s.grapher_count)
                    .map(|j| {
                        Grapher::new(
                            &format!("stages.{i}.grapher.{j}"),
                            s.channels,
                            config.aggregator,
                            config.heads,
                            config.nonlinearity,
                        )
                    })
                    .collect(),
            })
            .collect();
        let last = config.stages.last().expect("validated").channels;
        Ok(Architecture {
            stem: Stem::new("stem", config.in_channels, c1),
            stages,
            head: Head::new("head", last, config.head_hidden, config.num_classes),
        })
    }

    /// Number of convolutions in the stem.
    pub fn stem_convs(&self) -> usize {
        2
    }

    pub fn inventory(&self) -> Vec<StageSummary> {
        self.stages
            .iter()
            .map(|s| StageSummary {
                channels: s.graphers[0].channels(),
                irbs: s.irbs.len(),
                graphers: s.graphers.len(),
                downsampled: s.downsample.is_some(),
            })
            .collect()
    }

    pub fn grapher(&self, stage: usize, index: usize) -> Option<&Grapher> {
        self.stages.get(stage)?.graphers.get(index)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Keep per-Grapher cross-attention traces.
    pub keep_traces: bool,
    /// Keep per-Grapher aggregation inputs.
    pub capture_inputs: bool,
    /// Replace every attention weight with a constant.
    pub alpha_override: Option<f64>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            keep_traces: false,
            capture_inputs: false,
            alpha_override: None,
        }
    }

    pub fn infer() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            ..Self::train()
        }
    }
}

pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Every parameter as recorded on the tape.
    pub params: IndexMap<String, Var<'t>>,
    pub record: ForwardRecord,
}

impl ForwardOutput<'_> {
    pub fn trace(&self, grapher: &str) -> Option<&AttentionTrace> {
        self.record.traces.iter().find(|(n, _)| n == grapher).map(|(_, t)| t)
    }

    pub fn capture(&self, grapher: &str) -> Option<&Tensor> {
        self.record.captures.iter().find(|(n, _)| n == grapher).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    buffers: Buffers,
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        arch.stem.register(&mut params, &mut buffers, &mut rng)?;
        for stage in &arch.stages {
            if let Some(d) = &stage.downsample {
                d.register(&mut params, &mut buffers, &mut rng)?;
            }
            for irb in &stage.irbs {
                irb.register(&mut params, &mut buffers, &mut rng)?;
            }
            for g in &stage.graphers {
                g.register(&mut params, &mut rng)?;
            }
        }
        arch.head.register(&mut params, &mut rng)?;
        Ok(Model {
            config,
            arch,
            params,
            buffers,
        })
    }

    /// Reassembles a model from stored tensors. Names and shapes must match
    /// the configuration exactly.
    pub fn from_parts(config: ModelConfig, params: ParamStore, buffers: Buffers) -> Result<Self> {
        let template = Model::build(config, 0)?;
        let check = |what: &str, expected: Vec<(&str, &[usize])>, got: Vec<(&str, &[usize])>| -> Result<()> {
            if expected != got {
                let missing: Vec<_> = expected.iter().filter(|e| !got.contains(e)).map(|e| e.0).collect();
                let extra: Vec<_> = got.iter().filter(|g| !expected.contains(g)).map(|g| g.0).collect();
                return Err(Error::input(format!(
                    "{what} do not match the configuration (missing or reshaped: {missing:?}, unexpected: {extra:?})"
                )));
            }
            Ok(())
        };
        check(
            "parameters",
            template.params.iter().map(|(n, p)| (n, p.value.shape())).collect(),
            params.iter().map(|(n, p)| (n, p.value.shape())).collect(),
        )?;
        check(
            "buffers",
            template.buffers.iter().map(|(n, t)| (n.as_str(), t.shape())).collect(),
            buffers.iter().map(|(n, t)| (n.as_str(), t.shape())).collect(),
        )?;
        Ok(Model {
            params,
            buffers,
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &Buffers {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Buffers {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Patch graphs for every stage at an `h × w` input.
    pub fn stage_graphs(&self, height: usize, width: usize) -> Result<Vec<StageGraph>> {
        self.check_resolution(height, width)?;
        self.config
            .stage_grids(height, width)
            .into_iter()
            .map(|(h, w)| StageGraph::new(self.config.graph, h, w))
            .collect()
    }

    fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let d = self.config.input_divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::input(format!(
                "input {height}×{width} is not a positive multiple of {d} for {} stages",
                self.config.stages.len()
            )));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, images: Var<'t>, opts: &ForwardOptions) -> Result<ForwardOutput<'t>> {
        self.forward_with(tape, images, opts, &IndexMap::new())
    }

    /// Like [`Model::forward`], with some parameters replaced by existing vars.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        images: Var<'t>,
        opts: &ForwardOptions,
        preset: &IndexMap<String, Var<'t>>,
    ) -> Result<ForwardOutput<'t>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[0] == 0 {
            return Err(Error::input(format!(
                "expected a non-empty batch of shape [N, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        let graphs = self.stage_graphs(shape[2], shape[3])?;
        let mut ctx = ForwardCtx::new(tape, &self.params, &self.buffers, opts.mode);
        ctx.keep_traces = opts.keep_traces;
        ctx.capture_inputs = opts.capture_inputs;
        ctx.alpha_override = opts.alpha_override;
        for (name, var) in preset {
            ctx.binder.preset(name.clone(), *var);
        }

        tape.mark("stem");
        let mut x = self.arch.stem.forward(&ctx, images)?;
        for (stage, graph) in self.arch.stages.iter().zip(&graphs) {
            if let Some(d) = &stage.downsample {
                x = d.forward(&ctx, x)?;
            }
            for irb in &stage.irbs {
                x = irb.forward(&ctx, x)?;
            }
            for g in &stage.graphers {
                x = g.forward(&ctx, x, graph)?;
            }
        }
        tape.mark("head");
        let logits = self.arch.head.forward(&ctx, x)?;
        let (params, record) = ctx.finish();
        Ok(ForwardOutput { logits, params, record })
    }

    /// Inference-mode logits. Leaves the model untouched.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let out = self.forward(&tape, tape.constant(images.clone()), &ForwardOptions::infer())?;
        Ok(out.logits.to_tensor())
    }

    /// Folds batch statistics from a train-mode forward into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            let mean_key = format!("{name}.running_mean");
            let var_key = format!("{name}.running_var");
            let mut mean = self
                .buffers
                .get(&mean_key)
                .cloned()
                .ok_or_else(|| Error::input(format!("unknown batch norm `{name}`")))?;
            let var = self
                .buffers
                .get_mut(&var_key)
                .ok_or_else(|| Error::input(format!("unknown batch norm `{name}`")))?;
            s.update_running(&mut mean, var);
            self.buffers.insert(mean_key, mean);
        }
        Ok(())
    }

    /// `(parameter name, β)` for every cross-attention layer, in layer order.
    pub fn betas(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Temperature)
            .map(|(n, p)| (n.to_string(), p.value.item().exp()))
            .collect()
    }
}
