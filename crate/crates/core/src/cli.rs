//! The `avig` command line.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 for IO
//! and runtime failures. `VIG_SEED` overrides the seed of every command that
//! takes one.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorKind, Nonlinearity};
use crate::data::{load_dataset, save_dataset, synthetic, Dataset};
use crate::error::Error;
use crate::graph::{svga_degree, GraphPolicy, PatchGraph};
use crate::heatmap::{decode_netpbm, encode_pgm, similarity_map};
use crate::model::{count_flops_with, count_macs, count_params, load_checkpoint, save_checkpoint, FlopConvention, Model, ModelConfig};
use crate::tensor::{DType, Tensor};
use crate::train::{evaluate, train_loop, EpochRecord, History, TrainRecipe};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const SEED_ENV: &str = "VIG_SEED";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidInput(_) => EXIT_USAGE,
            Error::Dimension { .. } | Error::Contract(_) | Error::Format { .. } | Error::Io { .. } => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "avig", version, about = "Vision GNN with cross-attention aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        config: PathBuf,
    },
    /// Report accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Train one model per variant with shared data and seed, then tabulate.
    Ablate {
        config: PathBuf,
        /// Comma-separated aggregator or nonlinearity names.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
    },
    /// Write the query–key similarity map of one patch as a binary PGM.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P5 or P6 image.
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        image: Option<PathBuf>,
        /// Dataset manifest to take the image from instead.
        #[arg(long, requires = "index")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter count, FLOPs, SVGA degrees and attention temperatures.
    Inspect {
        /// Preset name: S, M, B or Micro.
        #[arg(long, conflicts_with_all = ["model", "checkpoint"])]
        preset: Option<String>,
        /// Model config JSON.
        #[arg(long, conflicts_with = "checkpoint")]
        model: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Dump a patch graph, one `node: neighbors` line per node.
    Graph {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// `svga` or `knn`.
        #[arg(long, default_value = "svga")]
        policy: String,
        #[arg(long, default_value_t = 9)]
        k: usize,
        /// Feature width of the random node features used by kNN.
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic dataset as a raw tensor file with a JSON manifest.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path without extension; `.bin` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset manifest written by `gen-data`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Generate this many synthetic images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

/// Where a run gets its images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { count: usize, size: usize, seed: u64 },
    Manifest(PathBuf),
}

impl DataSource {
    fn load(&self, base: &Path) -> CliResult<Dataset> {
        match self {
            DataSource::Synthetic { count, size, seed } => Ok(synthetic(*count, *size, *seed)),
            DataSource::Manifest(p) => Ok(load_dataset(base.join(p))?),
        }
    }
}

/// A training run. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name; exclusive with `model`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub aggregator: Option<AggregatorKind>,
    #[serde(default)]
    pub nonlinearity: Option<Nonlinearity>,
    pub train: TrainRecipe,
    pub data: DataSource,
    #[serde(default)]
    pub val: Option<DataSource>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig, Error> {
        let mut cfg = match (&self.preset, &self.model) {
            (Some(p), None) => ModelConfig::from_preset(p)?,
            (None, Some(m)) => m.clone(),
            (Some(_), Some(_)) => return Err(Error::config("`preset` and `model` are mutually exclusive")),
            (None, None) => return Err(Error::config("one of `preset` or `model` is required")),
        };
        if let Some(a) = self.aggregator {
            cfg.aggregator = a;
        }
        if let Some(n) = self.nonlinearity {
            cfg.nonlinearity = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.train.validate()?;
        cfg.model_config()?;
        Ok(cfg)
    }
}

fn read_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn seeded(given: u64) -> CliResult<u64> {
    Ok(seed_override()?.unwrap_or(given))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Train { config } => cmd_train(&config, out),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => cmd_eval(&checkpoint, &data, batch_size, out),
        Command::Ablate { config, variants } => cmd_ablate(&config, &variants, out),
        Command::Heatmap {
            checkpoint,
            image,
            dataset,
            index,
            row,
            col,
            out: path,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let image = match (image, dataset, index) {
                (Some(p), _, _) => {
                    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    decode_netpbm(&bytes)?.to_rgb_tensor()
                }
                (None, Some(d), Some(i)) => load_dataset(&d)?.image(i)?,
                _ => return Err(CliError::usage("give --image, or --dataset with --index")),
            };
            cmd_heatmap(&model, &image, row, col, &path, out)
        }
        Command::Inspect {
            preset,
            model,
            checkpoint,
            resolution,
        } => {
            let loaded = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let config = match (&loaded, preset, model) {
                (Some(m), _, _) => m.config().clone(),
                (None, Some(p), _) => ModelConfig::from_preset(&p)?,
                (None, None, Some(path)) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| CliError::usage(format!("cannot read model config {}: {e}", path.display())))?;
                    ModelConfig::from_json(&text)?
                }
                (None, None, None) => ModelConfig::small(),
            };
            let report = inspect_report(&config, resolution, loaded.as_ref())?;
            out.write_all(report.as_bytes())?;
            Ok(())
        }
        Command::Graph {
            height,
            width,
            policy,
            k,
            channels,
            seed,
        } => {
            let graph = match policy.as_str() {
                "svga" => PatchGraph::build(GraphPolicy::Svga, height, width, None)?,
                "knn" => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeded(seed)?);
                    let features = Tensor::randn(&[height * width, channels], 1.0, &mut rng);
                    PatchGraph::build(GraphPolicy::Knn { k }, height, width, Some(&features))?
                }
                other => return Err(CliError::usage(format!("unknown graph policy `{other}` (expected svga or knn)"))),
            };
            out.write_all(graph.to_text().as_bytes())?;
            Ok(())
        }
        Command::GenData {
            count,
            size,
            seed,
            out: stem,
            dtype,
        } => {
            let dtype = match dtype.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(CliError::usage(format!("unknown dtype `{other}` (expected f32 or f64)"))),
            };
            if count == 0 || size == 0 {
                return Err(CliError::usage("--count and --size must be positive"));
            }
            let seed = seeded(seed)?;
            if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let manifest = save_dataset(&synthetic(count, size, seed), &stem, dtype, Some(seed))?;
            writeln!(out, "{}", manifest.display())?;
            Ok(())
        }
    }
}

fn cmd_train(config_path: &Path, out: &mut dyn Write) -> CliResult {
    let cfg = read_run_config(config_path)?;
    let base = base_dir(config_path);
    let train = cfg.data.load(&base)?;
    let val = cfg.val.as_ref().map(|v| v.load(&base)).transpose()?;
    let mut model = Model::build(cfg.model_config()?, cfg.train.seed)?;
    let out_dir = base.join(&cfg.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut log = String::new();
    let history = train_loop(&mut model, &train, val.as_ref(), &cfg.train, |r| {
        writeln!(log, "{}", epoch_line(r)).expect("string write");
    })?;
    out.write_all(log.as_bytes())?;
    let ckpt = out_dir.join("checkpoint.avig");
    save_checkpoint(&model, &ckpt)?;
    let csv = out_dir.join("history.csv");
    fs::write(&csv, history.to_csv()).map_err(|e| Error::io(&csv, e))?;
    writeln!(out, "wrote {} and {}", ckpt.display(), csv.display())?;
    Ok(())
}

fn epoch_line(r: &EpochRecord) -> String {
    let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
    format!(
        "epoch {:>3} loss {:.4} train_acc {:.4}{val} lr {:.3e}",
        r.epoch, r.loss, r.train_acc, r.lr
    )
}

fn cmd_eval(checkpoint: &Path, data: &DataArgs, batch_size: usize, out: &mut dyn Write) -> CliResult {
    let model = load_checkpoint(checkpoint)?;
    let dataset = match (&data.data, data.synthetic) {
        (Some(p), _) => load_dataset(p)?,
        (None, Some(n)) => synthetic(n, data.size, seeded(data.data_seed)?),
        (None, None) => return Err(CliError::usage("give --data or --synthetic")),
    };
    let acc = evaluate(&model, &dataset, batch_size)?;
    writeln!(out, "accuracy {acc:.4} ({} images)", dataset.len())?;
    Ok(())
}

/// One ablation arm: an aggregator, or cross-attention with a given nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Aggregator(AggregatorKind),
    Nonlinearity(Nonlinearity),
}

impl Variant {
    pub fn parse(name: &str) -> Option<Self> {
        AggregatorKind::from_name(name)
            .map(Variant::Aggregator)
            .or_else(|| Nonlinearity::from_name(name).map(Variant::Nonlinearity))
    }

    pub fn apply(self, config: ModelConfig) -> ModelConfig {
        match self {
            Variant::Aggregator(k) => config.with_aggregator(k),
            Variant::Nonlinearity(n) => config
                .with_aggregator(AggregatorKind::CrossAttention)
                .with_nonlinearity(n),
        }
    }
}

pub const ABLATION_HEADER: &str =
    "| variant | aggregator | nonlinearity | params | MFLOPs | train_acc | val_acc | ms/step |";

fn cmd_ablate(config_path: &Path, names: &[String], out: &mut dyn Write) -> CliResult {
    let variants = names
        .iter()
        .map(|n| {
            Variant::parse(n.trim()).ok_or_else(|| {
                let known: Vec<&str> = AggregatorKind::ALL
                    .iter()
                    .map(|k| k.name())
                    .chain(Nonlinearity::ALL.iter().map(|n| n.name()))
                    .collect();
                CliError::usage(format!("unknown variant `{n}` (expected one of {})", known.join(", ")))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = read_run_config(config_path)?;
    let base = base_dir(config_path);
    let train = cfg.data.load(&base)?;
    let val = cfg.val.as_ref().map(|v| v.load(&base)).transpose()?;
    let [_, h, w] = train.image_shape();
    let base_model = cfg.model_config()?;

    let mut table = format!("{ABLATION_HEADER}\n|---|---|---|---:|---:|---:|---:|---:|\n");
    for (name, variant) in names.iter().zip(variants) {
        let mc = variant.apply(base_model.clone());
        let params = count_params(&mc)?;
        let mflops = count_flops_with(&mc, h, w, FlopConvention::default())? as f64 / 1e6;
        let mut model = Model::build(mc.clone(), cfg.train.seed)?;
        let start = Instant::now();
        let history = train_loop(&mut model, &train, val.as_ref(), &cfg.train, |_| {})?;
        let steps = steps_taken(&history, &cfg.train, train.len());
        let ms = start.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64;
        let last = history.last().expect("at least one epoch");
        let val_acc = last.val_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        writeln!(
            table,
            "| {} | {} | {} | {params} | {mflops:.3} | {:.4} | {val_acc} | {ms:.1} |",
            name.trim(),
            mc.aggregator,
            if mc.aggregator == AggregatorKind::CrossAttention { mc.nonlinearity.name() } else { "-" },
            last.train_acc,
        )
        .expect("string write");
    }
    out.write_all(table.as_bytes())?;
    Ok(())
}

fn steps_taken(history: &History, recipe: &TrainRecipe, samples: usize) -> usize {
    let per_epoch = samples.div_ceil(recipe.batch_size);
    let per_epoch = recipe.max_steps.map_or(per_epoch, |m| m.min(per_epoch));
    per_epoch * history.epochs.len()
}

fn cmd_heatmap(model: &Model, image: &Tensor, row: usize, col: usize, path: &Path, out: &mut dyn Write) -> CliResult {
    let map = similarity_map(model, image, row, col)?;
    let bytes = encode_pgm(map.width, map.height, &map.to_gray())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    writeln!(out, "wrote {}×{} heatmap to {}", map.width, map.height, path.display())?;
    Ok(())
}

/// Parameter count, FLOPs, per-stage SVGA degrees, and β per cross-attention layer.
pub fn inspect_report(config: &ModelConfig, resolution: usize, model: Option<&Model>) -> Result<String, Error> {
    config.validate()?;
    let mut s = String::new();
    let params = count_params(config)?;
    let macs = count_flops_with(config, resolution, resolution, FlopConvention::default())?;
    writeln!(s, "model: {}", config.name).unwrap();
    writeln!(s, "aggregator: {} ({})", config.aggregator, config.nonlinearity).unwrap();
    writeln!(s, "params: {:.2} M ({params})", params as f64 / 1e6).unwrap();
    writeln!(
        s,
        "flops @ {resolution}x{resolution}: {} multiply-accumulates ({} at 2 per MAC)",
        scaled(macs),
        scaled(2 * macs)
    )
    .unwrap();
    debug_assert_eq!(macs, count_macs(config, resolution, resolution)?);
    writeln!(s, "stages:").unwrap();
    for (i, ((h, w), stage)) in config
        .stage_grids(resolution, resolution)
        .into_iter()
        .zip(&config.stages)
        .enumerate()
    {
        let degrees: Vec<usize> = (0..h * w).map(|n| svga_degree(h, w, n / w, n % w)).collect();
        let min = degrees.iter().min().copied().unwrap_or(0);
        let max = degrees.iter().max().copied().unwrap_or(0);
        let mean = degrees.iter().sum::<usize>() as f64 / degrees.len().max(1) as f64;
        writeln!(
            s,
            "  stage {}: {} channels, grid {h}x{w}, svga degree min {min} max {max} mean {mean:.2}",
            i + 1,
            stage.channels
        )
        .unwrap();
    }
    if config.aggregator == AggregatorKind::CrossAttention {
        let owned;
        let m = match model {
            Some(m) => m,
            None => {
                owned = Model::build(config.clone(), 0)?;
                &owned
            }
        };
        writeln!(s, "learned beta:").unwrap();
        for (name, beta) in m.betas() {
            let layer = name.strip_suffix(".agg.log_beta").unwrap_or(&name);
            writeln!(s, "  {layer}: {beta:.2}").unwrap();
        }
    }
    Ok(s)
}

fn scaled(n: u64) -> String {
    let n = n as f64;
    if n >= 1e9 {
        format!("{:.2} G", n / 1e9)
    } else {
        format!("{:.2} M", n / 1e6)
    }
}
