use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use hyperformer::checks;
use hyperformer::container::{self, Dtype};
use hyperformer::hypergraph::empirical_partition;
use hyperformer::model::{HyperformerConfig, HyperformerModel, PartitionMode};
use hyperformer::skeleton::{mini16, ntu25, shortest_path_hops, SkeletonGraph};
use hyperformer::training::{self, Dataset, Precision, TrainConfig};

/// Largest tolerated gap between exported attention terms and the
/// attention the forward pass used.
const RECONSTRUCTION_LIMIT: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "hyperformer", version, about = "Hypergraph self-attention for skeleton action recognition")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Opts {
    /// Skeleton JSON file, or one of the bundled `ntu25` and `mini16`.
    #[arg(long, global = true)]
    skeleton: Option<String>,
    /// Model config JSON file, or the preset `toy` or `full`.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Training config JSON file, or the preset `toy`, `desk` or `full`.
    #[arg(long = "train-config", global = true)]
    train_config: Option<String>,
    /// Overrides the model, training and data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ablation variant, e.g. `sa_tc` or `hypersa_mstc`.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    layer: Option<usize>,
    #[arg(long, global = true)]
    frame: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Print the hop-distance matrix of a skeleton.
    Spd,
    /// Train on the synthetic suite; writes a checkpoint, metrics and held-out scores.
    Train,
    /// Train one ablation variant and report its accuracy and size.
    Ablate,
    /// Export the per-term attention of one sample, frame and layer.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the held-out split (or into `--samples`).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// `[N, 3, T, V]` tensor container to read samples from instead.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Learn a partition, or print an empirical one.
    #[command(subcommand)]
    Partition(PartitionAction),
    /// Add per-stream class scores and report the fused accuracy.
    Fuse {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Run a self-check suite: gradients, oracles or invariants.
    Check { suite: String },
}

#[derive(Subcommand)]
enum PartitionAction {
    /// Train with a relaxed partition, then discretize and export it.
    Learn,
    /// Print a named strategy of the skeleton config.
    Show { strategy: String },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    seed: u64,
    artifacts: Vec<PathBuf>,
    tool_version: &'static str,
}

/// Where a command's files go. The manifest is written before anything
/// else and lists every artifact the run is about to produce.
struct Run {
    dir: Option<PathBuf>,
}

impl Run {
    fn start(command: &str, dir: Option<PathBuf>, config: Value, seed: u64, artifacts: &[&str]) -> Result<Self> {
        let manifest = RunManifest {
            command: command.into(),
            config,
            seed,
            artifacts: dir
                .as_ref()
                .map(|d| artifacts.iter().map(|a| d.join(a)).collect())
                .unwrap_or_default(),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        match &dir {
            Some(d) => {
                fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                fs::write(d.join("manifest.json"), text + "\n")?;
            }
            None => eprintln!("manifest: {}", serde_json::to_string(&manifest)?),
        }
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.as_deref().unwrap_or(Path::new(".")).join(name)
    }
}

fn load_skeleton(arg: Option<&str>) -> Result<SkeletonGraph> {
    Ok(match arg {
        None | Some("ntu25") => ntu25(),
        Some("mini16") => mini16(),
        Some(path) => SkeletonGraph::load(path).with_context(|| format!("loading skeleton {path}"))?,
    })
}

fn model_config(opts: &Opts, skeleton: &SkeletonGraph) -> Result<HyperformerConfig> {
    let v = skeleton.num_joints();
    let mut cfg = match opts.config.as_deref() {
        None | Some("toy") => HyperformerConfig {
            num_joints: v,
            ..HyperformerConfig::toy()
        },
        Some("full") => HyperformerConfig {
            num_joints: v,
            ..HyperformerConfig::default()
        },
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing model config {path}"))?
        }
    };
    if cfg.num_joints != v {
        bail!("model config expects {} joints, skeleton has {v}", cfg.num_joints);
    }
    if let Some(variant) = &opts.variant {
        cfg = cfg.with_variant(variant)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_config(opts: &Opts) -> Result<TrainConfig> {
    let mut cfg = match opts.train_config.as_deref() {
        None => TrainConfig::toy(),
        Some(name @ ("toy" | "desk" | "full")) => TrainConfig::preset(name)?,
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing training config {path}"))?
        }
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    match opts.precision {
        Some(PrecisionArg::F32) => cfg.precision = Precision::F32,
        Some(PrecisionArg::F64) => cfg.precision = Precision::F64,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` when the command ran but a postcondition failed.
fn run(cli: Cli) -> Result<bool> {
    let opts = cli.opts;
    match cli.command {
        Command::Spd => spd(&opts),
        Command::Train => train(&opts, None),
        Command::Ablate => {
            let variant = opts.variant.clone().ok_or_else(|| anyhow!("ablate needs --variant"))?;
            train(&opts, Some(&variant))
        }
        Command::DumpAttention {
            checkpoint,
            sample,
            samples,
        } => dump_attention(&opts, &checkpoint, sample, samples.as_deref()),
        Command::Partition(PartitionAction::Learn) => partition_learn(&opts),
        Command::Partition(PartitionAction::Show { strategy }) => partition_show(&opts, &strategy),
        Command::Fuse { scores, labels } => fuse(&opts, &scores, &labels),
        Command::Check { suite } => check(&opts, &suite),
    }
}

fn spd(opts: &Opts) -> Result<bool> {
    let skeleton = load_skeleton(opts.skeleton.as_deref())?;
    let run = Run::start(
        "spd",
        opts.out.clone(),
        json!({ "skeleton": skeleton }),
        opts.seed.unwrap_or(0),
        &["hops.txt"],
    )?;
    let hops = shortest_path_hops(&skeleton)?;
    let text: String = hops
        .rows()
        .iter()
        .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    print!("{text}");
    if run.dir.is_some() {
        fs::write(run.path("hops.txt"), text)?;
    }
    Ok(true)
}

fn write_scores(run: &Run, model: &HyperformerModel, eval: &Dataset) -> Result<f64> {
    let scores = training::predict_scores(model, eval)?;
    container::write(run.path("eval_scores.bin"), &scores, Dtype::F64)?;
    container::write_labels(run.path("eval_labels.bin"), &eval.labels)?;
    Ok(training::accuracy(&training::argmax_rows(&scores), &eval.labels))
}

fn train(opts: &Opts, variant: Option<&str>) -> Result<bool> {
    let skeleton = load_skeleton(opts.skeleton.as_deref())?;
    let mcfg = model_config(opts, &skeleton)?;
    let tcfg = train_config(opts)?;
    let command = if variant.is_some() { "ablate" } else { "train" };
    let mut artifacts = vec!["metrics.jsonl", "model.ckpt", "eval_scores.bin", "eval_labels.bin", "summary.json"];
    if variant.is_some() {
        artifacts.push("result.json");
    }
    let run = Run::start(
        command,
        Some(opts.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))),
        json!({ "skeleton": skeleton, "model": mcfg, "train": tcfg }),
        tcfg.seed,
        &artifacts,
    )?;

    let (train_set, eval_set) = training::toy_splits(&skeleton, &tcfg.data, tcfg.seed)?;
    let mut model = match variant {
        Some(v) => HyperformerModel::build_ablation(mcfg, v, &skeleton)?,
        None => HyperformerModel::new(mcfg, &skeleton)?,
    };
    let mut log = BufWriter::new(File::create(run.path("metrics.jsonl"))?);
    let report = training::train(&mut model, &train_set, None, &tcfg, Some(&mut log))?;
    log.flush()?;
    model.save(run.path("model.ckpt"))?;
    let eval_acc = write_scores(&run, &model, &eval_set)?;
    let last = report.metrics.last();
    let summary = json!({
        "parameters": model.count_parameters(),
        "final_train_acc": last.map(|m| m.train_acc),
        "final_train_loss": last.map(|m| m.train_loss),
        "eval_acc": eval_acc,
        "partition_row_error": report.partition_row_error,
    });
    fs::write(run.path("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if let Some(v) = variant {
        let result = json!({
            "variant": v,
            "parameters": model.count_parameters(),
            "train_acc": last.map(|m| m.train_acc),
            "eval_acc": eval_acc,
        });
        fs::write(run.path("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(true)
}

fn dump_attention(opts: &Opts, checkpoint: &Path, sample: usize, samples: Option<&Path>) -> Result<bool> {
    let model = HyperformerModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (layer, frame) = (opts.layer.unwrap_or(0), opts.frame.unwrap_or(0));
    let heads = model.config.heads;
    let names: Vec<String> = (0..heads)
        .map(|h| format!("attention_l{layer}_s{sample}_f{frame}_h{h}.json"))
        .collect();
    let tcfg = train_config(opts)?;
    let run = Run::start(
        "dump-attention",
        Some(opts.out.clone().unwrap_or_else(|| PathBuf::from("runs/dump-attention"))),
        json!({
            "checkpoint": checkpoint,
            "samples": samples,
            "data": if samples.is_none() { serde_json::to_value(&tcfg.data)? } else { Value::Null },
            "sample": sample,
            "layer": layer,
            "frame": frame,
        }),
        tcfg.seed,
        &names.iter().map(String::as_str).collect::<Vec<_>>(),
    )?;

    let batch = match samples {
        Some(path) => container::read(path)?,
        None => training::toy_splits(&model.skeleton, &tcfg.data, tcfg.seed)?.1.samples,
    };
    let n = batch.shape().first().copied().unwrap_or(0);
    if sample >= n {
        bail!("sample {sample} out of range for {n} samples");
    }
    let one = batch.index_axis0(sample);
    let one = hyperformer::numerics::NdArray::stack(&[one])?;
    let breakdown = model.attention_breakdown(&one, layer, 0, frame)?;
    let err = breakdown.reconstruction_error();
    if !(err < RECONSTRUCTION_LIMIT) {
        bail!("attention terms do not reconstruct the forward attention (error {err:e})");
    }
    let partition = model.assignment()?.assignment().to_vec();
    for (record, name) in breakdown.records(layer, sample, &partition).into_iter().zip(&names) {
        fs::write(run.path(name), serde_json::to_string_pretty(&record)? + "\n")?;
    }
    println!("wrote {} heads, reconstruction error {err:.1e}", names.len());
    Ok(true)
}

fn partition_learn(opts: &Opts) -> Result<bool> {
    let skeleton = load_skeleton(opts.skeleton.as_deref())?;
    let mut mcfg = model_config(opts, &skeleton)?;
    if !matches!(mcfg.partition, PartitionMode::Learned { .. }) {
        mcfg.partition = PartitionMode::learned();
    }
    let tcfg = train_config(opts)?;
    let run = Run::start(
        "partition-learn",
        Some(opts.out.clone().unwrap_or_else(|| PathBuf::from("runs/partition"))),
        json!({ "skeleton": skeleton, "model": mcfg, "train": tcfg }),
        tcfg.seed,
        &["metrics.jsonl", "partition.txt", "model.ckpt"],
    )?;
    let (train_set, _) = training::toy_splits(&skeleton, &tcfg.data, tcfg.seed)?;
    let mut model = HyperformerModel::new(mcfg, &skeleton)?;
    let mut log = BufWriter::new(File::create(run.path("metrics.jsonl"))?);
    let report = training::train(&mut model, &train_set, None, &tcfg, Some(&mut log))?;
    log.flush()?;
    let partition = model.freeze_partition()?;
    partition.save(run.path("partition.txt"))?;
    model.save(run.path("model.ckpt"))?;
    print!("{}", partition.to_text());
    let row_err = report.partition_row_error.unwrap_or(0.0);
    eprintln!("largest relaxed row-sum error during training: {row_err:.1e}");
    Ok(row_err <= 1e-9)
}

fn partition_show(opts: &Opts, strategy: &str) -> Result<bool> {
    let skeleton = load_skeleton(opts.skeleton.as_deref())?;
    let run = Run::start(
        "partition-show",
        opts.out.clone(),
        json!({ "skeleton": skeleton, "strategy": strategy }),
        opts.seed.unwrap_or(0),
        &["partition.txt"],
    )?;
    let partition = empirical_partition(strategy, &skeleton)?;
    print!("{}", partition.to_text());
    if run.dir.is_some() {
        partition.save(run.path("partition.txt"))?;
    }
    Ok(true)
}

fn fuse(opts: &Opts, scores: &[PathBuf], labels: &Path) -> Result<bool> {
    let run = Run::start(
        "fuse",
        opts.out.clone(),
        json!({ "scores": scores, "labels": labels }),
        opts.seed.unwrap_or(0),
        &["fused_predictions.bin"],
    )?;
    let sets = scores
        .iter()
        .map(|p| container::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let labels = container::read_labels(labels)?;
    for (path, s) in scores.iter().zip(&sets) {
        if s.shape().first() != Some(&labels.len()) {
            bail!("{} has {:?} scores for {} labels", path.display(), s.shape(), labels.len());
        }
        let acc = training::accuracy(&training::argmax_rows(s), &labels);
        println!("{}: {acc:.4}", path.display());
    }
    let fused = training::fuse_streams(&sets)?;
    println!("fused: {:.4}", training::accuracy(&fused, &labels));
    if run.dir.is_some() {
        container::write_labels(run.path("fused_predictions.bin"), &fused)?;
    }
    Ok(true)
}

fn check(opts: &Opts, suite: &str) -> Result<bool> {
    Run::start("check", opts.out.clone(), json!({ "suite": suite }), opts.seed.unwrap_or(0), &[])?;
    let outcomes = checks::run_suite(suite, opts.seed.unwrap_or(0))?;
    for o in &outcomes {
        println!("{o}");
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}
