//! Subcommands of the `lucf` binary. Each `cmd_*` function is usable on its
//! own; [`run`] parses arguments and maps outcomes to exit codes:
//! 0 success, 1 check or runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lucf::data::{gen_synthetic, load_dataset, write_dataset, DatasetSpec, ShapeFamily};
use lucf::gradsuite::{run_suite, SuiteReport};
use lucf::metrics::{HdVariant, MetricReport, Spacing};
use lucf::model::{
    complexity, write_pgm, Complexity, LucfNet, ModelConfig, PAPER_GFLOPS, PAPER_PARAMS_M,
};
use lucf::nn::Mode;
use lucf::tensor::OpKind;
use lucf::train::{
    config_hash, evaluate_run, history_csv, load_checkpoint, save_checkpoint, HistoryRow,
    TrainConfig, Trainer,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an invalid configuration; exit code 2.
    Usage(String),
    /// A failed check or runtime error; exit code 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lucf::Error> for CliError {
    fn from(e: lucf::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hd_variant: HdVariant,
    pub batch_size: usize,
    pub spacing: Option<Spacing>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hd_variant: HdVariant::Hd95,
            batch_size: 4,
            spacing: None,
        }
    }
}

/// Everything a command needs besides paths. Serialized verbatim next to
/// every output so a run can be reproduced from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// One seed drives every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).unwrap_or((s, s));
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Parser, Debug)]
#[command(name = "lucf", version, about = "LUCF-Net segmentation: data, training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Finite-difference check of every op, block and loss.
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP counts of a model configuration.
    Summary(SummaryArgs),
    /// Write the channel-averaged encoder features of one image as PGM files.
    DumpFeatures(DumpArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Disable the local-global blocks.
    #[arg(long)]
    pub no_lg: bool,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub fusion_depth: Option<u8>,
    /// Attention heads per stage, e.g. 1,2,4,8.
    #[arg(long, value_parser = parse_heads)]
    pub heads: Option<[usize; 4]>,
    #[arg(long, value_parser = parse_size)]
    pub input: Option<(usize, usize)>,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) {
        if let Some(v) = self.base_width {
            m.base_width = v;
        }
        if let Some(v) = self.classes {
            m.num_classes = v;
        }
        if self.no_lg {
            m.lg_enabled = false;
        }
        if let Some(v) = self.fusion_depth {
            m.fusion_depth = v as usize;
        }
        if let Some(h) = self.heads {
            m.heads = h;
        }
        if let Some(v) = self.input {
            m.input_size = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_parser = parse_family)]
    pub family: Option<ShapeFamily>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_heads(s: &str) -> std::result::Result<[usize; 4], String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 4 values, got {}", v.len()))
}

fn parse_family(s: &str) -> std::result::Result<ShapeFamily, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset directory written by `synth` (or any manifest directory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `+`-separated loss terms: ce, dice, lovasz, ohem.
    #[arg(long)]
    pub loss: Option<String>,
    /// Region-term weight; several values run one training per value.
    #[arg(long, value_delimiter = ',')]
    pub hybrid_weight: Vec<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Stop after this many iterations (the run can be continued with --resume).
    #[arg(long)]
    pub stop_at: Option<u64>,
    /// Continue the run stored in --out.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// hd95 or hd100.
    #[arg(long)]
    pub metrics: Option<HdVariant>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Default)]
pub struct GradcheckArgs {
    /// Corrupt the backward rule of this op (negative control).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Default)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start from the full-size reconstruction instead of the desk-scale default.
    #[arg(long)]
    pub paper_preset: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn base_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Refuses to write into a non-empty directory unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Failure(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<usize> {
    cfg.dataset.validate().map_err(usage)?;
    let samples = gen_synthetic(&cfg.dataset)?;
    prepare_out_dir(out, force)?;
    write_dataset(out, &samples, cfg.dataset.num_classes, Some(&cfg.dataset))?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(samples.len())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub iterations: u64,
    pub final_loss: Option<f64>,
}

fn append_history(path: &Path, rows: &[HistoryRow], heads: usize, fresh: bool) -> CliResult<()> {
    let csv = history_csv(rows, heads);
    if fresh {
        return write(path, csv);
    }
    let mut existing = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    existing.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
    write(path, existing)
}

/// Trains (or continues) one run into `out`: `config.json`,
/// `checkpoint.bin` and `history.csv`. On divergence the history so far
/// is kept and the error returned.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    stop_at: Option<u64>,
    resume: bool,
    force: bool,
) -> CliResult<TrainOutcome> {
    cfg.train.validate().map_err(usage)?;
    let (manifest, samples) = load_dataset(data)?;
    if samples.is_empty() {
        return Err(CliError::Failure(format!("{} has no samples", data.display())));
    }
    if manifest.num_classes > cfg.train.model.num_classes {
        return Err(usage(format!(
            "dataset has {} classes, model {}",
            manifest.num_classes, cfg.train.model.num_classes
        )));
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let hist_path = out.join(HISTORY_FILE);
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if config_hash(&ckpt.config) != config_hash(&cfg.train) {
            return Err(usage("--resume with a configuration different from the stored run"));
        }
        Trainer::from_checkpoint(&ckpt)?
    } else {
        prepare_out_dir(out, force)?;
        write(&out.join(CONFIG_FILE), cfg.to_json())?;
        Trainer::new(&cfg.train, samples.len())?
    };
    let heads = cfg.train.model.fusion_depth;
    let until = stop_at.unwrap_or(u64::MAX).min(trainer.max_iter());
    let mut fresh = !resume;
    while trainer.iter() < until {
        let next = match cfg.checkpoint_every {
            0 => until,
            n => ((trainer.iter() / n + 1) * n).min(until),
        };
        let mut rows = Vec::new();
        let result = trainer.run(&samples, next, |r| rows.push(r.clone()));
        append_history(&hist_path, &rows, heads, fresh)?;
        fresh = false;
        result?;
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }
    if fresh {
        // Nothing to run; still leave a complete output directory.
        append_history(&hist_path, &[], heads, true)?;
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }
    let final_loss = fs::read_to_string(&hist_path)
        .ok()
        .and_then(|t| t.lines().last().and_then(|l| l.split(',').nth(2)).and_then(|v| v.parse().ok()));
    Ok(TrainOutcome {
        out: out.to_path_buf(),
        iterations: trainer.iter(),
        final_loss,
    })
}

/// Runs one training per hybrid weight, in `out/hw-<weight>` when there is
/// more than one.
pub fn cmd_train_grid(
    cfg: &RunConfig,
    weights: &[f64],
    data: &Path,
    out: &Path,
    stop_at: Option<u64>,
    resume: bool,
    force: bool,
) -> CliResult<Vec<TrainOutcome>> {
    if weights.len() <= 1 {
        let mut cfg = cfg.clone();
        if let Some(&w) = weights.first() {
            cfg.train.loss.hybrid_weight = w;
        }
        return Ok(vec![cmd_train(&cfg, data, out, stop_at, resume, force)?]);
    }
    weights
        .iter()
        .map(|&w| {
            let mut cell = cfg.clone();
            cell.train.loss.hybrid_weight = w;
            cmd_train(&cell, data, &out.join(format!("hw-{w}")), stop_at, resume, force)
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> CliResult<MetricReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, samples) = load_dataset(data)?;
    if samples.is_empty() {
        return Err(CliError::Failure(format!("{} has no samples", data.display())));
    }
    let mut net = LucfNet::new(&ckpt.config.model, ckpt.config.seed)?;
    ckpt.load_into(&mut net)?;
    let e = &cfg.eval;
    let report = evaluate_run(&net, &samples, e.batch_size.max(1), e.hd_variant, e.spacing)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    let json = serde_json::json!({
        "eval": cfg.eval,
        "checkpoint_config_hash": config_hash(&ckpt.config),
        "checkpoint_iter": ckpt.iter,
        "summary": report.summary_json(),
    });
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&json).expect("json") + "\n")?;
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<SuiteReport> {
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op {name:?}")))?),
        None => None,
    };
    Ok(run_suite(fault, args.filter.as_deref()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub model: ModelConfig,
    pub input: (usize, usize),
    #[serde(flatten)]
    pub counts: Complexity,
    pub params_m: f64,
    pub gflops: f64,
    /// Published figures, shown for the full-size reconstruction only.
    pub reference: Option<(f64, f64)>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w) = self.input;
        writeln!(f, "input        1x{}x{h}x{w}", self.model.in_channels)?;
        writeln!(f, "params       {} ({:.2} M)", self.counts.params, self.params_m)?;
        writeln!(f, "flops        {} ({:.2} GFLOPs)", self.counts.flops, self.gflops)?;
        if let Some((p, g)) = self.reference {
            writeln!(f, "reference    paper reports {p:.2} M / {g:.2} GFLOPs")?;
        }
        Ok(())
    }
}

pub fn cmd_summary(model: &ModelConfig, paper_preset: bool) -> CliResult<Summary> {
    model.validate().map_err(usage)?;
    let input = model.input_size;
    model.check_input_size(input.0, input.1).map_err(usage)?;
    let counts = complexity(model, input);
    Ok(Summary {
        model: model.clone(),
        input,
        counts,
        params_m: counts.params as f64 / 1e6,
        gflops: counts.flops as f64 / 1e9,
        reference: paper_preset.then_some((PAPER_PARAMS_M, PAPER_GFLOPS)),
    })
}

/// Writes `stage1.pgm` .. `stage4.pgm`; returns their paths.
pub fn cmd_dump_features(checkpoint: &Path, image: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut net = LucfNet::new(&ckpt.config.model, ckpt.config.seed)?;
    ckpt.load_into(&mut net)?;
    let img = lucf::data::io::load_image(image, net.cfg.in_channels)?;
    let shape = img.shape().to_vec();
    let x = img.reshaped(&[1, shape[0], shape[1], shape[2]])?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut paths = Vec::new();
    for stage in 1..=4 {
        let map = net.dump_features(&x, stage, Mode::Eval)?;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let path = out.join(format!("stage{stage}.pgm"));
        write_pgm(&path, map.data(), h, w)?;
        paths.push(path);
    }
    Ok(paths)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = base_config(&a.common)?;
            let d = &mut cfg.dataset;
            if let Some(v) = a.num_samples {
                d.num_samples = v;
            }
            if let Some(v) = a.size {
                d.size = v;
            }
            if let Some(v) = a.classes {
                d.num_classes = v;
            }
            if let Some(v) = a.family {
                d.shape_family = v;
            }
            if let Some(v) = a.noise {
                d.noise_sigma = v;
            }
            let n = cmd_synth(&cfg, &a.out, a.force)?;
            println!("wrote {n} samples to {}", a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = base_config(&a.common)?;
            let t = &mut cfg.train;
            a.model.apply(&mut t.model);
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.lr {
                t.optim.lr = v;
            }
            if let Some(spec) = &a.loss {
                t.loss = t.loss.clone().with_terms(spec).map_err(usage)?;
            }
            if a.no_augment {
                t.augment = false;
            }
            if let Some(v) = a.checkpoint_every {
                cfg.checkpoint_every = v;
            }
            if a.resume && a.hybrid_weight.len() > 1 {
                return Err(usage("--resume takes a single run"));
            }
            for o in cmd_train_grid(&cfg, &a.hybrid_weight, &a.data, &a.out, a.stop_at, a.resume, a.force)? {
                let loss = o.final_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
                println!("{}: {} iterations, final loss {loss}", o.out.display(), o.iterations);
            }
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(v) = a.metrics {
                cfg.eval.hd_variant = v;
            }
            if let Some(v) = a.batch_size {
                cfg.eval.batch_size = v;
            }
            let r = cmd_eval(&cfg, &a.checkpoint, &a.data, &a.out)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&r.summary_json()).expect("json"));
            } else {
                let hd = r.hd_variant.label();
                println!("mean dsc {:.4}  iou {:.4}  {hd} {:.4}", r.mean_dsc, r.mean_iou, r.mean_hd);
                for (k, ((d, i), h)) in r.per_class_dsc.iter().zip(&r.per_class_iou).zip(&r.per_class_hd).enumerate() {
                    println!("class {}: dsc {d:.4}  iou {i:.4}  {hd} {h:.4}", k + 1);
                }
            }
        }
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&a)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("json"));
            } else {
                print!("{}", report.to_text());
            }
            if !report.passed() {
                let names: Vec<_> = report.failures().map(|r| r.name).collect();
                return Err(CliError::Failure(format!("gradient check failed: {}", names.join(", "))));
            }
        }
        Command::Summary(a) => {
            let cfg = base_config(&a.common)?;
            let mut model = if a.paper_preset {
                ModelConfig::paper_preset()
            } else {
                ModelConfig {
                    input_size: (224, 224),
                    ..cfg.train.model
                }
            };
            a.model.apply(&mut model);
            let s = cmd_summary(&model, a.paper_preset)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&s).expect("json"));
            } else {
                print!("{s}");
            }
        }
        Command::DumpFeatures(a) => {
            for p in cmd_dump_features(&a.checkpoint, &a.image, &a.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
