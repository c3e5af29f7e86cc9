//! Command-line front end: train, eval, export, stats, bench, gradcheck.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! command fails at run time: missing data, I/O, a non-finite loss or a
//! failed gradient check.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdbnn::autograd::gradcheck::GradcheckOptions;
use sdbnn::autograd::SteKind;
use sdbnn::bitkernel::bench::{self, BenchCase, BenchConfig};
use sdbnn::data::{self, Dataset, DatasetKind, DatasetSource, Normalization, Split};
use sdbnn::models::{ForwardPath, Model, ModelSpec, PackedNet};
use sdbnn::tensor::{BnMode, Tensor};
use sdbnn::trainer::{self, evaluate, evaluate_packed, EvalResult, Trainer};
use sdbnn::Error;

use config::{parse_sweep, sweep_grid, RunConfig, RUN_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.sdck";
pub const PACKED_FILE: &str = "model.sdbn";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(m: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(m.into()))
}

fn key_help() -> String {
    let mut s = String::from("Config keys (key=value, one per line; unknown keys are rejected):\n");
    for (k, v) in RUN_KEYS {
        s.push_str(&format!("  {k:<16} {v}\n"));
    }
    s.push_str("  optimizer block: ");
    s.push_str(&sdbnn::trainer::OptimConfig::KEYS.join(", "));
    s.push_str("\n  (optimizer=sgd|adam, schedule=constant|cosine|step:<e1>/<e2>:<gamma>)\n");
    s
}

#[derive(Parser, Debug)]
#[command(name = "sdbnn", version, about = "Binary neural networks with self-distribution factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root containing mnist/ or cifar-10-batches-bin/.
    #[arg(long, env = data::ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Skip the file digest and size checks (for fixtures and subsets).
    #[arg(long)]
    no_verify: bool,
}

impl DataArgs {
    fn root(&self, configured: Option<&Path>) -> PathBuf {
        data::resolve_root(configured.or(self.data_root.as_deref()))
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config, metric log, checkpoint and packed model.
    #[command(after_help = key_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's checkpoint when there is one.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs (the schedule still spans `epochs`).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Run a grid: key=v1,v2 (repeatable; the grid is the cartesian product).
        #[arg(long, value_name = "KEY=V1,V2")]
        sweep: Vec<String>,
    },
    /// Evaluate a checkpoint or packed model and print the accuracy.
    Eval {
        #[arg(long, conflicts_with = "packed", required_unless_present = "packed")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        packed: Option<PathBuf>,
        /// surrogate or packed.
        #[arg(long, default_value = "surrogate")]
        path: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use only the first N items.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the inference-only packed model of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer sign statistics of the binary layers.
    Stats {
        /// Trained model; without it an untrained model is built from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Only these layers (comma separated).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Add a constant to one layer's shifted activations: LAYER=VALUE (repeatable).
        #[arg(long, value_name = "LAYER=VALUE")]
        inject: Vec<String>,
        /// Standard normal inputs instead of dataset images.
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Latency of the binary convolution against float convolutions.
    Bench {
        /// Case as NxCIN->COUTxSIZE..., see the report for the format (repeatable).
        #[arg(long)]
        case: Vec<String>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 9)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter gradient in 64-bit mode.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "twoblock")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = trainer::DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Negative control: use this estimator in backward only.
        #[arg(long)]
        wrong_ste: Option<String>,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { EXIT_OK };
                }
                _ => EXIT_USAGE,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Train { cfg, data, out: out_dir, resume, stop_after, sweep } => {
            let mut base = load_config(&cfg)?;
            if let Some(o) = out_dir {
                base.out_dir = o;
            }
            let sweeps = sweep.iter().map(|s| parse_sweep(s)).collect::<sdbnn::Result<Vec<_>>>().map_err(as_usage)?;
            if sweeps.is_empty() {
                return cmd_train(&base, &data, resume, stop_after, out);
            }
            let parent = base.out_dir.join(&base.name);
            for assignment in sweep_grid(&sweeps) {
                let mut c = base.clone();
                let mut tag = Vec::new();
                for (k, v) in &assignment {
                    c.set(k, v).map_err(as_usage)?;
                    tag.push(format!("{k}={v}"));
                }
                c.validate().map_err(as_usage)?;
                c.out_dir = parent.clone();
                c.name = tag.join(",");
                cmd_train(&c, &data, resume, stop_after, out)?;
            }
            Ok(())
        }
        Command::Eval { checkpoint, packed, path, split, limit, batch_size, data } => {
            let path: ForwardPath = path.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            let split = parse_split(&split)?;
            if batch_size == 0 {
                return usage("batch size must be at least 1");
            }
            let root = data.root(None);
            let verify = !data.no_verify;
            let r = match (checkpoint, packed) {
                (Some(ck), _) => {
                    let mut t = trainer::read_checkpoint(&ck, None)?;
                    let ds = load_split(dataset_for(t.model.spec())?, &root, split, limit, verify)?;
                    let norm = t.norm.clone();
                    evaluate(&mut t.model, &ds, &norm, path, batch_size)?
                }
                (None, Some(p)) => {
                    if path == ForwardPath::Surrogate {
                        return usage("a packed model only has the packed path; pass --path packed");
                    }
                    let file = trainer::read_packed(&p)?;
                    let ds = load_split(dataset_for(&file.net.spec)?, &root, split, limit, verify)?;
                    evaluate_packed(&file.net, &ds, &file.norm, batch_size)?
                }
                (None, None) => return usage("pass --checkpoint or --packed"),
            };
            writeln!(out, "{}", eval_line(path, &r))?;
            Ok(())
        }
        Command::Export { checkpoint, out: dest } => {
            let t = trainer::read_checkpoint(&checkpoint, None)?;
            let bytes = trainer::export_packed(&t.model, &t.norm)?;
            fs::write(&dest, &bytes)?;
            writeln!(out, "{}", payload_line(&PackedNet::from_model(&t.model)?, bytes.len()))?;
            Ok(())
        }
        Command::Stats { checkpoint, cfg, layers, inject, random, batch, seed, data } => {
            let (mut model, norm, kind) = match checkpoint {
                Some(ck) => {
                    if cfg.config.is_some() || !cfg.set.is_empty() {
                        return usage("--config/--set build an untrained model and cannot be combined with --checkpoint");
                    }
                    let t = trainer::read_checkpoint(&ck, None)?;
                    let kind = dataset_for(t.model.spec())?;
                    (t.model, Some(t.norm), kind)
                }
                None => {
                    let c = load_config(&cfg)?;
                    (Model::build(&c.spec().map_err(as_usage)?, c.optim.seed)?, c.norm.clone(), c.dataset)
                }
            };
            let inject = inject
                .iter()
                .map(|s| {
                    let (l, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--inject {s:?} is not LAYER=VALUE")))?;
                    let v: f64 = v.parse().map_err(|_| CliError::Usage(format!("--inject value {v:?} is not a number")))?;
                    Ok((l.to_string(), v))
                })
                .collect::<CliResult<Vec<_>>>()?;
            if batch == 0 {
                return usage("batch must be at least 1");
            }
            let x = if random {
                let [c, h, w] = model.spec().input;
                Tensor::randn([batch, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
            } else {
                let root = data.root(None);
                let verify = !data.no_verify;
                let ds = load_split(kind, &root, Split::Test, Some(batch), verify)?;
                let norm = match norm {
                    Some(n) => n,
                    None => Normalization::compute(&load_split(kind, &root, Split::Train, None, verify)?)?,
                };
                norm.apply(&ds.gather(&(0..ds.len()).collect::<Vec<_>>()))?
            };
            for l in &layers {
                if !model.spec().binary_layers().any(|(n, _, _)| n == l) {
                    return usage(format!("{l:?} is not a binary layer"));
                }
            }
            for s in model.sign_stats_with(x, BnMode::Eval, &inject)? {
                if layers.is_empty() || layers.contains(&s.layer) {
                    writeln!(out, "{}", s.to_line())?;
                }
            }
            Ok(())
        }
        Command::Bench { case, warmup, repetitions, seed } => {
            let cases = if case.is_empty() {
                vec![BenchCase::smoke()]
            } else {
                case.iter().map(|c| c.parse()).collect::<sdbnn::Result<Vec<BenchCase>>>().map_err(|e| CliError::Usage(e.to_string()))?
            };
            if repetitions == 0 {
                return usage("repetitions must be at least 1");
            }
            let report = bench::run(&BenchConfig { cases, warmup, repetitions, seed })?;
            write!(out, "{}", report.to_text())?;
            Ok(())
        }
        Command::Gradcheck { cfg, preset, seed, batch, tol, eps, wrong_ste } => {
            let mut c = RunConfig { preset, ..RunConfig::default() };
            apply_config(&mut c, &cfg)?;
            let spec = c.spec().map_err(as_usage)?;
            let ste_backward_override = match wrong_ste {
                Some(s) => Some(s.parse::<SteKind>().map_err(|e| CliError::Usage(e.to_string()))?),
                None => None,
            };
            if batch == 0 || !(eps > 0.0) || !(tol > 0.0) {
                return usage("batch, eps and tol must be positive");
            }
            let opts = GradcheckOptions { eps, ste_backward_override, ..GradcheckOptions::default() };
            let r = trainer::gradcheck_model(&spec, seed, batch, &opts, tol)?;
            write!(out, "{}", r.to_text())?;
            if r.passes() {
                Ok(())
            } else {
                Err(CliError::Runtime(Error::State("gradient check failed".into())))
            }
        }
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => usage(format!("split must be train or test, got {s:?}")),
    }
}

fn apply_config(c: &mut RunConfig, args: &ConfigArgs) -> CliResult<()> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        *c = RunConfig::parse(&text).map_err(as_usage)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set {kv:?} is not KEY=VALUE")))?;
        c.set(k.trim(), v.trim()).map_err(as_usage)?;
    }
    Ok(())
}

/// Anything wrong with a requested configuration is the caller's mistake.
fn as_usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    apply_config(&mut c, args)?;
    c.validate().map_err(as_usage)?;
    Ok(c)
}

/// The dataset a model's input shape belongs to.
pub fn dataset_for(spec: &ModelSpec) -> sdbnn::Result<DatasetKind> {
    [DatasetKind::Mnist, DatasetKind::Cifar10]
        .into_iter()
        .find(|k| k.image_shape() == spec.input)
        .ok_or_else(|| Error::Unsupported(format!("no dataset has {:?} images", spec.input)))
}

fn load_split(kind: DatasetKind, root: &Path, split: Split, limit: Option<usize>, verify: bool) -> CliResult<Dataset> {
    let mut src = DatasetSource::new(kind, root, split);
    src.verify = verify;
    let ds = Dataset::load(&src).map_err(|e| match e {
        Error::Io(io) => CliError::Runtime(Error::Io(std::io::Error::new(
            io.kind(),
            format!("{kind} {split} split not found under {} ({io}); set --data-root or {}", root.display(), data::ROOT_ENV),
        ))),
        e => e.into(),
    })?;
    Ok(match limit {
        Some(n) if n > 0 => ds.truncated(n),
        _ => ds,
    })
}

pub fn eval_line(path: ForwardPath, r: &EvalResult) -> String {
    let p = match path {
        ForwardPath::Surrogate => "surrogate",
        ForwardPath::Packed => "packed",
    };
    format!("path={p} accuracy={} loss={:.6} correct={} total={}", r.percent(), r.loss, r.correct, r.total)
}

fn payload_line(net: &PackedNet, file_bytes: usize) -> String {
    let (bits, float_bits) = net.binary_payload();
    format!(
        "binary_payload_bits={bits} float_weight_bits={float_bits} ratio={:.5} file_bytes={file_bytes}",
        bits as f64 / float_bits.max(1) as f64
    )
}

fn cmd_train(
    cfg: &RunConfig,
    data: &DataArgs,
    resume: bool,
    stop_after: Option<usize>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let root = data.root(cfg.data_root.as_deref());
    let limit = |n: usize| (n > 0).then_some(n);
    let verify = !data.no_verify;
    let train = load_split(cfg.dataset, &root, Split::Train, limit(cfg.train_limit), verify)?;
    let test = load_split(cfg.dataset, &root, Split::Test, limit(cfg.test_limit), verify)?;
    let dir = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&dir)?;
    let spec = cfg.spec()?;
    let ck_path = dir.join(CHECKPOINT_FILE);

    let mut t = if resume && ck_path.exists() {
        let t = trainer::read_checkpoint(&ck_path, Some(&spec))?;
        if t.cfg != cfg.optim {
            return usage("the checkpoint was trained with different optimizer settings");
        }
        t
    } else {
        let norm = match &cfg.norm {
            Some(n) => n.clone(),
            None => Normalization::compute(&train)?,
        };
        Trainer::new(Model::build(&spec, cfg.optim.seed)?, cfg.optim.clone(), cfg.augment_config(), norm)?
    };
    let resolved = RunConfig { norm: Some(t.norm.clone()), ..cfg.clone() };
    fs::write(dir.join(CONFIG_FILE), resolved.to_text())?;

    let until = stop_after.unwrap_or(cfg.optim.epochs);
    let metrics = dir.join(METRICS_FILE);
    let result = t.run(&train, Some(&test), until, |t, m| {
        let mut log = t.state.log.join("\n");
        log.push('\n');
        fs::write(&metrics, log)?;
        trainer::write_checkpoint(&ck_path, t)?;
        let acc = m.test.map(|r| r.percent()).unwrap_or_default();
        let _ = writeln!(out, "run={} epoch={} train_loss={:.4} test_acc={acc}", cfg.name, m.epoch, m.train_loss);
        Ok(())
    });
    if let Err(e) = result {
        if let Error::NonFinite { .. } = &e {
            let _ = fs::write(dir.join("abort.txt"), e.to_string());
        }
        return Err(e.into());
    }
    let packed = trainer::export_packed(&t.model, &t.norm)?;
    fs::write(dir.join(PACKED_FILE), &packed)?;
    let norm = t.norm.clone();
    let r = evaluate(&mut t.model, &test, &norm, ForwardPath::Surrogate, cfg.eval_batch_size)?;
    writeln!(out, "run={} dir={} epochs={} {}", cfg.name, dir.display(), t.state.epoch, eval_line(ForwardPath::Surrogate, &r))?;
    Ok(())
}
