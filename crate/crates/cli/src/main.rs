mod run_config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hd2s::data::image_io::{to_bytes, write_gray8};
use hd2s::data::{generate_synthetic, load_checkpoint, Dataset, DatasetManifest, DiskVideo, Style, SyntheticSpec};
use hd2s::model::InferenceOptions;
use hd2s::train::{evaluate, EvalOptions, Regime, TrainData, Trainer};
use hd2s::{DomainTag, Error, Hd2s};

use run_config::RunConfig;

/// Overrides the directory that relative output paths are resolved against.
const OUT_ROOT_VAR: &str = "HD2S_OUT_ROOT";

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_INGESTION: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Parser)]
#[command(name = "hd2s", version, about = "Hierarchical video saliency training and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic saliency dataset.
    Synth(SynthArgs),
    /// Train a model in one of the three regimes.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a per-frame metric report.
    Eval(EvalArgs),
    /// Write one saliency map per frame of a video.
    Infer(InferArgs),
    /// Train and evaluate a model restricted to a subset of branches.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    A,
    B,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 48)]
    length: usize,
    /// Frame size as HEIGHTxWIDTH.
    #[arg(long, default_value = "32x48")]
    size: String,
    #[arg(long, value_enum, ignore_case = true, default_value_t = StyleArg::A)]
    style: StyleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    domain: u16,
    /// Standard deviation of the ground-truth density, in pixels.
    #[arg(long)]
    gt_sigma: Option<f64>,
}

#[derive(Args)]
struct TrainSource {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue training the model stored in this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainSource,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Comma-separated dataset directories for domain-specific training.
    #[arg(long, value_delimiter = ',')]
    datasets: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Domain used for domain-specific layers; defaults to the dataset's tag.
    #[arg(long)]
    domain: Option<u16>,
    /// Evenly spaced frames per video; 0 evaluates all frames.
    #[arg(long, default_value_t = 0)]
    frames: usize,
    #[arg(long, default_value_t = 10)]
    shuffles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PGM/PPM frames, read in file-name order.
    #[arg(long)]
    video_dir: PathBuf,
    #[arg(long)]
    out_maps: PathBuf,
    #[arg(long, default_value_t = 0)]
    domain: u16,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: TrainSource,
    /// Comma-separated 1-based branch indices, e.g. `4` or `1,2,3,4`.
    #[arg(long, value_delimiter = ',', required = true)]
    branches: Vec<usize>,
}

enum Failure {
    Usage(String),
    Core(Error),
    Write(PathBuf, io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Mode(_) => EXIT_CONFIG,
                Error::Ingestion { .. } | Error::Io { .. } | Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => {
                    EXIT_INGESTION
                }
                _ => EXIT_RUNTIME,
            },
            Failure::Write(..) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Write(p, e) => write!(f, "cannot write {}: {e}", p.display()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Write(dir.to_path_buf(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Write(path.to_path_buf(), e))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Core(Error::config(format!("size `{s}` is not HEIGHTxWIDTH")));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn synth(a: SynthArgs) -> CmdResult {
    let (height, width) = parse_size(&a.size)?;
    let mut spec = SyntheticSpec {
        videos: a.videos,
        length: a.length,
        height,
        width,
        style: match a.style {
            StyleArg::A => Style::A,
            StyleArg::B => Style::B,
        },
        domain: DomainTag(a.domain),
        ..SyntheticSpec::default()
    };
    if let Some(s) = a.gt_sigma {
        spec.gt_sigma = s;
    }
    let out = out_path(&a.out);
    let m = generate_synthetic(&spec, a.seed, &out)?;
    println!("wrote {} videos to {}", m.videos.len(), out.display());
    Ok(())
}

fn load_run_config(common: &TrainSource) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::ingest(p, e))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::preset("desk")?,
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(s) = &common.source {
        cfg.source = Some(s.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(i) = &common.init {
        cfg.init = Some(i.clone());
    }
    Ok(cfg)
}

fn open_dataset(cfg: &RunConfig, root: &Path) -> hd2s::Result<Dataset> {
    let m = &cfg.model;
    Dataset::open(root, m.input_channels, m.input_height, m.input_width)
}

/// Splits off the held-out validation videos of a dataset.
fn split(data: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let (train, val) = data.manifest.split_validation(seed);
    (data.restrict(&train), data.restrict(&val))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> std::result::Result<&'a PathBuf, Failure> {
    p.as_ref().ok_or_else(|| Failure::Usage(format!("{what} is required")))
}

/// Trains according to `cfg` and writes the resolved config, log and
/// checkpoints into its output directory. Returns the trained model and the
/// validation sets.
fn run_training(mut cfg: RunConfig) -> std::result::Result<(Hd2s, Vec<Dataset>, PathBuf), Failure> {
    let initial = match &cfg.init {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::ingest(p, e))?;
            let (model, _) = load_checkpoint(&bytes)?;
            cfg.model = model.config().clone();
            Some(model)
        }
        None => {
            cfg.align_variant();
            None
        }
    };
    let out = out_path(require(&cfg.out, "--out")?);
    let seed = cfg.plan.seed;
    let mut train_sets = Vec::new();
    let mut target = None;
    match cfg.plan.regime {
        Regime::Supervised | Regime::Da => {
            let src = open_dataset(&cfg, require(&cfg.source, "--source")?)?;
            train_sets.push(src);
            if cfg.plan.regime == Regime::Da {
                let t = require(&cfg.target, "--target (the da regime)")?;
                target = Some(open_dataset(&cfg, t)?);
            }
        }
        Regime::Dsl => {
            if cfg.datasets.len() < 2 {
                return Err(Failure::Usage("the dsl regime needs --datasets with at least two entries".into()));
            }
            for p in &cfg.datasets {
                train_sets.push(open_dataset(&cfg, p)?);
            }
            if initial.is_none() {
                let top = train_sets.iter().map(|d| d.manifest.domain.0 as usize + 1).max().unwrap_or(1);
                cfg.model.domain_count = cfg.model.domain_count.max(top);
            }
        }
    }
    cfg.validate()?;
    write_file(&out.join("run.cfg"), cfg.to_text().as_bytes())?;

    let (train, val): (Vec<Dataset>, Vec<Dataset>) = train_sets.iter().map(|d| split(d, seed)).unzip();
    let val: Vec<Dataset> = val.into_iter().filter(|d| !d.is_empty()).collect();
    let data = match (cfg.plan.regime, &target) {
        (Regime::Supervised, _) => TrainData::Supervised(&train[0]),
        (Regime::Da, Some(t)) => TrainData::Da { source: &train[0], target: t },
        (Regime::Dsl, _) => TrainData::Dsl(&train),
        (Regime::Da, None) => unreachable!("target checked above"),
    };
    let model = match initial {
        Some(m) => m,
        None => Hd2s::new(cfg.model.clone())?,
    };
    let mut trainer = Trainer::new(model, cfg.plan.clone())?;
    let log_path = out.join("train.log");
    let mut log = Vec::new();
    let val_refs: Vec<&Dataset> = val.iter().collect();
    let mut save = |it: usize, bytes: &[u8]| -> hd2s::Result<()> {
        let p = out.join(format!("checkpoint_{it:06}.ckpt"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let summary = trainer.run(data, &val_refs, &mut log, &mut save)?;
    write_file(&log_path, &log)?;
    write_file(&out.join("model.ckpt"), &trainer.checkpoint())?;
    if let Some((it, nss, bytes)) = &summary.best {
        write_file(&out.join("best.ckpt"), bytes)?;
        println!("best validation NSS {nss:.4} at iteration {it}");
    }
    if let Some(last) = summary.history.last() {
        println!("{last}");
    }
    println!("outputs in {}", out.display());
    Ok((trainer.model, val, out))
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_run_config(&a.common)?;
    if let Some(r) = &a.regime {
        cfg.plan.regime = r.parse()?;
    }
    if let Some(t) = &a.target {
        cfg.target = Some(t.clone());
    }
    if !a.datasets.is_empty() {
        cfg.datasets = a.datasets.clone();
    }
    run_training(cfg).map(|_| ())
}

fn eval(a: EvalArgs) -> CmdResult {
    let bytes = fs::read(&a.checkpoint).map_err(|e| Error::ingest(&a.checkpoint, e))?;
    let (mut model, _) = load_checkpoint(&bytes)?;
    let c = model.config().clone();
    let manifest = DatasetManifest::load(&a.dataset)?;
    let data = Dataset::load(&manifest, c.input_channels, c.input_height, c.input_width)?;
    let domain = a.domain.map(DomainTag).unwrap_or(manifest.domain);
    let opts = EvalOptions {
        shuffles: a.shuffles,
        seed: a.seed,
        frames_per_video: a.frames,
        inference: InferenceOptions::default(),
    };
    let record = evaluate(&mut model, &data, domain, &opts)?;
    write_file(&out_path(&a.report), record.to_csv().as_bytes())?;
    print_summary(&record);
    Ok(())
}

fn print_summary(record: &hd2s::metrics::EvalRecord) {
    let mut line = String::new();
    for (name, s) in hd2s::metrics::METRIC_NAMES.iter().zip(record.aggregate()) {
        match s.mean {
            Some(m) => line.push_str(&format!("{name} {m:.4}  ")),
            None => line.push_str(&format!("{name} -  ")),
        }
    }
    println!("{}", line.trim_end());
}

fn infer(a: InferArgs) -> CmdResult {
    let bytes = fs::read(&a.checkpoint).map_err(|e| Error::ingest(&a.checkpoint, e))?;
    let (mut model, _) = load_checkpoint(&bytes)?;
    let c = model.config().clone();
    let video = DiskVideo::from_dir(&a.video_dir, c.input_channels, c.input_height, c.input_width)?;
    let maps = model.predict_video(&video, DomainTag(a.domain), InferenceOptions::default())?;
    let out = out_path(&a.out_maps);
    fs::create_dir_all(&out).map_err(|e| Failure::Write(out.clone(), e))?;
    for (i, m) in maps.iter().enumerate() {
        let max = m.data().iter().cloned().fold(0.0f32, f32::max);
        let scaled: Vec<f32> = m.data().iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
        write_gray8(&out.join(format!("{i:06}.pgm")), c.input_height, c.input_width, &to_bytes(&scaled))?;
    }
    println!("wrote {} maps to {}", maps.len(), out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> CmdResult {
    let mut cfg = load_run_config(&a.common)?;
    cfg.plan.regime = Regime::Supervised;
    cfg.model.branches = a.branches.clone();
    let frames = cfg.plan.validation_frames;
    let seed = cfg.plan.seed;
    let (mut model, val, out) = run_training(cfg)?;
    let Some(val) = val.first() else {
        return Err(Failure::Usage("ablation needs a source with at least two videos for validation".into()));
    };
    let opts = EvalOptions {
        frames_per_video: frames,
        seed,
        ..EvalOptions::default()
    };
    let record = evaluate(&mut model, val, val.manifest.domain, &opts)?;
    write_file(&out.join("report.csv"), record.to_csv().as_bytes())?;
    let branches: Vec<String> = a.branches.iter().map(|b| b.to_string()).collect();
    print!("branches {}: ", branches.join(","));
    print_summary(&record);
    let _ = io::stdout().flush();
    Ok(())
}
