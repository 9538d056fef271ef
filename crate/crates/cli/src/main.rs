//! `bido` — convert Android byte streams into RGB images, generate synthetic
//! corpora, and train/evaluate the hybrid detector.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 i/o error,
//! 4 numerical divergence.

mod config_file;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bido_core::config::{DecisionHead, FusionKind, ModelVariant, TrainConfig};
use bido_core::corpus::{
    self, parse_transforms, CorpusError, CorpusManifest, CorpusParams, LoadedSample,
    ObfuscationTransform,
};
use bido_core::dex::{extract_index_bytes, verify_checksum, DexHeader};
use bido_core::fusion::{ops_matrix, svd_analysis};
use bido_core::imaging::{self, ImageGeometry};
use bido_core::tensor::TensorError;
use bido_core::train::{
    self, evaluate, history_to_jsonl, load_model, run_fusion_comparison, run_k_sweep, save_model,
    BidoModel, TrainError,
};

use config_file::FileConfig;

const EXIT_INPUT: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl ToString) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.to_string(),
        }
    }

    fn io(message: impl ToString) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.to_string(),
        }
    }

    fn numeric(message: impl ToString) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.to_string(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match &e {
            CorpusError::Io(_) => CliError::io(e),
            CorpusError::Image(imaging::ImageError::EncodeFailure(_)) => CliError::io(e),
            _ => CliError::input(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::numeric(e)
            }
            TrainError::Io(_) | TrainError::Checkpoint(_) => CliError::io(e),
            _ => CliError::input(e),
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(
    name = "bido",
    version,
    about = "Hybrid image-based Android malware detection pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert DEX or manifest byte streams into RGB images.
    Convert(ConvertArgs),
    /// Generate a labeled synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the detector (or run a sweep harness).
    Train(TrainArgs),
    /// Evaluate a trained model on a corpus.
    Eval(EvalArgs),
    /// Dump header, index spans, and the fused-space spectrum of a DEX file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputKind {
    Dex,
    Xml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Png,
    Jpeg,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// How to read the inputs.
    #[arg(long, value_enum)]
    kind: InputKind,
    /// Output path (single input only).
    #[arg(short, long, conflicts_with = "out_dir")]
    output: Option<PathBuf>,
    /// Output directory for batch conversion.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, value_enum, default_value = "png")]
    format: OutputFormat,
    /// Verify the DEX checksum before converting.
    #[arg(long)]
    strict: bool,
    /// Worker threads for batch conversion.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    malicious_frac: Option<f64>,
    /// Motif strength p in [0, 1].
    #[arg(long)]
    motif_strength: Option<f64>,
    /// Drift parameter t >= 0.
    #[arg(long)]
    drift: Option<f64>,
    /// Obfuscation transforms, e.g. `junk:0.4,encrypt:171,rename:7,realign:16`.
    #[arg(long)]
    transforms: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Config file supplying defaults for the knobs above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for sample generation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from gen-corpus).
    #[arg(long)]
    corpus: PathBuf,
    /// Config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.bido")]
    out: PathBuf,
    /// Write per-epoch history as JSON lines here.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Write the sweep report (or training summary) here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Contrastive weight (0 disables the learnable metric).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<CliFusion>,
    #[arg(long, value_enum)]
    variant: Option<CliVariant>,
    #[arg(long, value_enum)]
    decision: Option<CliDecision>,

    /// Run the local-feature-map count sweep instead of a single training.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sweep_k: Option<Vec<usize>>,
    /// Run the fusion comparison (ops, summation, concatenation) instead of
    /// a single training.
    #[arg(long)]
    sweep_fusion: bool,
    /// Seeds for --sweep-fusion.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Separate corpus to evaluate on during --sweep-fusion.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliFusion {
    Ops,
    Summation,
    Concatenation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliVariant {
    Full,
    DexOnly,
    XmlOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliDecision {
    Ops,
    Average,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint (expects the `.meta.json` sidecar next to it).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Which part of the corpus to evaluate, under the model's own split.
    #[arg(long, value_enum, default_value = "test")]
    split: CliSplit,
    /// Obfuscate the DEX streams before imaging, e.g. `encrypt:90,junk:0.5`.
    #[arg(long)]
    obfuscate: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct InspectArgs {
    /// DEX file to inspect.
    input: PathBuf,
    /// Emit JSON instead of plain text.
    #[arg(long)]
    json: bool,
    /// Verify the header checksum.
    #[arg(long)]
    strict: bool,
    /// Companion manifest: adds the fused-space singular spectrum computed
    /// with a seed-initialized (or loaded) model.
    #[arg(long)]
    xml: Option<PathBuf>,
    /// Model checkpoint for the spectrum; fresh seeded weights otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Spectrum rank.
    #[arg(long, default_value_t = 8)]
    rank: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert(args) => cmd_convert(args),
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Seed precedence: flag, then config file, then BIDO_SEED, then 0.
fn env_seed() -> Option<u64> {
    std::env::var("BIDO_SEED").ok().and_then(|v| v.parse().ok())
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            FileConfig::parse(&text).map_err(CliError::input)
        }
    }
}

/// Run `f` over the indices `0..n` on `jobs` threads, results in index order.
fn parallel_indexed<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.max(1).min(n.max(1));
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs: Vec<std::sync::Mutex<&mut Option<T>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                **slot_refs[i].lock().unwrap() = Some(value);
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

fn cmd_convert(args: ConvertArgs) -> Result<(), CliError> {
    let geometry =
        ImageGeometry::new(args.width, args.height).map_err(CliError::input)?;
    if args.inputs.len() > 1 && args.output.is_some() {
        return Err(CliError::input(
            "--output only works with a single input; use --out-dir for batches",
        ));
    }
    let format = match args.format {
        OutputFormat::Png => imaging::ImageFormat::LosslessPng,
        OutputFormat::Jpeg => imaging::ImageFormat::Jpeg,
    };
    let ext = match args.format {
        OutputFormat::Png => "png",
        OutputFormat::Jpeg => "jpg",
    };

    let convert_one = |input: &PathBuf| -> Result<(), CliError> {
        let raw = read_input(input)?;
        let bytes = match args.kind {
            InputKind::Dex => {
                let header = DexHeader::parse(&raw).map_err(CliError::input)?;
                if args.strict {
                    verify_checksum(&raw, &header).map_err(CliError::input)?;
                }
                extract_index_bytes(&raw, &header)
                    .map_err(CliError::input)?
                    .bytes
            }
            InputKind::Xml => raw,
        };
        let image = imaging::pack_rgb(&bytes, geometry);
        let encoded = imaging::encode_image(&image, format)
            .map_err(|e| CliError::io(format!("{}: {e}", input.display())))?;
        let out_path = match (&args.output, &args.out_dir) {
            (Some(path), _) => path.clone(),
            (None, Some(dir)) => dir.join(
                input
                    .file_name()
                    .map(|n| format!("{}.{ext}", n.to_string_lossy()))
                    .unwrap_or_else(|| format!("out.{ext}")),
            ),
            (None, None) => input.with_extension(ext),
        };
        write_output(&out_path, &encoded)
    };

    let results = parallel_indexed(args.inputs.len(), args.jobs, |i| convert_one(&args.inputs[i]));
    for r in results {
        r?;
    }
    Ok(())
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let mut params = CorpusParams::desk_default(64, env_seed().unwrap_or(0));
    file.apply_corpus(&mut params).map_err(CliError::input)?;
    if let Some(n) = args.n {
        params.n = n;
    }
    if let Some(f) = args.malicious_frac {
        params.malicious_fraction = f;
    }
    if let Some(p) = args.motif_strength {
        params.motif_strength = p;
    }
    if let Some(t) = args.drift {
        params.drift = t;
    }
    if let Some(s) = &args.transforms {
        params.transforms = parse_transforms(s).map_err(CliError::input)?;
    }
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if args.width.is_some() || args.height.is_some() {
        params.geometry = ImageGeometry::new(
            args.width.unwrap_or(params.geometry.width),
            args.height.unwrap_or(params.geometry.height),
        )
        .map_err(CliError::input)?;
    }
    if !(0.0..=1.0).contains(&params.malicious_fraction) {
        return Err(CliError::input(format!(
            "malicious fraction {} outside [0, 1]",
            params.malicious_fraction
        )));
    }

    let samples = parallel_indexed(params.n, args.jobs, |i| corpus::generate_sample(&params, i));
    let samples: Result<Vec<_>, _> = samples.into_iter().collect();
    let manifest = corpus::write_corpus_samples(&params, &args.out, &samples?)?;
    println!(
        "{}",
        serde_json::json!({
            "corpus": args.out,
            "samples": manifest.records.len(),
            "seed": params.seed,
            "drift": params.drift,
            "transforms": params.transforms,
        })
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let file = load_file_config(&args.config)?;
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed() {
        cfg.seed = seed;
    }
    file.apply_train(&mut cfg).map_err(CliError::input)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.rank {
        cfg.rank = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.delta {
        cfg.weights.delta = v;
    }
    if let Some(v) = args.fusion {
        cfg.fusion = match v {
            CliFusion::Ops => FusionKind::Ops,
            CliFusion::Summation => FusionKind::Summation,
            CliFusion::Concatenation => FusionKind::Concatenation,
        };
    }
    if let Some(v) = args.variant {
        cfg.variant = match v {
            CliVariant::Full => ModelVariant::Full,
            CliVariant::DexOnly => ModelVariant::DexOnly,
            CliVariant::XmlOnly => ModelVariant::XmlOnly,
        };
    }
    if let Some(v) = args.decision {
        cfg.decision = match v {
            CliDecision::Ops => DecisionHead::Ops,
            CliDecision::Average => DecisionHead::Average,
        };
    }
    cfg.validate().map_err(CliError::input)?;
    Ok(cfg)
}

fn load_corpus_samples(dir: &Path) -> Result<Vec<LoadedSample>, CliError> {
    let manifest = CorpusManifest::load(dir)?;
    Ok(corpus::load_samples(&manifest)?)
}

fn emit_report(report: &str, path: &Option<PathBuf>) -> Result<(), CliError> {
    match path {
        Some(p) => write_output(p, report.as_bytes()),
        None => {
            println!("{report}");
            Ok(())
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args)?;
    let samples = load_corpus_samples(&args.corpus)?;

    if let Some(ks) = &args.sweep_k {
        let report = run_k_sweep(&samples, &cfg, ks)?;
        return emit_report(&serde_json::to_string_pretty(&report).unwrap(), &args.report);
    }
    if args.sweep_fusion {
        let eval_samples = match &args.eval_corpus {
            Some(dir) => Some(load_corpus_samples(dir)?),
            None => None,
        };
        let report =
            run_fusion_comparison(&samples, eval_samples.as_deref(), &cfg, &args.seeds)?;
        return emit_report(&serde_json::to_string_pretty(&report).unwrap(), &args.report);
    }

    let outcome = train::train(&samples, &cfg)?;
    save_model(&outcome.model, &args.out)?;
    if let Some(history_path) = &args.history {
        write_output(history_path, (history_to_jsonl(&outcome.history) + "\n").as_bytes())?;
    }
    let test_refs: Vec<&LoadedSample> =
        outcome.split.test.iter().map(|&i| &samples[i]).collect();
    let test_metrics = if test_refs.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.model, &test_refs)?)
    };
    let summary = serde_json::json!({
        "model": args.out,
        "epochs": outcome.history.len(),
        "final": outcome.history.last(),
        "test": test_metrics,
    });
    emit_report(&serde_json::to_string_pretty(&summary).unwrap(), &args.report)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let manifest = CorpusManifest::load(&args.corpus)?;
    let transforms: Vec<ObfuscationTransform> = match &args.obfuscate {
        Some(s) => parse_transforms(s).map_err(CliError::input)?,
        None => Vec::new(),
    };
    let samples = corpus::load_samples_with_transforms(&manifest, &transforms)?;
    let split = train::split_corpus(samples.len(), model.cfg.seed);
    let indices: Vec<usize> = match args.split {
        CliSplit::Train => split.train,
        CliSplit::Val => split.val,
        CliSplit::Test => split.test,
        CliSplit::All => (0..samples.len()).collect(),
    };
    let refs: Vec<&LoadedSample> = indices.iter().map(|&i| &samples[i]).collect();
    let metrics = evaluate(&model, &refs)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "corpus": args.corpus,
            "split": format!("{:?}", args.split).to_lowercase(),
            "samples": refs.len(),
            "obfuscate": transforms,
            "metrics": metrics,
        }))
        .unwrap()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let raw = read_input(&args.input)?;
    let header = DexHeader::parse(&raw).map_err(CliError::input)?;
    if args.strict {
        verify_checksum(&raw, &header).map_err(CliError::input)?;
    }
    let spans = header.index_spans();
    let index = extract_index_bytes(&raw, &header).map_err(CliError::input)?;

    let spectrum = match &args.xml {
        Some(xml_path) => {
            let xml = read_input(xml_path)?;
            let model = match &args.model {
                Some(path) => load_model(path)?,
                None => {
                    let cfg = TrainConfig {
                        seed: args.seed.or_else(env_seed).unwrap_or(0),
                        ..TrainConfig::default()
                    };
                    BidoModel::init(&cfg)?
                }
            };
            let geometry = model.cfg.geometry;
            let sample = LoadedSample {
                id: args.input.display().to_string(),
                label: bido_core::corpus::Label::Benign,
                dex_img: imaging::pack_rgb(&index.bytes, geometry),
                xml_img: imaging::xml_to_image(&xml, geometry),
            };
            let embeddings = model.embeddings(&sample)?;
            let (zx, zd) = (
                embeddings.z_xml.expect("full model emits z_xml"),
                embeddings.z_dex.expect("full model emits z_dex"),
            );
            let d = ops_matrix(&zx, &zd);
            let rank = args.rank.min(zx.len()).min(zd.len()).max(1);
            Some(svd_analysis(&d, rank).map_err(TrainError::from)?)
        }
        None => None,
    };

    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "header": header,
                "spans": spans,
                "index_bytes": index.bytes.len(),
                "checksum_verified": args.strict,
                "spectrum": spectrum,
            }))
            .unwrap()
        );
    } else {
        println!("file: {}", args.input.display());
        println!(
            "magic: {:?}  file_size: {}  checksum: {:#010x}{}",
            String::from_utf8_lossy(&header.magic),
            header.file_size,
            header.checksum,
            if args.strict { " (verified)" } else { "" }
        );
        println!("index sections ({} bytes total):", index.bytes.len());
        for span in &spans {
            println!(
                "  {:<10} offset {:>8}  length {:>8}",
                format!("{:?}", span.section),
                span.offset,
                span.length
            );
        }
        if let Some(s) = &spectrum {
            println!(
                "fused-space singular values: {:?} (numerical rank {})",
                s.singular_values, s.numerical_rank
            );
        }
    }
    Ok(())
}
