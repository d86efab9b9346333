//! `fsac`: synthesize anomalies, train and evaluate heads, score images,
//! render gradient maps, and aggregate run metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

use fsac::backbone::{BackendRegistry, EncoderBackend};
use fsac::checkpoint::Checkpoint;
use fsac::config::TrainConfig;
use fsac::data::{build_episode, load_manifest, load_mvtec, load_split, Episode, Manifest, Split};
use fsac::pipeline::{self, write_json};
use fsac::report::Summary;
use fsac::score::grad_map;
use fsac::synth;
use fsac::toy::{toy_corpus, write_corpus, ToyCorpusSpec};
use fsac::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.fsac";

#[derive(Parser, Debug)]
#[command(
    name = "fsac",
    version,
    about = "Few-shot anomaly classification on vision-language embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize anomalies from a class's training images.
    Synth(SynthArgs),
    /// Train a head per class and seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its class's test split.
    Eval(EvalArgs),
    /// Write per-image scores to CSV.
    Score(ScoreArgs),
    /// Write per-image gradient-map PNGs.
    Gradmap(GradmapArgs),
    /// Aggregate metrics.json files below a directory.
    Report(ReportArgs),
    /// Write a procedural toy dataset with a manifest.
    ToyData(ToyDataArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSON-lines manifest.
    #[arg(long, conflicts_with = "mvtec", required_unless_present = "mvtec")]
    manifest: Option<PathBuf>,
    /// Root of an MVTec-style directory tree.
    #[arg(long)]
    mvtec: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Manifest> {
        match (&self.manifest, &self.mvtec) {
            (Some(m), _) => load_manifest(m),
            (None, Some(root)) => load_mvtec(root),
            (None, None) => unreachable!("clap requires one of --manifest/--mvtec"),
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset (mvtec or visa).
    #[arg(long)]
    preset: Option<String>,
    /// Overrides a config field; dotted keys reach nested fields and the
    /// value is parsed as JSON when possible, e.g. `--set synth.method=perturb`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Single seed, replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Value> {
        let mut root = Value::Object(Map::new());
        if let Some(p) = &self.preset {
            root["preset"] = Value::String(p.clone());
        }
        if let Some(s) = self.seed {
            root["seeds"] = serde_json::json!([s]);
        }
        for item in &self.sets {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                if !slot.is_object() {
                    *slot = Value::Object(Map::new());
                }
                slot = slot.as_object_mut().expect("object").entry(part).or_insert(Value::Null);
            }
            *slot = value;
        }
        Ok(root)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        self.resolve_with(|_| {})
    }

    /// Resolves after letting `patch` adjust the command-line layer.
    fn resolve_with(&self, patch: impl FnOnce(&mut Value)) -> Result<TrainConfig> {
        let mut cli = self.overrides()?;
        patch(&mut cli);
        match &self.config {
            Some(path) => TrainConfig::load(path, &cli),
            None => TrainConfig::resolve(None, &cli),
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Class to synthesize for; all classes by default.
    #[arg(long = "class")]
    class_name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long = "class")]
    class_name: Option<String>,
    /// Shot count, overriding the config.
    #[arg(long)]
    k: Option<usize>,
    /// Also evaluate on the test split and write the report.
    #[arg(long)]
    evaluate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Backend settings; only the `backend` and `load_size` fields are used.
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write frozen and adapted test embeddings to embeddings.csv.
    #[arg(long)]
    embeddings: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched recursively for metrics.json.
    #[arg(long)]
    runs: PathBuf,
    /// Where to write the aggregate JSON; defaults to RUNS/aggregate.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToyDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn backend_for(config: &TrainConfig) -> Result<Box<dyn EncoderBackend>> {
    BackendRegistry::with_builtins().build(&config.backend)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

fn classes(manifest: &Manifest, requested: &Option<String>) -> Result<Vec<String>> {
    let all = manifest.classes();
    match requested {
        Some(c) if all.contains(c) => Ok(vec![c.clone()]),
        Some(c) => Err(Error::Input(format!("class {c:?} not in manifest (have {all:?})"))),
        None => Ok(all),
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SynthIndexEntry {
    source_id: String,
    method: String,
    seed: u64,
    path: PathBuf,
    mask_path: PathBuf,
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let manifest = args.data.load()?;
    let seed = config.seeds[0];
    let params = config.synth.clone().with_seed(seed);
    let mut index = Vec::new();
    for class in classes(&manifest, &args.class_name)? {
        let train = load_split(&manifest, &class, Split::Train, Some(config.load_size()))?;
        let samples = synth::build_negatives(&train, &params)?;
        let dir = args.out.join(sanitize(&class));
        create_dir(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            let path = dir.join(format!("{i:04}.png"));
            let mask_path = dir.join(format!("{i:04}_mask.png"));
            s.image.save_png(&path)?;
            s.mask
                .as_ref()
                .ok_or_else(|| Error::Input("synthesized sample without mask".into()))?
                .save_png(&mask_path)?;
            index.push(SynthIndexEntry {
                source_id: s.source_id.clone(),
                method: params.method().to_string(),
                seed,
                path,
                mask_path,
            });
        }
        log::info!("{class}: {} samples", samples.len());
    }
    write_json(&args.out.join("index.json"), &index)?;
    println!("wrote {} samples to {}", index.len(), args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve_with(|cli| {
        if let Some(k) = args.k {
            cli["k_shot"] = k.into();
        }
    })?;
    let manifest = args.data.load()?;
    let backend = backend_for(&config)?;
    for class in classes(&manifest, &args.class_name)? {
        for &seed in &config.seeds {
            let episode = build_episode(
                &manifest,
                &class,
                config.k_shot,
                seed,
                &config.synth,
                Some(config.load_size()),
            )?;
            let dir = args
                .out
                .join(sanitize(&class))
                .join(format!("k{}", config.k_shot))
                .join(format!("seed{seed}"));
            create_dir(&dir)?;
            let outcome = pipeline::train(&episode, &config, backend.as_ref())?;
            outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            write_json(&dir.join("config.json"), &config)?;
            let last = outcome.loss_curve.last().map(|r| r.total).unwrap_or(f64::NAN);
            if args.evaluate {
                let mut report = pipeline::evaluate(&outcome.checkpoint, &episode, backend.as_ref())?;
                report.loss_curve = outcome.loss_curve;
                report.train_seconds = outcome.seconds;
                report.write(&dir)?;
                println!(
                    "{class} k={} seed={seed}: loss {last:.4}, auroc {:.4}, aupr {:.4}, f1_max {:.4}",
                    config.k_shot, report.metrics.auroc, report.metrics.aupr, report.metrics.f1_max
                );
            } else {
                println!(
                    "{class} k={} seed={seed}: loss {last:.4} -> {}",
                    config.k_shot,
                    dir.display()
                );
            }
        }
    }
    Ok(())
}

/// The checkpoint plus a test-only episode for its class.
fn checkpoint_episode(
    checkpoint: &Path,
    data: &DataArgs,
    config: &ConfigArgs,
    split: Split,
) -> Result<(Checkpoint, Episode, Box<dyn EncoderBackend>, TrainConfig)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = config.resolve()?;
    let backend = backend_for(&config)?;
    let manifest = data.load()?;
    let test = load_split(&manifest, &ckpt.meta.class_name, split, Some(config.load_size()))?;
    let episode = Episode {
        k: ckpt.meta.k_shot,
        class_name: ckpt.meta.class_name.clone(),
        support: Vec::new(),
        negatives: Vec::new(),
        negative_owner: Vec::new(),
        test,
        seed: ckpt.meta.seed,
        synth: config.synth.clone(),
    };
    pipeline::check_compatible(&ckpt, &episode.class_name, backend.as_ref())?;
    Ok((ckpt, episode, backend, config))
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, episode, backend, _) = checkpoint_episode(&args.checkpoint, &args.data, &args.config, Split::Test)?;
    let report = pipeline::evaluate(&ckpt, &episode, backend.as_ref())?;
    report.write(&args.out)?;
    if args.embeddings {
        pipeline::write_embeddings(&args.out.join("embeddings.csv"), &ckpt, backend.as_ref(), &episode.test)?;
    }
    println!(
        "{} k={} seed={}: auroc {:.4}, aupr {:.4}, f1_max {:.4}",
        report.class_name, report.k_shot, report.seed, report.metrics.auroc, report.metrics.aupr, report.metrics.f1_max
    );
    Ok(())
}

#[derive(Serialize)]
struct ScoreCsvRow<'a> {
    image_id: &'a str,
    s_pos: f64,
    s_neg: f64,
    anomaly_score: f64,
}

fn run_score(args: &ScoreArgs) -> Result<()> {
    let (ckpt, episode, backend, _) =
        checkpoint_episode(&args.checkpoint, &args.data, &args.config, args.split.into())?;
    let rows = pipeline::score_samples(&ckpt, backend.as_ref(), &episode.test)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    for r in &rows {
        w.serialize(ScoreCsvRow {
            image_id: &r.id,
            s_pos: r.s_pos,
            s_neg: r.s_neg,
            anomaly_score: r.anomaly_score,
        })?;
    }
    w.flush()
        .map_err(|e| Error::Input(format!("{}: {e}", args.out.display())))?;
    println!("scored {} images -> {}", rows.len(), args.out.display());
    Ok(())
}

fn run_gradmap(args: &GradmapArgs) -> Result<()> {
    let (ckpt, episode, backend, _) =
        checkpoint_episode(&args.checkpoint, &args.data, &args.config, args.split.into())?;
    create_dir(&args.out)?;
    let n = args.limit.unwrap_or(episode.test.len()).min(episode.test.len());
    for (i, s) in episode.test[..n].iter().enumerate() {
        let map = grad_map(backend.as_ref(), &ckpt.head, &ckpt.anchors, &s.image)?;
        let stem = Path::new(&s.source_id)
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_default();
        map.save_png(&args.out.join(format!("{i:04}_{}.png", sanitize(&stem))))?;
    }
    println!("wrote {n} gradient maps to {}", args.out.display());
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let summary = Summary::from_dir(&args.runs)?;
    let out = args.out.clone().unwrap_or_else(|| args.runs.join("aggregate.json"));
    write_json(&out, &summary)?;
    print!("{}", summary.table());
    println!("{} runs -> {}", summary.runs, out.display());
    Ok(())
}

fn run_toy_data(args: &ToyDataArgs) -> Result<()> {
    let corpus = toy_corpus(&ToyCorpusSpec {
        seed: args.seed,
        ..Default::default()
    })?;
    let manifest = write_corpus(&corpus, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Score(a) => run_score(a),
        Command::Gradmap(a) => run_gradmap(a),
        Command::Report(a) => run_report(a),
        Command::ToyData(a) => run_toy_data(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}
