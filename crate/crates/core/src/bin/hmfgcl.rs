//! Command-line surface: `prepare` → `train` → `evaluate`, plus `ablate`
//! and `sweep` for comparison tables. Exit codes are stable for
//! scripting: 0 success, 2 input/config error, 3 numerical failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hmfgcl::config::TrainConfig;
use hmfgcl::data::{self, CsvColumns, Split};
use hmfgcl::error::{Error, Result};
use hmfgcl::eval;
use hmfgcl::manifest::{ConfigSource, ConfigSources, RunManifest};
use hmfgcl::model::Checkpoint;
use hmfgcl::training;
use hmfgcl::InteractionMatrix;

/// Train and evaluate a hybrid-factorization, graph-contrastive
/// recommender over implicit-feedback interaction logs.
#[derive(Parser)]
#[command(name = "hmfgcl", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an interaction log into a split, ID-mapped binary matrix.
    Prepare(PrepareArgs),
    /// Train embedding tables; writes checkpoint, loss log, metrics, manifest.
    Train(TrainArgs),
    /// Score a checkpoint against one split of a prepared dataset.
    Evaluate(EvaluateArgs),
    /// Train the four component variants and tabulate their metrics.
    Ablate(AblateArgs),
    /// One-at-a-time hyperparameter sweep producing a CSV table.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// Tab-separated `user item rating timestamp` lines, no header.
    Ml100k,
    /// Headered CSV with named columns.
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log to ingest.
    #[arg(long)]
    input: PathBuf,
    /// Input file format.
    #[arg(long, value_enum)]
    format: Format,
    /// Subsample this many users (and their interactions) before building.
    #[arg(long)]
    users: Option<usize>,
    /// Keep interactions with rating >= this threshold.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Train,valid,test split ratios; must sum to 1.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    ratios: (f64, f64, f64),
    /// Seed for user subsampling and the split shuffle.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output path for the serialized matrix; the manifest lands beside it.
    #[arg(long)]
    out: PathBuf,
    /// CSV column holding the user key (csv format only).
    #[arg(long, default_value = "user_id")]
    user_col: String,
    /// CSV column holding the item key (csv format only).
    #[arg(long, default_value = "item_id")]
    item_col: String,
    /// CSV column holding the rating (csv format only).
    #[arg(long, default_value = "rating")]
    rating_col: String,
    /// Optional CSV column holding an integer timestamp.
    #[arg(long)]
    timestamp_col: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset (output of `prepare`).
    #[arg(long)]
    data: PathBuf,
    /// JSON config file with flat keys; missing keys take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable; highest precedence).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for checkpoint.bin, loss.csv, metrics.json, manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prepared dataset the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Comma-separated ranking cutoffs.
    #[arg(long, default_value = "10,20")]
    ks: String,
}

#[derive(Args)]
struct AblateArgs {
    /// Prepared dataset.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file for the shared base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one base-config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output CSV path; per-run artifacts land in `<stem>-runs/` beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Prepared dataset.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file for the shared base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one base-config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sweep axis as KEY=V1,V2,... (repeatable; axes vary one at a time).
    #[arg(long, value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// Output CSV path; per-run artifacts land in `<stem>-runs/` beside it.
    #[arg(long)]
    out: PathBuf,
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated ratios, got '{s}'"));
    }
    let one = |i: usize| {
        parts[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("bad ratio '{}'", parts[i]))
    };
    Ok((one(0)?, one(1)?, one(2)?))
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad cutoff '{p}' in --ks")))
        })
        .collect()
}

/// Resolve an input path: absolute paths and paths that exist relative to
/// the working directory are used as given; otherwise the path is also
/// tried under $HMFGCL_DATA_DIR.
fn resolve_input(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var("HMFGCL_DATA_DIR") {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

/// Apply the precedence chain default < config file < --set flags and
/// remember where each overridden key came from.
fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<(TrainConfig, ConfigSources)> {
    let mut sources = ConfigSources::new();
    let mut config = TrainConfig::default();
    if let Some(path) = file {
        let path = resolve_input(path);
        config = TrainConfig::from_json_file(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let serde_json::Value::Object(map) = value {
            for key in map.keys() {
                sources.insert(key.clone(), ConfigSource::File);
            }
        }
    }
    for spec in sets {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{spec}'")))?;
        config.set_key(key, value)?;
        sources.insert(
            TrainConfig::canonical_key(key).to_string(),
            ConfigSource::Flag,
        );
    }
    config.validate()?;
    Ok((config, sources))
}

fn create_parent_dirs(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("prepare");
    manifest.record_seed(args.seed);
    let input = resolve_input(&args.input);
    let raw = match args.format {
        Format::Ml100k => data::parse_ml100k(&input)?,
        Format::Csv => {
            let columns = CsvColumns {
                user: args.user_col.clone(),
                item: args.item_col.clone(),
                rating: args.rating_col.clone(),
                timestamp: args.timestamp_col.clone(),
            };
            data::parse_csv(&input, &columns)?
        }
    };
    let raw = match args.users {
        Some(n) => data::subsample_users(&raw, n, args.seed)?,
        None => raw,
    };
    let matrix = data::build_matrix(&raw, args.threshold, args.ratios, args.seed)?;
    create_parent_dirs(&args.out)?;
    matrix.save(&args.out)?;
    eprintln!(
        "prepared {} users x {} items ({} train / {} valid / {} test interactions)",
        matrix.num_users,
        matrix.num_items,
        matrix.split_len(Split::Train),
        matrix.split_len(Split::Valid),
        matrix.split_len(Split::Test),
    );
    manifest.record_dataset(&args.out, &matrix.content_hash()?);
    manifest.add_output(&args.out)?;
    manifest.write(&args.out.with_extension("manifest.json"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("train");
    let (config, sources) = resolve_config(args.config.as_deref(), &args.set)?;
    manifest.record_seed(config.seed);
    manifest.record_config(&config, &sources)?;
    let data_path = resolve_input(&args.data);
    let matrix = InteractionMatrix::load(&data_path)?;
    manifest.record_dataset(&data_path, &matrix.content_hash()?);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let loss_path = args.out_dir.join("loss.csv");
    let mut loss_file = std::fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let log_io = |e: std::io::Error| Error::io(&loss_path, e);
    writeln!(loss_file, "{}", eval::LOSS_LOG_HEADER).map_err(log_io)?;
    loss_file.flush().map_err(log_io)?;
    let cache_dir = args.out_dir.join("cache");
    let outcome = training::train_with_options(&matrix, &config, Some(&cache_dir), &mut |record| {
        writeln!(loss_file, "{}", eval::loss_log_row(record)).map_err(log_io)?;
        loss_file.flush().map_err(log_io)?;
        eprintln!(
            "epoch {:>4}/{}: loss {:.6}, valid recall@20 {:.4}",
            record.epoch, config.max_epochs, record.total, record.valid_recall20
        );
        Ok(())
    })?;
    let checkpoint_path = args.out_dir.join("checkpoint.bin");
    Checkpoint::from_state(&outcome.state, &config.config_hash(), config.seed)
        .save(&checkpoint_path)?;
    let metrics_path = args.out_dir.join("metrics.json");
    let json = outcome.report.to_json();
    write_file(&metrics_path, json.as_bytes())?;
    print!("{json}");
    eprintln!(
        "kept epoch {} of {}; artifacts in {}",
        outcome.best_epoch,
        outcome.epochs.len(),
        args.out_dir.display()
    );
    for path in [&checkpoint_path, &loss_path, &metrics_path] {
        manifest.add_output(path)?;
    }
    manifest.write(&args.out_dir.join("manifest.json"))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let data_path = resolve_input(&args.data);
    let checkpoint_path = resolve_input(&args.checkpoint);
    let matrix = InteractionMatrix::load(&data_path)?;
    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let ks = parse_ks(&args.ks)?;
    let split: Split = args.split.into();
    let report = eval::evaluate(&checkpoint, &matrix, split, &ks)?;
    let json = report.to_json();
    let out_path = checkpoint_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("metrics-{}.json", split.name()));
    write_file(&out_path, json.as_bytes())?;
    print!("{json}");
    Ok(())
}

/// Directory holding per-run artifacts of an ablation or sweep, beside
/// the CSV: `table.csv` → `table-runs/`.
fn runs_dir_for(out_csv: &Path) -> PathBuf {
    let stem = out_csv
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("table");
    out_csv.with_file_name(format!("{stem}-runs"))
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect()
}

fn write_run_table(
    command: &str,
    rows: &[eval::RunRow],
    base_config: &TrainConfig,
    base_sources: &ConfigSources,
    data_path: &Path,
    dataset_hash: &str,
    out_csv: &Path,
    runs_dir: &Path,
) -> Result<()> {
    let csv = eval::rows_to_csv(rows)?;
    create_parent_dirs(out_csv)?;
    write_file(out_csv, csv.as_bytes())?;
    print!("{csv}");
    for row in rows {
        let mut manifest = RunManifest::begin(command);
        let mut run_config = base_config.clone();
        let mut run_sources = base_sources.clone();
        if row.param != "base" {
            run_config.set_key(&row.param, &row.value)?;
            run_sources.insert(
                TrainConfig::canonical_key(&row.param).to_string(),
                ConfigSource::Flag,
            );
        }
        manifest.record_seed(run_config.seed);
        manifest.record_config(&run_config, &run_sources)?;
        manifest.record_dataset(data_path, dataset_hash);
        let name = file_safe(&row.label);
        let metrics_path = runs_dir.join(format!("{name}.metrics.json"));
        write_file(&metrics_path, row.report.to_json().as_bytes())?;
        manifest.add_output(&metrics_path)?;
        manifest.write(&runs_dir.join(format!("{name}.manifest.json")))?;
    }
    eprintln!("{} runs tabulated in {}", rows.len(), out_csv.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (config, sources) = resolve_config(args.config.as_deref(), &args.set)?;
    let data_path = resolve_input(&args.data);
    let matrix = InteractionMatrix::load(&data_path)?;
    let dataset_hash = matrix.content_hash()?;
    let runs_dir = runs_dir_for(&args.out);
    std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let rows = eval::ablate(&matrix, &config, Some(&runs_dir.join("cache")))?;
    write_run_table(
        "ablate",
        &rows,
        &config,
        &sources,
        &data_path,
        &dataset_hash,
        &args.out,
        &runs_dir,
    )
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|spec| {
            let (key, values) = spec.split_once('=').ok_or_else(|| {
                Error::Config(format!("--grid expects KEY=V1,V2,..., got '{spec}'"))
            })?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            Ok((key.to_string(), values))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (config, sources) = resolve_config(args.config.as_deref(), &args.set)?;
    let grid = parse_grid(&args.grid)?;
    let data_path = resolve_input(&args.data);
    let matrix = InteractionMatrix::load(&data_path)?;
    let dataset_hash = matrix.content_hash()?;
    let runs_dir = runs_dir_for(&args.out);
    std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let rows = eval::sweep(&matrix, &config, &grid, Some(&runs_dir.join("cache")))?;
    write_run_table(
        "sweep",
        &rows,
        &config,
        &sources,
        &data_path,
        &dataset_hash,
        &args.out,
        &runs_dir,
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
