use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use erc_fuse::corpus::{load_manifest, SplitAssignment};
use erc_fuse::evaluation::{read_report, write_report};
use erc_fuse::fusion::FusionMethod;
use erc_fuse::pipeline::{
    evaluate_prediction_file, fuse_prediction_files, labels_from_prediction_header, validate_corpus,
    Pipeline, RunConfig,
};
use erc_fuse::synthetic::{write_synthetic_corpus, SyntheticSpec};
use erc_fuse::Error;

#[derive(Parser, Debug)]
#[command(name = "erc-fuse", version, about = "Emotion recognition in conversations with late fusion")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the split seed and every training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for featurize, predict and weight search.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check manifest alignment and print a label histogram.
    Validate {
        /// Manifest to check instead of the one named by --config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Do not treat utterances without audio as fatal.
        #[arg(long)]
        allow_text_only: bool,
    },
    /// Write the stratified train/test split.
    Split,
    /// Compute and cache features for the enabled modalities.
    Featurize,
    /// Train one classifier per enabled modality.
    Train,
    /// Write prediction tables from the saved models.
    Predict,
    /// Fuse prediction files.
    Fuse {
        /// Prediction CSVs (at least two).
        #[arg(required = true, num_args = 2..)]
        tables: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::WeightedAverage)]
        method: Method,
        /// Comma-separated weights, one per table; equal weights when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Name of the fused table and its report.
        #[arg(long, default_value = "ensemble")]
        name: String,
        /// Fused CSV path (default: <out>/<name>.csv).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Manifest with gold labels; writes a report next to the CSV.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Restrict the report to the test ids of this split file.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Score the run's prediction tables on the test split, or score the
    /// given prediction files.
    Evaluate {
        #[arg(long = "predictions")]
        predictions: Vec<PathBuf>,
    },
    /// Every stage in order.
    Run,
    /// Print report summaries (default: every report in <out>/reports).
    Report { reports: Vec<PathBuf> },
    /// Write a small synthetic corpus and a matching run config.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    WeightedAverage,
    Vote,
}

/// Marks failures that should exit with status 1.
#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ValidationFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Stage { stage, .. }) if *stage == "config" || *stage == "ingest" => 1,
        Some(Error::Config(_) | Error::Manifest(_) | Error::LabelSet(_)) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ValidationFailed("this command requires --config".into()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| ValidationFailed(e.to_string()))?;
    cfg.apply_overrides(cli.seed, cli.out.clone());
    Ok(cfg)
}

fn pipeline(cli: &Cli) -> anyhow::Result<Pipeline> {
    Ok(Pipeline::new(load_config(cli)?)?)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if cli.config.is_some() {
        return Ok(load_config(cli)?.output_path());
    }
    Ok(PathBuf::from("."))
}

fn cmd_validate(cli: &Cli, manifest: Option<&Path>, allow_text_only: bool) -> anyhow::Result<()> {
    let (corpus, audio_required) = match manifest {
        Some(m) => (load_manifest(m).map_err(|e| ValidationFailed(e.to_string()))?, !allow_text_only),
        None => {
            let cfg = load_config(cli)?;
            let corpus = load_manifest(cfg.resolve(&cfg.manifest)).map_err(|e| ValidationFailed(e.to_string()))?;
            cfg.validate().map_err(|e| ValidationFailed(e.to_string()))?;
            (corpus, cfg.audio.is_some() && !allow_text_only)
        }
    };
    let summary = validate_corpus(&corpus, audio_required);
    print!("{}", summary.render());
    if !summary.is_ok() {
        return Err(ValidationFailed(format!("{} fatal issue(s)", summary.fatal.len())).into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuse(
    cli: &Cli,
    tables: &[PathBuf],
    method: Method,
    weights: Option<&[f64]>,
    name: &str,
    output: Option<&Path>,
    gold: Option<&Path>,
    split: Option<&Path>,
) -> anyhow::Result<()> {
    let labels = labels_from_prediction_header(&tables[0])?;
    let method = match (method, weights) {
        (Method::Vote, Some(_)) => bail!(ValidationFailed("--weights applies only to weighted-average".into())),
        (Method::Vote, None) => FusionMethod::Vote,
        (Method::WeightedAverage, Some(w)) => FusionMethod::WeightedAverage { weights: w.to_vec() },
        (Method::WeightedAverage, None) => FusionMethod::WeightedAverage {
            weights: vec![1.0 / tables.len() as f64; tables.len()],
        },
    };
    let fused = fuse_prediction_files(tables, &labels, &method, name)?;
    let output = match output {
        Some(p) => p.to_path_buf(),
        None => out_dir(cli)?.join(format!("{name}.csv")),
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fused.write_csv(&output)?;
    println!("wrote {} ({} rows)", output.display(), fused.len());

    if let Some(gold) = gold {
        let corpus = load_manifest(gold)?;
        let ids = split.map(SplitAssignment::read).transpose()?.map(|s| s.test_ids);
        let report = evaluate_prediction_file(&output, &corpus, ids.as_ref(), "", cli.seed.unwrap_or(0))?;
        let path = output.with_extension("report.json");
        write_report(&report, &path)?;
        print!("{}", report.summary_table());
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, predictions: &[PathBuf]) -> anyhow::Result<()> {
    let p = pipeline(cli)?;
    if predictions.is_empty() {
        for report in p.evaluate()? {
            print!("{}", report.summary_table());
        }
        return Ok(());
    }
    let split_path = p.layout().split();
    let ids: Option<BTreeSet<String>> = if split_path.is_file() {
        Some(SplitAssignment::read(&split_path)?.test_ids)
    } else {
        None
    };
    std::fs::create_dir_all(p.layout().root().join("reports"))?;
    for path in predictions {
        let report = evaluate_prediction_file(path, p.corpus(), ids.as_ref(), p.config_hash(), p.seed())?;
        write_report(&report, p.layout().report(&report.model_name))?;
        print!("{}", report.summary_table());
    }
    Ok(())
}

fn cmd_report(cli: &Cli, reports: &[PathBuf]) -> anyhow::Result<()> {
    let mut paths = reports.to_vec();
    if paths.is_empty() {
        let dir = out_dir(cli)?.join("reports");
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
        paths.sort();
    }
    if paths.is_empty() {
        bail!("no reports found");
    }
    for path in paths {
        let report = read_report(&path)?;
        println!("== {}", path.display());
        print!("{}", report.summary_table());
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, dir: &Path, per_class: usize) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        per_class,
        seed: cli.seed.unwrap_or(SyntheticSpec::default().seed),
        ..SyntheticSpec::default()
    };
    let manifest = write_synthetic_corpus(dir, &spec)?;
    let config = serde_json::json!({
        "manifest": manifest.file_name().map(|s| s.to_string_lossy().into_owned()),
        "split": {"ratio": 0.8, "seed": 7},
        "text": {"min_df": 1, "train": {"learning_rate": 0.5, "epochs": 100, "batch_size": 1024}},
        "audio": {"train": {"learning_rate": 0.5, "epochs": 100, "batch_size": 1024}},
        "fusion": {"method": "search", "step": 0.1},
        "output_dir": "out"
    });
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)? + "\n")?;
    println!("wrote {} and {}", manifest.display(), config_path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Validate {
            manifest,
            allow_text_only,
        } => cmd_validate(cli, manifest.as_deref(), *allow_text_only),
        Command::Split => {
            let s = pipeline(cli)?.split()?;
            println!("train {} test {}", s.train_ids.len(), s.test_ids.len());
            Ok(())
        }
        Command::Featurize => Ok(pipeline(cli)?.featurize()?),
        Command::Train => Ok(pipeline(cli)?.train()?),
        Command::Predict => Ok(pipeline(cli)?.predict()?),
        Command::Fuse {
            tables,
            method,
            weights,
            name,
            output,
            gold,
            split,
        } => cmd_fuse(
            cli,
            tables,
            *method,
            weights.as_deref(),
            name,
            output.as_deref(),
            gold.as_deref(),
            split.as_deref(),
        ),
        Command::Evaluate { predictions } => cmd_evaluate(cli, predictions),
        Command::Run => {
            let p = pipeline(cli)?;
            let (reports, record) = p.run()?;
            for report in &reports {
                print!("{}", report.summary_table());
            }
            println!("{} artifacts in {}", record.artifacts.len(), p.layout().root().display());
            Ok(())
        }
        Command::Report { reports } => cmd_report(cli, reports),
        Command::Synth { dir, per_class } => cmd_synth(cli, dir, *per_class),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
