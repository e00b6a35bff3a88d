//! `cogtrace`: ingest search logs, label cognitive traces, review, measure
//! agreement and forecast session outcomes.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use cogtrace_core::forecasting::{
    generate_synthetic, run_experiment, FeatureConfig, SyntheticParams, Task, TaskSpec, TrainParams,
};
use cogtrace_core::ingest::{ColumnMapping, LogFormat, SegmentationPolicy};
use cogtrace_core::metrics::{agreement_report, GoldRating};
use cogtrace_core::store::{BackendKind, EngineKind, ExportOptions, LabelingConfig, Workspace};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "cogtrace", version, about = "Cognitive trace annotation for search session logs")]
struct Cli {
    /// Workspace directory.
    #[arg(long, global = true, default_value = "cogtrace-workspace")]
    workspace: PathBuf,

    /// Dataset id; defaults to the most recently created dataset.
    #[arg(long, global = true)]
    dataset: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Segment {
    ById,
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Features {
    Text,
    Labels,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a raw log into a new dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<LogFormat>,
        /// Column mapping (JSON file).
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, value_enum, default_value = "gap")]
        segment: Segment,
        #[arg(long, default_value_t = 30)]
        gap_minutes: u64,
        #[arg(long)]
        name: Option<String>,
        /// Write the rejected-row report here (JSON).
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Label every event of a dataset.
    Label {
        #[arg(long, default_value = "heuristic", value_parser = parse_engine)]
        engine: EngineKind,
        #[arg(long, default_value = "mock", value_parser = parse_backend)]
        backend: BackendKind,
        /// Labeling configuration (JSON file).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_concurrency: Option<usize>,
    },
    /// Flag the most disputed events for human review.
    Flag {
        #[arg(long, default_value_t = 0.01)]
        rate: f64,
    },
    /// Agreement and accuracy against gold labels.
    Agree {
        /// Gold ratings: JSON array, JSON lines, or CSV with
        /// session_id,event_index,annotator,label.
        #[arg(long)]
        gold: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate outcome or recovery forecasters.
    Forecast {
        #[arg(long, default_value = "outcome", value_parser = parse_task)]
        task: Task,
        /// Feature families to compare; repeat or comma-separate.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["text", "labels", "both"])]
        features: Vec<Features>,
        /// Prefix fraction (default 0.5 for outcome, 0.4 for recovery).
        #[arg(long)]
        prefix: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create a synthetic annotated dataset.
    Synth {
        #[arg(long, default_value_t = 2000)]
        sessions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the annotation CSV.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add source, confidence and flagged columns.
        #[arg(long)]
        extended: bool,
        /// Export even if some events are unlabeled.
        #[arg(long)]
        force: bool,
    },
    /// Rewrite record files keeping only the latest record per key.
    Compact,
    /// Serve the review API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn parse_format(s: &str) -> Result<LogFormat, String> {
    s.parse().map_err(|e: cogtrace_core::ingest::IngestError| e.to_string())
}

fn parse_engine(s: &str) -> Result<EngineKind, String> {
    s.parse()
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn usage_error(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = e.print();
        return ExitCode::SUCCESS;
    }
    let _ = e.print();
    let mut cmd = Cli::command();
    let sub = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let help = match sub.as_deref().and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_help(),
        None => cmd.render_help(),
    };
    let _ = writeln!(std::io::stderr(), "\n{help}");
    ExitCode::from(1)
}

fn dataset_id(cli_dataset: &Option<String>, ws: &Workspace) -> Result<String> {
    match cli_dataset {
        Some(id) => {
            ws.dataset(id)?;
            Ok(id.clone())
        }
        None => ws
            .latest_dataset()
            .ok_or_else(|| anyhow!("unknown dataset: workspace {} has no datasets", ws.root().display())),
    }
}

fn write_output(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let ws = Workspace::open(&cli.workspace)?;
    for q in ws.quarantined() {
        eprintln!("quarantined {} bytes of an interrupted write in {}", q.bytes, q.file.display());
    }
    match &cli.command {
        Command::Ingest { input, format, mapping, segment, gap_minutes, name, rejects } => {
            let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            let format = format.unwrap_or(match input.extension().and_then(|e| e.to_str()) {
                Some("json") => LogFormat::Json,
                _ => LogFormat::Csv,
            });
            let mapping: ColumnMapping = read_json_file(mapping)?;
            let policy = match segment {
                Segment::ById => SegmentationPolicy::by_session_id(),
                Segment::Gap => SegmentationPolicy::by_inactivity(gap_minutes * 60_000),
            };
            let name = name.clone().unwrap_or_else(|| input.display().to_string());
            let outcome = ws.create_dataset(&name, &bytes, format, &mapping, &policy)?;
            eprintln!(
                "dataset {}: {} sessions, {} events, {} rejected rows",
                outcome.dataset_id, outcome.sessions, outcome.events, outcome.rejects.total
            );
            for r in outcome.rejects.rows.iter().take(5) {
                eprintln!("  row {}: {}", r.row, r.reason);
            }
            if let Some(path) = rejects {
                std::fs::write(path, serde_json::to_vec_pretty(&outcome.rejects)?)?;
            }
            println!("{}", outcome.dataset_id);
        }
        Command::Label { engine, backend, config, max_concurrency } => {
            let id = dataset_id(&cli.dataset, &ws)?;
            let mut cfg = match config {
                Some(path) => {
                    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    LabelingConfig::from_json(&raw).map_err(|e| anyhow!(e))?
                }
                None => LabelingConfig::default(),
            };
            if let Some(n) = max_concurrency {
                if *n == 0 {
                    bail!("--max-concurrency must be positive");
                }
                cfg.agent.max_concurrency = *n;
            }
            let engine = cfg.engine(*engine, *backend).map_err(|e| anyhow!(e))?;
            let report = ws.run_labeling(&id, &engine, &AtomicBool::new(false), |_, _| {})?;
            eprintln!(
                "labeled {} events in {} sessions; {} escalated, {} sessions with errors",
                report.labeled_events,
                report.sessions,
                report.escalated_events,
                report.failed_sessions.len()
            );
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Flag { rate } => {
            if !(*rate > 0.0 && *rate <= 1.0) {
                bail!("--rate must lie in (0, 1]");
            }
            let id = dataset_id(&cli.dataset, &ws)?;
            let outcome = ws.flag(&id, *rate)?;
            println!("flagged {} events", outcome.flagged);
            eprintln!("{} transcripts, {} newly flagged", outcome.transcripts, outcome.newly_flagged);
        }
        Command::Agree { gold, json } => {
            let id = dataset_id(&cli.dataset, &ws)?;
            let ratings = read_gold(gold)?;
            let state = ws.load(&id)?;
            let pred: Vec<_> = state.effective().into_values().collect();
            let report = agreement_report(&pred, &ratings)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render_table());
            }
        }
        Command::Forecast { task, features, prefix, seed, out } => {
            let id = dataset_id(&cli.dataset, &ws)?;
            let mut spec = TaskSpec::new(*task);
            if let Some(f) = prefix {
                spec.prefix_fraction = *f;
            }
            let mut cfgs = Vec::new();
            for f in features {
                let cfg = match f {
                    Features::Text => FeatureConfig::text_only(),
                    Features::Labels => FeatureConfig::labels_only(),
                    Features::Both => FeatureConfig::text_and_labels(),
                };
                if !cfgs.contains(&cfg) {
                    cfgs.push(cfg);
                }
            }
            let sessions = ws.load(&id)?.annotated_sessions();
            let report = run_experiment(&sessions, &spec, &cfgs, *seed, &TrainParams::default())?;
            eprint!("{}", report.render_table());
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            write_output(out, &json)?;
        }
        Command::Synth { sessions, seed } => {
            if *sessions == 0 {
                bail!("--sessions must be positive");
            }
            let corpus = generate_synthetic(*sessions, *seed, &SyntheticParams::default());
            let id = ws.create_annotated(&format!("synthetic-{sessions}-seed{seed}"), &corpus)?;
            eprintln!("dataset {id}: {sessions} synthetic sessions");
            println!("{id}");
        }
        Command::Export { out, extended, force } => {
            let id = dataset_id(&cli.dataset, &ws)?;
            let bytes = ws.export_csv(&id, ExportOptions { extended: *extended, force: *force })?;
            write_output(out, &bytes)?;
        }
        Command::Compact => {
            let id = dataset_id(&cli.dataset, &ws)?;
            ws.compact(&id)?;
            eprintln!("compacted {id}");
        }
        Command::Serve { port } => {
            let ws = Arc::new(ws);
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            eprintln!("serving {} on 0.0.0.0:{port}", ws.root().display());
            runtime.block_on(cogtrace_service::serve(ws, *port))?;
        }
    }
    Ok(())
}

fn read_gold(path: &Path) -> Result<Vec<GoldRating>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).with_context(|| format!("parsing {}", path.display()));
    }
    if trimmed.starts_with('{') {
        return trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
            .collect();
    }
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<GoldRating>().enumerate() {
        out.push(rec.with_context(|| format!("{} row {}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} has no ratings", path.display());
    }
    Ok(out)
}
