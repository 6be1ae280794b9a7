//! `carecontext` — operator commands over the engine.
//!
//! Every command is a thin wrapper around one `Engine` call, so running a
//! command and making the same library call leave identical artifacts in the
//! data directory.
//!
//! Exit codes: 0 success, 2 configuration, 3 not found, 4 provider,
//! 5 validation, 6 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carecontext_core::config::Config;
use carecontext_core::corpus::{parse_metadata_lines, sidecar_path, DocumentFormat, Metadata, PATIENT_ID_KEY};
use carecontext_core::engine::{kappa_from_file, Engine, PipelineError};
use carecontext_core::error::{ErrorClass, Stage};
use carecontext_core::evaluation::kappa::render_kappa_table;
use carecontext_core::evaluation::likert::summarize_likert;
use carecontext_core::evaluation::sheets::load_likert;
use carecontext_core::provider::ProviderMode;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "carecontext", version, about = "Patient-context question answering")]
struct Cli {
    /// Config file; defaults to ./carecontext.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Provider mode, overriding the config file and environment.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ProviderMode>,
    /// Data directory, overriding the config file and environment.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    /// One JSON document on stdout.
    Structured,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk, embed and index every .txt/.md file in a directory.
    IngestKnowledge { dir: PathBuf },
    /// Annotate a transcript and index it as a patient context.
    AddPatient {
        file: PathBuf,
        /// Overrides `patient_id` from the `<file>.meta` sidecar.
        #[arg(long)]
        patient_id: Option<String>,
    },
    /// Answer a question for one patient.
    Ask {
        patient_id: String,
        question: String,
        #[arg(long)]
        model: Option<String>,
    },
    /// Generate evaluation questions from a patient's context.
    GenQuestions {
        patient_id: String,
        #[arg(short = 'n', default_value_t = 2)]
        n: usize,
    },
    /// Evaluate models over a dataset and write a report.
    Eval {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
    },
    /// Fleiss' kappa over a rating sheet.
    Kappa { ratings: PathBuf },
    /// Summarize a Likert rating sheet.
    Likert { sheet: PathBuf },
    /// Run the HTTP service.
    Serve,
}

fn parse_mode(s: &str) -> Result<ProviderMode, String> {
    s.parse()
}

fn config_error(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string())
}

fn load_config(cli: &Cli) -> Result<Config, PipelineError> {
    let mut config = Config::discover(cli.config.as_deref()).map_err(config_error)?;
    if let Some(m) = cli.mode {
        config.mode = m;
    }
    if let Some(d) = &cli.data_dir {
        config.data_dir = d.clone();
    }
    Ok(config)
}

fn read_transcript(file: &Path, patient_id: Option<String>) -> Result<(Vec<u8>, DocumentFormat, Metadata), PipelineError> {
    let io = |e: std::io::Error| PipelineError::new(Stage::Ingestion, ErrorClass::Io, format!("{}: {e}", file.display()));
    let format = DocumentFormat::from_path(file).ok_or_else(|| {
        PipelineError::new(Stage::Ingestion, ErrorClass::Validation, format!("{}: expected a .txt or .md file", file.display()))
    })?;
    let bytes = std::fs::read(file).map_err(io)?;
    let mut metadata = Metadata::new();
    let sidecar = sidecar_path(file);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(io)?;
        metadata = parse_metadata_lines(&text)
            .map_err(|e| PipelineError::new(Stage::Ingestion, ErrorClass::Validation, format!("{}: {e}", sidecar.display())))?;
    }
    if let Some(id) = patient_id {
        metadata.insert(PATIENT_ID_KEY.to_string(), id);
    }
    Ok((bytes, format, metadata))
}

/// What a command produced: the structured value and its human rendering.
struct Output {
    json: serde_json::Value,
    text: String,
}

impl Output {
    fn new(value: &impl Serialize, text: String) -> Self {
        Output { json: serde_json::to_value(value).expect("outputs serialize"), text }
    }
}

fn clip(s: &str, n: usize) -> String {
    let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= n {
        flat
    } else {
        format!("{}…", flat.chars().take(n).collect::<String>())
    }
}

fn run(cli: &Cli) -> Result<Output, PipelineError> {
    match &cli.command {
        Command::Kappa { ratings } => {
            let r = kappa_from_file(ratings)?;
            let text = format!("κ = {} (SE {:.6}, z {:.3})\n\n{}", r.kappa, r.standard_error, r.z, render_kappa_table(&r));
            return Ok(Output::new(&r, text));
        }
        Command::Likert { sheet } => {
            let cells = load_likert(sheet)
                .map_err(|e| PipelineError::new(Stage::Evaluation, ErrorClass::Validation, e.to_string()))?;
            let s = summarize_likert(&cells).ok_or_else(|| {
                PipelineError::new(Stage::Evaluation, ErrorClass::Validation, format!("{}: no ratings", sheet.display()))
            })?;
            let mut text = format!("mean {:.3} over {} ratings\n", s.mean, s.cells);
            for (rater, m) in &s.per_rater {
                text.push_str(&format!("  rater {rater}: {m:.3}\n"));
            }
            for (specialty, m) in &s.per_specialty {
                text.push_str(&format!("  specialty {specialty}: {m:.3}\n"));
            }
            text.push_str(&format!("distribution 1..5: {:?}\n", s.distribution));
            return Ok(Output::new(&s, text));
        }
        _ => {}
    }

    let config = load_config(cli)?;
    if let Command::Serve = cli.command {
        let engine = carecontext_service::engine_for_service(config)?;
        let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Io, e.to_string()))?;
        rt.block_on(carecontext_service::serve(engine))
            .map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Io, e.to_string()))?;
        return Ok(Output { json: serde_json::json!({ "status": "stopped" }), text: "stopped\n".into() });
    }

    let engine = Engine::open(config)?;
    let out = match &cli.command {
        Command::IngestKnowledge { dir } => {
            let r = engine.ingest_knowledge_dir(dir)?;
            let mut text = format!("{} documents, {} chunks, {} failed\n", r.documents, r.chunks, r.failed);
            for item in &r.items {
                match &item.error {
                    None => text.push_str(&format!("  ok    {} -> {} ({} chunks)\n", item.name, item.document_id.as_deref().unwrap_or("-"), item.chunks)),
                    Some(e) => text.push_str(&format!("  fail  {}: {e}\n", item.name)),
                }
            }
            Output::new(&r, text)
        }
        Command::AddPatient { file, patient_id } => {
            let (bytes, format, metadata) = read_transcript(file, patient_id.clone())?;
            let p = engine.add_patient(&bytes, format, metadata)?;
            let s = &p.context.sections;
            let text = format!(
                "patient {} ({} chunks, trace {})\n\n## History and symptoms\n{}\n\n## Executed diagnostics\n{}\n\n## Medications and instructions\n{}\n",
                p.patient_id, p.chunks, p.trace_id, s.history_and_symptoms, s.executed_diagnostics, s.medications_and_instructions
            );
            Output::new(&p, text)
        }
        Command::Ask { patient_id, question, model } => {
            let a = match model {
                Some(m) => engine.ask_with_model(patient_id, question, m)?,
                None => engine.ask(patient_id, question)?,
            };
            let mut text = format!("{}\n\n", a.response.answer);
            text.push_str("| origin | label | entry | score | cited | excerpt |\n|---|---|---|---|---|---|\n");
            let labels = &a.context.labels;
            for e in a.context.patient_evidence.iter().chain(&a.context.medical_evidence).filter(|e| !e.dropped) {
                let label = labels.iter().find(|l| l.entry_id == e.entry_id).map_or("-", |l| l.label.as_str());
                let cited = if a.response.citations.contains(&e.entry_id) { "yes" } else { "" };
                let origin = serde_json::to_value(e.origin).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                text.push_str(&format!("| {origin} | {label} | {} | {:.4} | {cited} | {} |\n", e.entry_id, e.score, clip(&e.text, 60)));
            }
            text.push_str(&format!("\nmodel {} · trace {}\n{}\n", a.response.model_name, a.response.trace_id, a.disclaimer));
            Output::new(&a, text)
        }
        Command::GenQuestions { patient_id, n } => {
            let qs = engine.generate_questions(patient_id, *n)?;
            let text = qs
                .iter()
                .enumerate()
                .map(|(i, q)| format!("{}. {}{}\n", i + 1, q.text, if q.grounded { "" } else { "  (ungrounded)" }))
                .collect();
            Output::new(&qs, text)
        }
        Command::Eval { dataset, models } => {
            let r = engine.run_eval_file(dataset, models)?;
            let text = format!("{}\nreport {} -> {}\n", r.table, r.report_id, r.json_path.display());
            Output::new(&r, text)
        }
        Command::Kappa { .. } | Command::Likert { .. } | Command::Serve => unreachable!("handled above"),
    };
    engine.flush_recordings()?;
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            match cli.format {
                Format::Human => print!("{}", out.text),
                Format::Structured => println!("{}", serde_json::to_string_pretty(&out.json).expect("json")),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.format == Format::Structured {
                println!("{}", serde_json::json!({ "error": e }));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
