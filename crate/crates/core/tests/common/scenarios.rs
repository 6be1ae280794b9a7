//! Fixture-driven setups shared by the integration suites and the
//! acceptance harness.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use carecontext_core::config::Config;
use carecontext_core::corpus::{parse_metadata_lines, DocumentFormat, Metadata};
use carecontext_core::engine::{Engine, IngestReport, PatientOutcome, PipelineError};
use carecontext_core::provider::ProviderMode;

pub const WALKTHROUGH_QUESTION: &str = "How should I use the EpiPen I was prescribed?";
pub const FOLLOW_UP_QUESTION: &str = "Can I take Keflex again?";
pub const ADRENALINE_DOC: &str = "kb-adrenaline";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().expect("fixtures directory")
}

pub fn transcript(name: &str) -> (Vec<u8>, Metadata) {
    let path = fixtures().join("transcripts").join(name);
    let bytes = std::fs::read(&path).expect("transcript fixture");
    let meta = parse_metadata_lines(&std::fs::read_to_string(path.with_extension("txt.meta")).expect("sidecar"))
        .expect("sidecar parses");
    (bytes, meta)
}

pub fn mock_config(data_dir: &Path) -> Config {
    Config { data_dir: data_dir.to_path_buf(), fixed_clock: true, ..Config::default() }
}

pub fn replay_config(data_dir: &Path) -> Config {
    Config {
        mode: ProviderMode::Replay,
        fixtures: vec![fixtures().join("replay/walkthrough.jsonl")],
        ..mock_config(data_dir)
    }
}

/// Knowledge fixtures plus the allergy patient (and, optionally, the
/// cardiology patient).
pub fn seed(engine: &Engine, with_second_patient: bool) -> Result<(IngestReport, Vec<PatientOutcome>), PipelineError> {
    let report = engine.ingest_knowledge_dir(&fixtures().join("knowledge"))?;
    let mut names = vec!["p1_allergy.txt"];
    if with_second_patient {
        names.push("p2_cardiology.txt");
    }
    let mut patients = Vec::new();
    for n in names {
        let (bytes, meta) = transcript(n);
        patients.push(engine.add_patient(&bytes, DocumentFormat::PlainText, meta)?);
    }
    Ok((report, patients))
}
