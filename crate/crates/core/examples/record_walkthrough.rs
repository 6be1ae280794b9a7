//! Regenerates `fixtures/replay/walkthrough.jsonl`.
//!
//! Runs the allergy walk-through (knowledge ingest, patient onboarding, two
//! questions) against scripted providers and records every exchange, so
//! that replay mode can serve it byte-for-byte without network access.
//! The scripted chat writes the annotation and the EpiPen answer the way a
//! careful model would; everything else falls through to the mock chat.
//!
//! ```text
//! cargo run -p carecontext-core --example record_walkthrough [-- <out.jsonl>]
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use carecontext_core::config::Config;
use carecontext_core::corpus::{parse_metadata_lines, DocumentFormat};
use carecontext_core::embedding::{EmbeddingProvider, MockEmbedder, RecordingEmbedder};
use carecontext_core::engine::{Engine, Providers};
use carecontext_core::llm::{ChatProvider, ChatRequest, FnChat, MockChat, Purpose, RecordingChat};
use carecontext_core::prompts::slots;
use carecontext_core::replay::FixtureBook;

pub const WALKTHROUGH_QUESTION: &str = "How should I use the EpiPen I was prescribed?";
pub const FOLLOW_UP_QUESTION: &str = "Can I take Keflex again?";

const ANNOTATION: &str = "\
**Patient history and symptom:**
- 34-year-old man with perioral swelling (tingling, then swelling of both lips and mild throat tightness) about an hour after a dose of Keflex, roughly three weeks ago; it settled within hours after an antihistamine.
- Hypertension, well controlled on lisinopril. Seasonal hay fever. No asthma, no known food allergies, no known penicillin reactions.

**Executed diagnostics:**
- Examination today: lips and oral mucosa normal, blood pressure 128/82, lungs clear.
- Specific IgE (RAST) to cefalexin and penicillin performed; skin prick testing positive for grass pollen only.

**Prescribed medications & Instruction:**
- Avoid Keflex and other first-generation cephalosporins until the test results are reviewed.
- An EpiPen was prescribed; carry it at all times and use it if swelling involves the throat or breathing, then call emergency services.
- Allergy alert bracelet recommended. Follow-up in four weeks to review the RAST results and the blood pressure medication.";

/// First label in a `[X1] ...` block list whose block contains `needle`.
fn label_containing(blocks: &str, needle: &str) -> Option<String> {
    let mut current: Option<String> = None;
    for line in blocks.lines() {
        if let Some(rest) = line.strip_prefix('[') {
            if let Some((label, _)) = rest.split_once(']') {
                current = Some(label.to_string());
            }
        }
        if line.contains(needle) {
            if let Some(l) = &current {
                return Some(l.clone());
            }
        }
    }
    None
}

fn scripted(model: &str) -> FnChat {
    let fallback = MockChat::new(model);
    FnChat::new(model, move |req: &ChatRequest| match req.purpose {
        Purpose::Annotation => Ok(ANNOTATION.to_string()),
        Purpose::Compression if req.slot(slots::DOCUMENT).contains("orange tip") => Ok(req
            .slot(slots::DOCUMENT)
            .lines()
            .filter(|l| ["When to use it", "How to use it", "After the injection"].iter().any(|p| l.starts_with(p)))
            .collect::<Vec<_>>()
            .join("\n\n")),
        Purpose::Answer if req.slot(slots::QUESTION) == WALKTHROUGH_QUESTION => {
            let p = label_containing(req.slot(slots::PATIENT_CONTEXT), "EpiPen").unwrap_or_else(|| "P1".into());
            let k = label_containing(req.slot(slots::MEDICAL_KNOWLEDGE), "Adrenaline self-injection").unwrap_or_else(|| "K1".into());
            Ok(format!(
                "Your doctor prescribed an EpiPen after the lip swelling you had with Keflex, and asked you to carry it \
                 with you at all times [{p}]. Use it straight away if the swelling spreads to your throat or you find it \
                 hard to breathe [{p}]. Hold the pen in your fist with the orange tip pointing down and pull off the blue \
                 safety release. Place the orange tip against the middle of your outer thigh (it works through clothing), \
                 push firmly until it clicks, and hold it there for three seconds [{k}]. Then call emergency services and \
                 say \"anaphylaxis\", even if you start to feel better [{k}]."
            ))
        }
        _ => fallback.complete(req).map(|r| r.content),
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| root.join("fixtures/replay/walkthrough.jsonl"));
    let data = tempfile::tempdir()?;
    let config = Config { data_dir: data.path().to_path_buf(), fixed_clock: true, ..Config::default() };

    let book = Arc::new(FixtureBook::new());
    let embedder = MockEmbedder::new(config.embedding.mock_seed, config.embedding.mock_dimension)?
        .with_model_name(config.embedding.model.clone());
    let chat_book = book.clone();
    let providers = Providers {
        embedder: Arc::new(RecordingEmbedder::new(embedder, book.clone())) as Arc<dyn EmbeddingProvider>,
        chat: Arc::new(move |m: &str| {
            Ok(Arc::new(RecordingChat::new(scripted(m), chat_book.clone())) as Arc<dyn ChatProvider>)
        }),
        recorder: None,
        configured: true,
    };
    let engine = Engine::with_providers(config, providers)?;

    let report = engine.ingest_knowledge_dir(&root.join("fixtures/knowledge"))?;
    println!("knowledge: {} documents, {} chunks", report.documents, report.chunks);
    let transcript = root.join("fixtures/transcripts/p1_allergy.txt");
    let meta = parse_metadata_lines(&std::fs::read_to_string(transcript.with_extension("txt.meta"))?)?;
    let patient = engine.add_patient(&std::fs::read(&transcript)?, DocumentFormat::PlainText, meta)?;
    println!("patient {}: {} chunks", patient.patient_id, patient.chunks);
    for q in [WALKTHROUGH_QUESTION, FOLLOW_UP_QUESTION] {
        let a = engine.ask(&patient.patient_id, q)?;
        println!("Q: {q}\nA: {}\n   citations {:?}", a.response.answer, a.response.citations);
    }

    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    book.save(&out)?;
    println!("wrote {} exchanges to {}", book.len(), out.display());
    Ok(())
}
