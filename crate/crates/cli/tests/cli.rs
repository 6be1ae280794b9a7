use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carecontext_core::config::Config;
use carecontext_core::corpus::{parse_metadata_lines, DocumentFormat};
use carecontext_core::engine::Engine;

const QUESTION: &str = "How should I use the EpiPen I was prescribed?";

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn fixtures() -> PathBuf {
    root().join("fixtures")
}

/// Replay config without a data directory; each run supplies its own.
fn write_replay_config(dir: &Path) -> PathBuf {
    let path = dir.join("replay.toml");
    let fixture = fixtures().join("replay/walkthrough.jsonl");
    std::fs::write(&path, format!("mode = \"replay\"\nfixed_clock = true\nfixtures = [{:?}]\n", fixture.display().to_string()))
        .unwrap();
    path
}

fn carecontext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carecontext"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .env_remove("CARECONTEXT_MODE")
        .env_remove("CARECONTEXT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn commands_and_library_calls_leave_identical_artifacts() {
    let work = tempfile::tempdir().unwrap();
    let config = write_replay_config(work.path());
    let (via_cli, via_lib) = (work.path().join("cli"), work.path().join("lib"));
    let cfg = config.to_str().unwrap();
    let data = via_cli.to_str().unwrap();
    let knowledge = fixtures().join("knowledge");
    let transcript = fixtures().join("transcripts/p1_allergy.txt");

    ok(carecontext(&["--config", cfg, "--data-dir", data, "ingest-knowledge", knowledge.to_str().unwrap()]));
    ok(carecontext(&["--config", cfg, "--data-dir", data, "add-patient", transcript.to_str().unwrap()]));
    let asked = ok(carecontext(&["--config", cfg, "--data-dir", data, "--format", "structured", "ask", "p1", QUESTION]));

    let mut lib_config = Config::load(&config).unwrap();
    lib_config.data_dir = via_lib.clone();
    let engine = Engine::open(lib_config).unwrap();
    engine.ingest_knowledge_dir(&knowledge).unwrap();
    let meta = parse_metadata_lines(&std::fs::read_to_string(transcript.with_extension("txt.meta")).unwrap()).unwrap();
    engine.add_patient(&std::fs::read(&transcript).unwrap(), DocumentFormat::PlainText, meta).unwrap();
    let answer = engine.ask("p1", QUESTION).unwrap();

    let (a, b) = (tree(&via_cli), tree(&via_lib));
    assert!(a.keys().any(|k| k.starts_with("traces")), "no traces written: {:?}", a.keys());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between command and library call");
    }
    let printed: serde_json::Value = serde_json::from_str(&stdout(&asked)).unwrap();
    assert_eq!(printed, serde_json::to_value(&answer).unwrap());
}

#[test]
fn ask_prints_answer_and_evidence_table() {
    let work = tempfile::tempdir().unwrap();
    let config = write_replay_config(work.path());
    let (cfg, data) = (config.to_str().unwrap(), work.path().join("data"));
    let data = data.to_str().unwrap();
    ok(carecontext(&["--config", cfg, "--data-dir", data, "ingest-knowledge", fixtures().join("knowledge").to_str().unwrap()]));
    ok(carecontext(&["--config", cfg, "--data-dir", data, "add-patient", fixtures().join("transcripts/p1_allergy.txt").to_str().unwrap()]));
    let out = stdout(&ok(carecontext(&["--config", cfg, "--data-dir", data, "ask", "p1", QUESTION])));
    assert!(out.contains("EpiPen"), "{out}");
    assert!(out.contains("| origin | label | entry |"), "{out}");
    assert!(out.contains("medical_knowledge") && out.contains("patient_context"), "{out}");
}

#[test]
fn kappa_on_perfect_agreement_prints_one() {
    let out = stdout(&ok(carecontext(&["kappa", fixtures().join("agreement_full.tsv").to_str().unwrap()])));
    assert!(out.starts_with("κ = 1 "), "{out}");
    assert!(out.contains("| Overall categories | 1.000000000 |"), "{out}");

    let structured = ok(carecontext(&["--format", "structured", "kappa", fixtures().join("agreement_full.tsv").to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&structured)).unwrap();
    assert_eq!(v["kappa"], serde_json::json!(1.0));
}

#[test]
fn eval_prints_one_row_per_framework_and_model() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().to_str().unwrap();
    let mock = ["--mode", "mock", "--data-dir", data];
    ok(carecontext(&[&mock[..], &["ingest-knowledge", fixtures().join("knowledge").to_str().unwrap()]].concat()));
    for t in ["p1_allergy.txt", "p2_cardiology.txt"] {
        ok(carecontext(&[&mock[..], &["add-patient", fixtures().join("transcripts").join(t).to_str().unwrap()]].concat()));
    }
    let out = stdout(&ok(carecontext(
        &[&mock[..], &["eval", fixtures().join("mini_dataset.tsv").to_str().unwrap(), "--models", "mock-a,mock-b"]].concat(),
    )));
    for model in ["mock-a", "mock-b"] {
        assert!(out.contains(&format!("| similarity | {model} |")), "{out}");
        assert!(out.contains(&format!("| alt-similarity | {model} |")), "{out}");
        assert!(out.contains(&format!("{model}: 10 rows, 0 failed")), "{out}");
    }
    assert!(std::fs::read_dir(work.path().join("reports")).unwrap().count() >= 2);
}

#[test]
fn likert_summary_is_printed() {
    let out = stdout(&ok(carecontext(&["likert", fixtures().join("likert_sample.tsv").to_str().unwrap()])));
    assert!(out.starts_with("mean "), "{out}");
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    let data = data.to_str().unwrap();

    let missing = carecontext(&["--mode", "mock", "--data-dir", data, "ask", "nobody", "Hello?"]);
    assert_eq!(missing.status.code(), Some(3));

    let bad = work.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"sideways\"\n").unwrap();
    assert_eq!(carecontext(&["--config", bad.to_str().unwrap(), "ask", "p1", "Hi?"]).status.code(), Some(2));

    let live = carecontext(&["--mode", "live", "--data-dir", data, "ask", "p1", "Hi?"]);
    assert_eq!(live.status.code(), Some(2), "live mode without a key is a config failure");

    let transcript = fixtures().join("transcripts/p1_allergy.txt");
    let invalid = carecontext(&["--mode", "mock", "--data-dir", data, "add-patient", transcript.to_str().unwrap(), "--patient-id", "../x"]);
    assert_eq!(invalid.status.code(), Some(5));

    let unknown_model = carecontext(&["--mode", "replay", "--data-dir", data, "ask", "p1", "Hi?"]);
    assert_ne!(unknown_model.status.code(), Some(0));

    let structured = carecontext(&["--mode", "mock", "--data-dir", data, "--format", "structured", "ask", "nobody", "Hi?"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&structured)).unwrap();
    assert_eq!(v["error"]["class"], "not_found");
    assert!(v["error"]["stage"].is_string());
}

#[test]
fn bundled_configs_parse() {
    for name in ["replay.toml", "live.example.toml"] {
        let c = Config::load(&root().join("config").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(c.data_dir.is_absolute());
    }
    let replay = Config::load(&root().join("config/replay.toml")).unwrap();
    assert!(replay.fixtures.iter().all(|f| f.exists()));
}
