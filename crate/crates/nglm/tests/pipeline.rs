use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nglm::corpus::{
    export_training_pairs, load_parallel_corpus, load_qa_corpus, parse_qa_corpus, read_parallel_prefix, Department, LoadMode,
    PairWriter, ParallelCorpusRecord, DEFAULT_EXPORT_INSTRUCTION,
};
use nglm::library::TOY_CORPUS;
use nglm::translate::{
    translate_batch, translate_file, FnTransport, ItemStatus, RetryPolicy, SourceItem, TranslateError, TranslatorClient,
    TransportError, UppercaseTransport,
};
use proptest::prelude::*;

fn quiet(client: TranslatorClient) -> TranslatorClient {
    client.with_sleeper(Arc::new(|_| {}))
}

#[test]
fn bundled_corpus_loads_strictly() {
    let c = parse_qa_corpus(TOY_CORPUS, LoadMode::Strict).unwrap();
    assert_eq!(c.stats.total, 32);
    assert!(c.errors.is_empty());
    assert_eq!(c.stats.by_department.values().sum::<usize>(), 32);
}

#[test]
fn lenient_loading_skips_and_reports_bad_lines() {
    let text = format!("{}\nnot json\n{{\"question\":\"\",\"answer\":\"a\",\"department\":\"Surgical\",\"language\":\"EN\"}}\n", TOY_CORPUS.lines().next().unwrap());
    let c = parse_qa_corpus(&text, LoadMode::Lenient).unwrap();
    assert_eq!(c.records.len(), 1);
    assert_eq!(c.errors.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 3]);
    assert!(parse_qa_corpus(&text, LoadMode::Strict).is_err());
}

#[test]
fn translate_export_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let client = TranslatorClient::new(UppercaseTransport, "mock-upper");
    let sources = SourceItem::numbered(&["sore throat", "fever", "cough"]);
    let report = translate_file(&client, &sources, &out, 2).unwrap();
    assert_eq!(report.records.len(), 3);
    let pairs = load_parallel_corpus(&out).unwrap();
    assert_eq!(pairs[1].target, "FEVER");
    assert_eq!(pairs[1].translator, "mock-upper");

    let qa = dir.path().join("qa.jsonl");
    assert_eq!(export_training_pairs(&pairs, DEFAULT_EXPORT_INSTRUCTION, &qa).unwrap(), 3);
    let loaded = load_qa_corpus(&qa, LoadMode::Strict).unwrap();
    assert_eq!(loaded.stats.synthetic, 3);
    assert!(loaded.records.iter().all(|r| r.department == Department::Multiple));
    assert!(loaded.records[0].question.ends_with("sore throat"));
}

#[test]
fn resume_skips_done_items_and_cuts_torn_tails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let sources = SourceItem::numbered(&(0..10).map(|i| format!("text {i}")).collect::<Vec<_>>());
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let client = TranslatorClient::new(
        FnTransport(move |_: &str, t: &str| {
            counter.fetch_add(1, Ordering::Relaxed);
            Ok(t.to_uppercase())
        }),
        "mock",
    );
    translate_file(&client, &sources[..4], &out, 1).unwrap();
    let mut bytes = std::fs::read(&out).unwrap();
    bytes.extend_from_slice(b"{\"source\":\"torn");
    std::fs::write(&out, &bytes).unwrap();

    let report = translate_file(&client, &sources, &out, 3).unwrap();
    assert_eq!(report.resumed, 4);
    assert_eq!(calls.load(Ordering::Relaxed), 10);
    let pairs = load_parallel_corpus(&out).unwrap();
    let origins: Vec<String> = pairs.iter().map(|p| p.origin.clone()).collect();
    assert_eq!(origins, (0..10).map(|i| i.to_string()).collect::<Vec<_>>());
}

#[test]
fn permanent_failures_are_reported_and_skipped() {
    let client = quiet(TranslatorClient::new(
        FnTransport(|_: &str, t: &str| {
            if t.contains("bad") {
                Err(TransportError::Permanent("refused".into()))
            } else {
                Ok(t.to_string())
            }
        }),
        "mock",
    ));
    let mut w = PairWriter::new(Vec::new());
    let r = translate_batch(&client, &SourceItem::numbered(&["ok", "bad", "fine"]), &mut w, 2).unwrap();
    assert_eq!(r.records.iter().map(|p| p.origin.as_str()).collect::<Vec<_>>(), ["0", "2"]);
    assert!(matches!(r.outcomes[1].status, ItemStatus::Failed { .. }));
    assert_eq!(r.failed().count(), 1);
}

#[test]
fn exhausted_retries_fail_the_item() {
    let client = quiet(
        TranslatorClient::new(FnTransport(|_: &str, _: &str| Err(TransportError::Transient("503".into()))), "mock")
            .with_retry(RetryPolicy {
                max_attempts: 3,
                ..RetryPolicy::default()
            }),
    );
    let mut w = PairWriter::new(Vec::new());
    let r = translate_batch(&client, &SourceItem::numbered(&["x"]), &mut w, 1).unwrap();
    assert_eq!(r.outcomes[0].retries, 2);
    assert!(r.records.is_empty());
}

#[test]
fn auth_errors_abort_with_a_partial_report() {
    let client = quiet(TranslatorClient::new(
        FnTransport(|_: &str, t: &str| {
            if t == "3" {
                Err(TransportError::Auth("401".into()))
            } else {
                Ok(t.to_string())
            }
        }),
        "mock",
    ));
    let texts: Vec<String> = (0..8).map(|i| i.to_string()).collect();
    let mut w = PairWriter::new(Vec::new());
    match translate_batch(&client, &SourceItem::numbered(&texts), &mut w, 1) {
        Err(TranslateError::Auth { origin, report, .. }) => {
            assert_eq!(origin, "3");
            assert_eq!(report.records.len(), 3);
        }
        other => panic!("{other:?}"),
    }
    let (written, _) = read_parallel_prefix(&w.into_inner());
    assert_eq!(written.len(), 3);
}

#[test]
fn backoff_grows_and_caps() {
    let p = RetryPolicy::default();
    let waits: Vec<u128> = (1..=10).map(|k| p.backoff(k).as_millis()).collect();
    assert_eq!(&waits[..3], &[500, 1000, 2000]);
    assert!(waits.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*waits.last().unwrap(), p.max_backoff_ms as u128);
}

fn record(i: usize, text: &str) -> ParallelCorpusRecord {
    ParallelCorpusRecord {
        source: text.to_string(),
        target: text.to_uppercase(),
        origin: i.to_string(),
        translator: "t".into(),
    }
}

proptest! {
    #[test]
    fn any_byte_prefix_parses_to_a_record_prefix(
        texts in prop::collection::vec("[a-z 扁桃体\"\\\\]{0,12}", 1..12),
        cut in 0usize..2000,
    ) {
        let mut w = PairWriter::new(Vec::new());
        let records: Vec<_> = texts.iter().enumerate().map(|(i, t)| record(i, t)).collect();
        for r in &records {
            w.append(r).unwrap();
        }
        let bytes = w.into_inner();
        let cut = cut % (bytes.len() + 1);
        let (got, valid) = read_parallel_prefix(&bytes[..cut]);
        prop_assert!(valid <= cut);
        prop_assert_eq!(&got[..], &records[..got.len()]);
        let complete = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
        prop_assert_eq!(got.len(), complete);
    }
}
