use webcp::miner::{
    manifest_bytes, mine_corpus, read_corpus, write_corpus, FixtureFetcher, FixtureSearchProvider, MineRequest,
};
use webcp::synth::{write_fixture, FixtureSpec};
use webcp::text::{stored_sentences, token_count, MAX_CONTEXT_SENTENCES, MAX_CONTEXT_TOKENS};

fn fixture() -> (tempfile::TempDir, FixtureSpec) {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec::default();
    write_fixture(&spec, dir.path()).unwrap();
    (dir, spec)
}

fn request(spec: &FixtureSpec, max_in_flight: usize) -> MineRequest {
    MineRequest {
        task_name: spec.task_name.clone(),
        classes: spec.classes(),
        query_template: "An image of <category>".into(),
        per_class: spec.per_class,
        max_in_flight,
    }
}

#[test]
fn mining_is_deterministic_and_bounded() {
    let (dir, spec) = fixture();
    let web = dir.path().join("web");
    let provider = FixtureSearchProvider::new(&web);
    let fetcher = FixtureFetcher::open(&web).unwrap();

    let a = mine_corpus(&request(&spec, 8), &provider, &fetcher).unwrap();
    let b = mine_corpus(&request(&spec, 1), &provider, &fetcher).unwrap();
    assert_eq!(manifest_bytes(&a.manifest), manifest_bytes(&b.manifest));

    assert_eq!(a.manifest.examples.len(), 3 * spec.per_class);
    for ex in &a.manifest.examples {
        for field in [&ex.pre_text, &ex.post_text] {
            assert!(token_count(field) <= MAX_CONTEXT_TOKENS, "{}", ex.example_id);
            assert!(stored_sentences(field).len() <= MAX_CONTEXT_SENTENCES, "{}", ex.example_id);
        }
    }

    for stats in a.manifest.stats.values() {
        for reason in ["page_timeout", "page_blocked", "lazy_loaded", "no_image_match", "missing_context"] {
            assert!(stats.skipped.contains_key(reason), "missing {reason}: {stats:?}");
        }
    }
    // Pages without alt text are still mined, from their surrounding text.
    assert!(a.manifest.examples.iter().any(|e| e.alt_text.is_empty() && !e.pre_text.is_empty()));
    // The long page hits both bounds.
    assert!(a
        .manifest
        .examples
        .iter()
        .any(|e| stored_sentences(&e.post_text).len() == MAX_CONTEXT_SENTENCES));
}

#[test]
fn corpus_round_trips_through_disk() {
    let (dir, spec) = fixture();
    let web = dir.path().join("web");
    let corpus = mine_corpus(
        &request(&spec, 4),
        &FixtureSearchProvider::new(&web),
        &FixtureFetcher::open(&web).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("corpus");
    write_corpus(&out, &corpus).unwrap();
    assert_eq!(read_corpus(&out).unwrap(), corpus.manifest);
    for ex in &corpus.manifest.examples {
        assert!(out.join(&ex.image_bytes_path).is_file());
    }
}
