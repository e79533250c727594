mod common;

use common::{binomial_oracle, desk_params};
use proptest::prelude::*;
use scargan::dataset::{generate_corpus, CorpusConfig, ScanSlice};
use scargan::study::{compute_stats, Response, StudyError, StudyStore, Truth, DEFAULT_ITEMS_PER_CLASS};

fn pools() -> (Vec<ScanSlice>, Vec<ScanSlice>) {
    let corpus = generate_corpus(&CorpusConfig { n_slices: 80, params: desk_params(), seed: 0, ..Default::default() }).unwrap();
    let (real, free): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|s| s.has_scar);
    (real, free)
}

fn response(rater: &str, item: &str, choice: Truth) -> Response {
    Response { rater_id: rater.into(), item_id: item.into(), choice, timestamp: 0 }
}

fn flip(t: Truth) -> Truth {
    match t {
        Truth::Real => Truth::Simulated,
        Truth::Simulated => Truth::Real,
    }
}

fn truths(n: usize) -> Vec<(String, Truth)> {
    (0..n).map(|i| (format!("s-i{i:02}"), if i % 2 == 0 { Truth::Real } else { Truth::Simulated })).collect()
}

/// A rater who gets exactly the first `correct` items right.
fn rater(name: &str, truths: &[(String, Truth)], correct: usize) -> Vec<Response> {
    truths.iter().enumerate().map(|(i, (id, t))| response(name, id, if i < correct { *t } else { flip(*t) })).collect()
}

#[test]
fn default_study_has_fifteen_of_each() {
    let (real, sim) = pools();
    let dir = tempfile::tempdir().unwrap();
    let mut store = StudyStore::open(dir.path()).unwrap();
    let s = store.create_study("a", &real, &sim, DEFAULT_ITEMS_PER_CLASS, 3).unwrap();
    assert_eq!(s.header.items.len(), 30);
    assert_eq!(s.header.items.iter().filter(|i| i.truth == Truth::Real).count(), 15);
    let ids: std::collections::BTreeSet<_> = s.header.items.iter().map(|i| &i.item_id).collect();
    assert_eq!(ids.len(), 30);
    for item in &s.header.items {
        let pool = if item.truth == Truth::Real { &real } else { &sim };
        assert!(pool.iter().any(|p| p.slice_id == item.source_slice_id));
        let (size, image) = store.item_image(&item.item_id).unwrap();
        let src = pool.iter().find(|p| p.slice_id == item.source_slice_id).unwrap();
        assert_eq!((size, image), (src.size(), src.image.clone()));
    }

    let other = tempfile::tempdir().unwrap();
    let again = StudyStore::open(other.path()).unwrap().create_study("a", &real, &sim, 15, 3).unwrap();
    assert_eq!(again.header, s.header);
    let minimal = store.create_study("m", &real, &sim, 1, 3).unwrap();
    assert_eq!(minimal.header.items.len(), 2);
    assert!(matches!(store.create_study("a", &real, &sim, 15, 3), Err(StudyError::Conflict(_))));
    assert!(matches!(store.create_study("b", &real[..2], &sim, 3, 3), Err(StudyError::Invalid(_))));
}

#[test]
fn responses_are_unique_and_closed_by_finalize() {
    let (real, sim) = pools();
    let dir = tempfile::tempdir().unwrap();
    let mut store = StudyStore::open(dir.path()).unwrap();
    let s = store.create_study("r", &real, &sim, 2, 0).unwrap();
    let first = s.header.items[0].item_id.clone();
    assert_eq!(store.next_item("r", "r1").unwrap().unwrap().item_id, first);
    store.record_response("r", "r1", &first, Truth::Real).unwrap();
    assert!(matches!(store.record_response("r", "r1", &first, Truth::Simulated), Err(StudyError::Conflict(_))));
    assert!(matches!(store.record_response("r", "r1", "r-i99", Truth::Real), Err(StudyError::NotFound(_))));
    let next = store.next_item("r", "r1").unwrap().unwrap();
    assert_eq!((next.item_id.as_str(), next.answered, next.total), (s.header.items[1].item_id.as_str(), 1, 4));
    store.record_response("r", "r2", &first, Truth::Real).unwrap();
    store.finalize("r").unwrap();
    assert!(matches!(store.record_response("r", "r1", &next.item_id, Truth::Real), Err(StudyError::Finalized(_))));

    // A fresh store replays the log.
    let mut reopened = StudyStore::open(dir.path()).unwrap();
    assert_eq!(reopened.session("r").unwrap().responses.len(), 2);
    assert_eq!(reopened.stats("r", true).unwrap(), store.stats_from_log("r", true).unwrap());
    assert!(matches!(reopened.stats("r", false), Err(StudyError::Incomplete(_))));
}

#[test]
fn perfect_rater() {
    let t = truths(30);
    let stats = compute_stats(&t, &rater("r1", &t, 30), false).unwrap();
    let r = &stats.raters[0];
    assert_eq!(r.accuracy, 1.0);
    assert!((r.p_value - 1.862645149230957e-9).abs() < 1e-12);
    assert!((r.p_value - binomial_oracle(30, 30)).abs() < 1e-15);
}

#[test]
fn three_raters_and_consensus() {
    let t = truths(30);
    let mut responses = rater("a", &t, 18);
    responses.extend(rater("b", &t, 14));
    responses.extend(rater("c", &t, 15));
    let stats = compute_stats(&t, &responses, false).unwrap();
    let acc: Vec<f64> = stats.raters.iter().map(|r| (r.accuracy * 100.0).round()).collect();
    assert_eq!(acc, vec![60.0, 47.0, 50.0]);
    for (r, k) in stats.raters.iter().zip([18, 14, 15]) {
        assert!((r.p_value - binomial_oracle(k, 30)).abs() < 1e-9);
    }
    assert_eq!(stats.raters[2].p_value, 1.0);
    // Items 0..14 are right by all three, 14 by a and c, 15..17 by a only.
    let c = stats.consensus.unwrap();
    assert_eq!(c.correct, 15);
    assert!((c.p_value - binomial_oracle(15, 30)).abs() < 1e-9);
    let v = &stats.items[14];
    assert_eq!((v.real_votes, v.simulated_votes, v.majority), (2, 1, Some(Truth::Real)));
}

#[test]
fn even_rater_count_omits_consensus() {
    let t = truths(4);
    let mut responses = rater("a", &t, 4);
    responses.extend(rater("b", &t, 0));
    let stats = compute_stats(&t, &responses, false).unwrap();
    assert!(stats.consensus.is_none());
    assert!(stats.notice.unwrap().contains("even"));
    assert!(stats.items.iter().all(|v| v.majority.is_none()));
}

#[test]
fn duplicate_and_unknown_responses_in_a_log_are_rejected() {
    let t = truths(2);
    let dup = vec![response("a", "s-i00", Truth::Real), response("a", "s-i00", Truth::Real)];
    assert!(matches!(compute_stats(&t, &dup, true), Err(StudyError::Conflict(_))));
    assert!(matches!(compute_stats(&t, &[response("a", "zz", Truth::Real)], true), Err(StudyError::NotFound(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn item_order_is_a_permutation(seed in any::<u64>(), n_each in 1usize..8) {
        let (real, sim) = pools();
        let dir = tempfile::tempdir().unwrap();
        let s = StudyStore::open(dir.path()).unwrap().create_study("p", &real, &sim, n_each, seed).unwrap();
        let mut got: Vec<&str> = s.header.items.iter().map(|i| i.source_slice_id.as_str()).collect();
        got.sort();
        got.dedup();
        prop_assert_eq!(got.len(), 2 * n_each);
        prop_assert_eq!(s.header.items.iter().filter(|i| i.truth == Truth::Simulated).count(), n_each);
    }

    #[test]
    fn accuracies_stay_in_unit_interval(k in proptest::collection::vec(0usize..=10, 1..6)) {
        let t = truths(10);
        let responses: Vec<Response> = k.iter().enumerate().flat_map(|(i, &c)| rater(&format!("r{i}"), &t, c)).collect();
        let stats = compute_stats(&t, &responses, false).unwrap();
        for (r, &c) in stats.raters.iter().zip(&k) {
            prop_assert_eq!(r.correct, c);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }
        prop_assert_eq!(stats.consensus.is_some(), k.len() % 2 == 1);
    }
}
