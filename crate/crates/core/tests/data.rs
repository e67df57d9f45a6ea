use std::fs;

use hiertab::data::{
    build_timelines, gen_toy_corpus, history_window, load_corpus, save_corpus, CorpusSchema, Dataset, ToySpec,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Four games of one team with two players and three stat columns.
fn one_team_corpus() -> tempfile::TempDir {
    let games: Vec<_> = (0..4)
        .map(|g| {
            let line = |base: u32| json!({"PTS": (base + g).to_string(), "AST": "1", "REB": "2"});
            json!({
                "game_id": format!("g{g}"),
                "date": format!("2016-01-0{}", g + 1),
                "home_players": {"A": line(10), "B": line(20)},
                "vis_players": {},
                "teams": {"T": line(30)},
                "summary": ["A", "scored"]
            })
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.json"), json!(games).to_string()).unwrap();
    fs::write(dir.path().join("dev.json"), "[]").unwrap();
    fs::write(dir.path().join("test.json"), "[]").unwrap();
    dir
}

#[test]
fn one_team_fixture_has_three_entities_and_full_timelines() {
    let dir = one_team_corpus();
    let ds = load_corpus(dir.path(), &CorpusSchema::default()).unwrap();
    let store = build_timelines(&ds);
    assert_eq!(store.num_entities(), 3);
    assert_eq!(store.num_types(), 3);
    for player in ["A", "B"] {
        for col in ["PTS", "AST", "REB"] {
            assert_eq!(store.get(player, col).unwrap().len(), 4);
        }
    }
    let pts: Vec<&str> = store.get("A", "PTS").unwrap().iter().map(|r| r.value.as_str()).collect();
    assert_eq!(pts, ["10", "11", "12", "13"]);
}

#[test]
fn golden_toy_vocabulary_size() {
    let ds = gen_toy_corpus(7, 20, 4);
    assert_eq!(ds.vocab.len(), GOLDEN_VOCAB_SIZE);
}

// Frozen from the first run.
const GOLDEN_VOCAB_SIZE: usize = 128;

#[test]
fn save_then_load_round_trips() {
    let ds = ToySpec::new(11, 6, 3).with_splits(2, 2).generate();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&ds, dir.path(), &CorpusSchema::default()).unwrap();
    let back = load_corpus(dir.path(), &CorpusSchema::default()).unwrap();
    assert_eq!(back, ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn timelines_ignore_corpus_order(seed in 0u64..1000, shuffle in 0u64..1000) {
        let ds = ToySpec::new(seed, 5, 2).with_splits(2, 1).generate();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut all: Vec<_> = ds.all_games().cloned().collect();
        all.shuffle(&mut rng);
        let shuffled = Dataset::new(all, vec![], vec![]);
        prop_assert_eq!(build_timelines(&shuffled), build_timelines(&ds));
    }

    #[test]
    fn history_is_strictly_earlier_and_ascending(seed in 0u64..1000, w in 1usize..6) {
        let ds = ToySpec::new(seed, 8, 2).generate();
        let store = build_timelines(&ds);
        for r in ds.all_games().flat_map(|g| g.records()) {
            let h = history_window(r, &store, w);
            prop_assert!(h.len() <= w);
            prop_assert!(h.iter().all(|x| x.date < r.date && x.entity == r.entity && x.rtype == r.rtype));
            prop_assert!(h.windows(2).all(|p| p[0].date < p[1].date));
        }
    }
}
