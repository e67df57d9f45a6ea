use std::path::Path;
use std::process::{Command, Output};

use hiertab::data::{build_timelines, load_corpus, CorpusSchema};
use hiertab::model::Generated;
use hiertab::training::TrainState;

fn hiertab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiertab")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path, test_games: &str) {
    let out = hiertab(&["toy", "--out", path(dir), "--seed", "3", "--games", "4", "--players", "2", "--dev-games", "1", "--test-games", test_games]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_data_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = hiertab(&["train", "--data", path(&missing), "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert_eq!(hiertab(&["template", "--out", path(tmp.path())]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    toy(&data, "1");
    let ckpt = tmp.path().join("bad.json");
    std::fs::write(&ckpt, "{ not json").unwrap();
    let out = hiertab(&["generate", "--data", path(&data), "--checkpoint", path(&ckpt), "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn templates_score_perfectly_against_toy_references() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    toy(&data, "2");
    let gen_dir = tmp.path().join("template");
    let out = hiertab(&["template", "--data", path(&data), "--split", "test", "--out", path(&gen_dir)]);
    assert!(out.status.success());
    let generated = gen_dir.join("generated.json");
    let out = hiertab(&["evaluate", "--data", path(&data), "--split", "test", "--generated", path(&generated), "--out", path(&gen_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["RG-P%", "CS-P%", "CS-R%", "CS-F1%", "CO-DLD%", "BLEU"] {
        assert!((report[key].as_f64().unwrap() - 100.0).abs() < 1e-9, "{key}");
    }
    assert_eq!(read_json(&gen_dir.join("metrics.json")), report);
}

#[test]
fn gradcheck_passes() {
    let out = hiertab(&["gradcheck", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_is_reproducible_and_generate_uses_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    toy(&data, "0");
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, "seed = 5\nmax_len = 30\n\n[train]\nhidden = 10\nepochs = 2\nbatch_size = 2\neval_bleu_every = 1\n").unwrap();

    let run = |out: &Path| {
        let o = hiertab(&["train", "--config", path(&config), "--data", path(&data), "--out", path(out), "--hidden", "6"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    assert_eq!(std::fs::read(a.join("log.json")).unwrap(), std::fs::read(b.join("log.json")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(b.join("checkpoint.json")).unwrap());
    assert!(a.join("best.json").exists());

    let saved = read_json(&a.join("config.json"));
    assert_eq!(saved["train"]["hidden"], 6, "flags override the config file");
    assert_eq!(saved["train"]["epochs"], 2);
    assert_eq!(saved["seed"], 5);
    assert_eq!(read_json(&a.join("log.json")).as_array().unwrap().len(), 2);

    // The saved configuration reproduces the run.
    let c = tmp.path().join("c");
    let o = hiertab(&["train", "--config", path(&a.join("config.json")), "--out", path(&c)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(a.join("log.json")).unwrap(), std::fs::read(c.join("log.json")).unwrap());

    let ckpt = a.join("checkpoint.json");
    let gen = tmp.path().join("gen");
    let o = hiertab(&["generate", "--data", path(&data), "--checkpoint", path(&ckpt), "--split", "train", "--beam", "1", "--max-len", "30", "--out", path(&gen)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let generated: Vec<Generated> = serde_json::from_value(read_json(&gen.join("generated.json"))).unwrap();
    assert_eq!(generated.len(), 4);

    let state = TrainState::load(&ckpt).unwrap();
    let ds = load_corpus(&data, &CorpusSchema::default()).unwrap();
    let tl = build_timelines(&ds);
    for (g, game) in generated.iter().zip(&ds.train) {
        let greedy = state.model.greedy(&state.model.prepare(game, &tl), 30).unwrap();
        assert_eq!(*g, greedy);
    }

    let o = hiertab(&["generate", "--data", path(&data), "--checkpoint", path(&ckpt), "--split", "test", "--out", path(&gen)]);
    assert!(o.status.success());
    assert_eq!(read_json(&gen.join("generated.json")), serde_json::json!([]));
}
