use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiertab::baseline::{generate_template, TemplateConfig};
use hiertab::data::{build_timelines, load_corpus, save_corpus, CorpusSchema, Dataset, Split, TableSet, ToySpec};
use hiertab::eval::evaluate;
use hiertab::model::Generated;
use hiertab::training::{grad_check_model, train, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "hiertab", version, about = "Table-to-text generation with a hierarchical table encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a training log.
    Train(Flags),
    /// Beam-search a summary for every game of a split.
    Generate(Flags),
    /// Score generated summaries against the references.
    Evaluate(Flags),
    /// Write template summaries for a split.
    Template(Flags),
    /// Finite-difference check of the full model's gradients at tiny size.
    Gradcheck(Flags),
    /// Write a synthetic corpus.
    Toy(ToyFlags),
}

#[derive(Args, Clone, Debug, Default)]
struct Flags {
    /// TOML (or JSON) run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding train.json, dev.json and test.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Generated-summary JSON to score.
    #[arg(long)]
    generated: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct ToyFlags {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    games: usize,
    #[arg(long, default_value_t = 5)]
    dev_games: usize,
    #[arg(long, default_value_t = 5)]
    test_games: usize,
    #[arg(long, default_value_t = 4)]
    players: usize,
}

/// Settings for one run: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    data: Option<PathBuf>,
    split: Split,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    generated: Option<PathBuf>,
    seed: u64,
    beam: usize,
    max_len: usize,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: None,
            split: Split::Test,
            checkpoint: None,
            out: None,
            generated: None,
            seed: train.seed,
            beam: train.beam,
            max_len: train.max_len,
            train,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

const MISSING_DATA: u8 = 2;
const BAD_CHECKPOINT: u8 = 3;

type Outcome = Result<(), Failure>;

fn general(e: impl std::fmt::Display) -> Failure {
    Failure::new(1, e.to_string())
}

impl RunConfig {
    fn resolve(flags: &Flags) -> Result<Self, Failure> {
        let mut cfg = match &flags.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| general(format!("cannot read config {}: {e}", path.display())))?;
                let parsed = if path.extension().is_some_and(|x| x == "json") {
                    serde_json::from_str(&text).map_err(|e| e.to_string())
                } else {
                    toml::from_str(&text).map_err(|e| e.to_string())
                };
                parsed.map_err(|e| general(format!("invalid config {}: {e}", path.display())))?
            }
        };
        macro_rules! take {
            ($flag:ident => $($dst:tt)+) => {
                if let Some(v) = flags.$flag.clone() {
                    cfg.$($dst)+ = v.into();
                }
            };
        }
        take!(data => data);
        take!(split => split);
        take!(checkpoint => checkpoint);
        take!(out => out);
        take!(generated => generated);
        take!(seed => seed);
        take!(beam => beam);
        take!(max_len => max_len);
        take!(window => train.window);
        take!(hidden => train.hidden);
        take!(epochs => train.epochs);
        cfg.train.seed = cfg.seed;
        cfg.train.beam = cfg.beam;
        cfg.train.max_len = cfg.max_len;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        let dir = self.out.as_deref().ok_or_else(|| general("--out is required"))?;
        fs::create_dir_all(dir).map_err(|e| general(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn load_data(&self) -> Result<Dataset, Failure> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Failure::new(MISSING_DATA, "--data is required"))?;
        if !dir.is_dir() {
            return Err(Failure::new(MISSING_DATA, format!("data directory {} does not exist", dir.display())));
        }
        load_corpus(dir, &CorpusSchema::default()).map_err(|e| Failure::new(MISSING_DATA, e.to_string()))
    }

    fn load_checkpoint(&self) -> Result<TrainState, Failure> {
        let path = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| Failure::new(BAD_CHECKPOINT, "--checkpoint is required"))?;
        TrainState::load(path).map_err(|e| Failure::new(BAD_CHECKPOINT, format!("{}: {e}", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(general)?;
    fs::write(path, text + "\n").map_err(|e| general(format!("cannot write {}: {e}", path.display())))
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Outcome {
    write_json(&dir.join("config.json"), cfg)
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let data = cfg.load_data()?;
    let dir = cfg.out_dir()?;
    save_config(cfg, dir)?;
    let outcome = train(&data, &cfg.train, |e| {
        eprintln!(
            "epoch {:>4}  train {:.4}  dev {}  bleu {}  lr {:.5}",
            e.epoch,
            e.train_loss,
            e.dev_loss.map_or("-".into(), |d| format!("{d:.4}")),
            e.dev_bleu.map_or("-".into(), |b| format!("{b:.2}")),
            e.lr
        )
    })
    .map_err(general)?;
    outcome.last.save(&dir.join("checkpoint.json")).map_err(general)?;
    if let Some(best) = &outcome.best {
        best.save(&dir.join("best.json")).map_err(general)?;
    }
    write_json(&dir.join("log.json"), &outcome.log)
}

fn split_games(data: &Dataset, split: Split) -> &[TableSet] {
    data.split(split)
}

fn cmd_generate(cfg: &RunConfig) -> Outcome {
    let state = cfg.load_checkpoint()?;
    let data = cfg.load_data()?;
    let dir = cfg.out_dir()?;
    save_config(cfg, dir)?;
    let timelines = build_timelines(&data);
    let model = &state.model;
    let mut out = Vec::new();
    for game in split_games(&data, cfg.split) {
        let ex = model.prepare(game, &timelines);
        out.push(model.beam_search(&ex, cfg.beam, cfg.max_len).map_err(general)?);
    }
    write_json(&dir.join("generated.json"), &out)
}

fn cmd_template(cfg: &RunConfig) -> Outcome {
    let data = cfg.load_data()?;
    let dir = cfg.out_dir()?;
    save_config(cfg, dir)?;
    let out = split_games(&data, cfg.split)
        .iter()
        .map(|g| {
            Ok(Generated {
                game_id: g.game_id.clone(),
                tokens: generate_template(g, &TemplateConfig::default()).map_err(general)?,
                log_prob: 0.0,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    write_json(&dir.join("generated.json"), &out)
}

fn cmd_evaluate(cfg: &RunConfig) -> Outcome {
    let data = cfg.load_data()?;
    let path = cfg.generated.as_deref().ok_or_else(|| general("--generated is required"))?;
    let text = fs::read_to_string(path).map_err(|e| general(format!("cannot read {}: {e}", path.display())))?;
    let generated: Vec<Generated> =
        serde_json::from_str(&text).map_err(|e| general(format!("invalid generated file {}: {e}", path.display())))?;
    let games = split_games(&data, cfg.split);
    let mut tables = Vec::with_capacity(generated.len());
    for g in &generated {
        let game = games
            .iter()
            .find(|t| t.game_id == g.game_id)
            .ok_or_else(|| general(format!("game {} is not in the {:?} split", g.game_id, cfg.split)))?;
        tables.push(game.clone());
    }
    let cands: Vec<Vec<String>> = generated.into_iter().map(|g| g.tokens).collect();
    let refs: Vec<Vec<String>> = tables.iter().map(|t| t.summary.clone()).collect();
    let report = evaluate(&cands, &refs, &tables);
    println!("{}", serde_json::to_string_pretty(&report).map_err(general)?);
    if cfg.out.is_some() {
        let dir = cfg.out_dir()?;
        save_config(cfg, dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, flags: &Flags) -> Outcome {
    let hidden = flags.hidden.unwrap_or(8);
    let report = grad_check_model(hidden, cfg.seed, 1e-4).map_err(general)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(general)?);
    if cfg.out.is_some() {
        let dir = cfg.out_dir()?;
        save_config(cfg, dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(1, format!("gradient check failed: max relative error {:e}", report.max_rel_error)))
    }
}

fn cmd_toy(flags: &ToyFlags) -> Outcome {
    if flags.games == 0 || flags.players == 0 {
        return Err(general("--games and --players must be positive"));
    }
    let data = ToySpec::new(flags.seed, flags.games, flags.players)
        .with_splits(flags.dev_games, flags.test_games)
        .generate();
    save_corpus(&data, &flags.out, &CorpusSchema::default()).map_err(general)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Toy(flags) => cmd_toy(&flags),
        Command::Train(flags) => cmd_train(&RunConfig::resolve(&flags)?),
        Command::Generate(flags) => cmd_generate(&RunConfig::resolve(&flags)?),
        Command::Evaluate(flags) => cmd_evaluate(&RunConfig::resolve(&flags)?),
        Command::Template(flags) => cmd_template(&RunConfig::resolve(&flags)?),
        Command::Gradcheck(flags) => cmd_gradcheck(&RunConfig::resolve(&flags)?, &flags),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
