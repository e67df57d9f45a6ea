//! Mini-batch NLL training with Adagrad, truncated BPTT, learning-rate
//! decay, early stopping and JSON checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{build_timelines, Dataset, TimelineStore, ToySpec, Vocabulary};
use crate::error::{DataError, Error, TensorError};
use crate::eval::bleu;
use crate::model::{Example, Model, ModelConfig};
use crate::tensor::{grad_check, GradCheckReport, Gradients, ParamStore, Tape, Var, CHECKPOINT_VERSION};
use crate::Result;

const ADAGRAD_EPS: f64 = 1e-8;
const CHECKPOINT_FORMAT: &str = "hiertab-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Decoder steps per truncated-BPTT block; `None` backpropagates
    /// through the whole summary.
    pub bptt_block: Option<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub window: usize,
    pub beam: usize,
    pub init_scale: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a dev-loss improvement.
    pub patience: usize,
    /// Dev BLEU (greedy) is computed every this many epochs; 0 disables it.
    pub eval_bleu_every: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.15,
            lr_decay: 0.97,
            batch_size: 5,
            bptt_block: Some(100),
            dropout: 0.3,
            epochs: 500,
            seed: 1,
            hidden: 32,
            window: 3,
            beam: 5,
            init_scale: 0.1,
            clip_norm: Some(5.0),
            patience: 25,
            eval_bleu_every: 10,
            max_len: 200,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            window: self.window,
            init_scale: self.init_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("invalid training config: {what}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden == 0 || self.window == 0 || self.beam == 0 {
            return bad("batch_size, epochs, hidden, window and beam must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.bptt_block == Some(0) {
            return bad("bptt_block must be positive");
        }
        Ok(())
    }
}

/// `−(1/|batch|) Σ_g Σ_t log P(y_t,g | y_<t,g, S_g)`, teacher-forced.
pub fn nll_loss(tape: &mut Tape, model: &Model, batch: &[Example], dropout: f64, bptt_block: Option<usize>) -> Result<Var> {
    if batch.is_empty() {
        return Err(TensorError::Contract("nll_loss needs a non-empty batch".into()).into());
    }
    let mut terms = Vec::new();
    for ex in batch {
        terms.extend(model.target_log_probs(tape, ex, &ex.targets, dropout, bptt_block)?);
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, -1.0 / batch.len() as f64)?)
}

/// Teacher-forced loss and gradients for one batch. Dropout masks come from
/// `rng`; with zero dropout the tape runs in inference mode.
pub fn loss_and_gradients(
    model: &Model,
    batch: &[Example],
    dropout: f64,
    bptt_block: Option<usize>,
    rng: ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let mut tape = if dropout > 0.0 {
        Tape::with_dropout_rng(&model.store, rng)
    } else {
        Tape::new(&model.store)
    };
    let loss = nll_loss(&mut tape, model, batch, dropout, bptt_block)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), grads))
}

/// Per coordinate: `acc += g²; θ −= lr·g / (√acc + ε)`.
pub fn adagrad_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    for (id, p) in store.iter_mut() {
        let g = grads.get(id);
        let theta = p.tensor.data_mut();
        for ((t, a), &gi) in theta.iter_mut().zip(p.accumulator.iter_mut()).zip(g) {
            *a += gi * gi;
            *t -= lr * gi / (a.sqrt() + ADAGRAD_EPS);
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Mean per-token NLL of `examples`, dropout off.
pub fn per_token_nll(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut tape = Tape::new(&model.store);
        let lps = model.target_log_probs(&mut tape, ex, &ex.targets, 0.0, None)?;
        total -= lps.iter().map(|&v| tape.scalar_value(v)).sum::<f64>();
        tokens += ex.targets.len();
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

/// Corpus BLEU of greedy decodes against the reference summaries.
pub fn greedy_bleu(model: &Model, examples: &[Example], references: &[Vec<String>], max_len: usize) -> Result<f64> {
    let mut cands = Vec::with_capacity(examples.len());
    for ex in examples {
        cands.push(model.greedy(ex, max_len)?.tokens);
    }
    Ok(bleu(&cands, references))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token NLL over the epoch's batches, dropout on.
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_bleu: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub best_dev_bleu: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: TrainState,
    /// Snapshot with the best dev BLEU, if dev BLEU was ever computed.
    pub best: Option<TrainState>,
    pub log: Vec<EpochLog>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Trains on `dataset.train`, evaluating on `dataset.dev` when it is not
/// empty. `on_epoch` sees each log entry as it is produced.
pub fn train(dataset: &Dataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let timelines = build_timelines(dataset);
    let model = Model::new(config.model_config(), dataset.vocab.clone(), config.seed)?;
    train_model(model, dataset, &timelines, config, &mut on_epoch)
}

fn train_model(
    model: Model,
    dataset: &Dataset,
    timelines: &TimelineStore,
    config: &TrainConfig,
    on_epoch: &mut impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let train: Vec<Example> = dataset.train.iter().map(|g| model.prepare(g, timelines)).collect();
    let dev: Vec<Example> = dataset.dev.iter().map(|g| model.prepare(g, timelines)).collect();
    let dev_refs: Vec<Vec<String>> = dataset.dev.iter().map(|g| g.summary.clone()).collect();

    let mut state = TrainState {
        model,
        config: config.clone(),
        epoch: 0,
        lr: config.learning_rate,
        best_dev_bleu: None,
    };
    let mut best = None;
    let mut log = Vec::new();
    let mut best_dev_loss = f64::INFINITY;
    let mut since_improvement = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut epoch_rng(config.seed, epoch, 0));
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let rng = epoch_rng(config.seed, epoch, 1 + step as u64);
            let (loss, mut grads) = loss_and_gradients(&state.model, &batch, config.dropout, config.bptt_block, rng)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adagrad_step(&mut state.model.store, &grads, state.lr);
            loss_sum += loss * batch.len() as f64;
            tokens += batch.iter().map(|e| e.targets.len()).sum::<usize>();
        }

        let lr_used = state.lr;
        state.epoch = epoch + 1;
        state.lr *= config.lr_decay;

        let dev_loss = if dev.is_empty() { None } else { Some(per_token_nll(&state.model, &dev)?) };
        let bleu_due = config.eval_bleu_every > 0 && (epoch + 1) % config.eval_bleu_every == 0;
        let dev_bleu = if bleu_due && !dev.is_empty() {
            Some(greedy_bleu(&state.model, &dev, &dev_refs, config.max_len)?)
        } else {
            None
        };
        if let Some(b) = dev_bleu {
            if state.best_dev_bleu.is_none_or(|old| b > old) {
                state.best_dev_bleu = Some(b);
                best = Some(state.clone());
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / tokens.max(1) as f64,
            dev_loss,
            dev_bleu,
            lr: lr_used,
        };
        on_epoch(&entry);
        log.push(entry);

        if let Some(d) = dev_loss {
            if d < best_dev_loss {
                best_dev_loss = d;
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome { last: state, best, log })
}

impl TrainState {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model.config,
            "train_config": self.config,
            "vocab": self.model.vocab,
            "epoch": self.epoch,
            "lr": self.lr,
            "best_dev_bleu": self.best_dev_bleu,
            "params": self.model.store.to_json(),
        })
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let bad = |why: String| Error::Data(DataError::Checkpoint(why));
        let mut obj = match value {
            serde_json::Value::Object(m) => m,
            _ => return Err(bad("checkpoint is not a JSON object".into())),
        };
        if obj.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a model checkpoint".into()));
        }
        if obj.get("version").and_then(|v| v.as_u64()) != Some(CHECKPOINT_VERSION as u64) {
            return Err(bad(format!("unsupported checkpoint version {:?}", obj.get("version"))));
        }
        let mut take = |key: &str| obj.remove(key).ok_or_else(|| bad(format!("missing field {key}")));
        let field_err = |key: &str, e: serde_json::Error| bad(format!("field {key}: {e}"));
        let model_config: ModelConfig = serde_json::from_value(take("model_config")?).map_err(|e| field_err("model_config", e))?;
        let config: TrainConfig = serde_json::from_value(take("train_config")?).map_err(|e| field_err("train_config", e))?;
        let vocab: Vocabulary = serde_json::from_value(take("vocab")?).map_err(|e| field_err("vocab", e))?;
        let epoch: usize = serde_json::from_value(take("epoch")?).map_err(|e| field_err("epoch", e))?;
        let lr: f64 = serde_json::from_value(take("lr")?).map_err(|e| field_err("lr", e))?;
        let best_dev_bleu: Option<f64> =
            serde_json::from_value(take("best_dev_bleu")?).map_err(|e| field_err("best_dev_bleu", e))?;
        let store = ParamStore::from_json(take("params")?)?;
        let model = Model::from_parts(model_config, vocab, store)?;
        Ok(Self {
            model,
            config,
            epoch,
            lr,
            best_dev_bleu,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json()).expect("checkpoint serialises");
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(value)
    }
}

/// Gradient check of the complete model (encoder, decoder, copy mixture and
/// loss) on a tiny synthetic game: two players, three columns, window 2 and
/// a 40-token vocabulary. Numbers stay out of the vocabulary so the scored
/// prefix exercises the extended copy ids.
pub fn grad_check_model(hidden: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let ds = ToySpec::new(seed, 2, 1).with_columns(&["PTS", "AST", "REB"]).with_teams(2).generate();
    let words = ds
        .train
        .iter()
        .flat_map(|g| g.summary.iter().cloned().chain(g.records().flat_map(|r| [r.entity.clone(), r.rtype.clone()])))
        .filter(|t| t.parse::<f64>().is_err());
    let mut vocab = Vocabulary::from_tokens(words);
    if vocab.len() > 40 {
        return Err(Error::Contract(format!("grad-check vocabulary has {} tokens, more than 40", vocab.len())));
    }
    vocab.pad_to(40);
    let config = ModelConfig {
        hidden,
        window: 2,
        init_scale: 0.3,
    };
    let model = Model::new(config, vocab, seed)?;
    let timelines = build_timelines(&ds);
    let mut ex = model.prepare(&ds.train[1], &timelines);
    let keep = 12.min(ex.targets.len() - 1);
    ex.targets.drain(keep..ex.targets.len() - 1);
    let batch = [ex];
    let report = grad_check(
        &model.store,
        |tape| nll_loss(tape, &model, &batch, 0.0, None).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }),
        tol,
        seed,
    )?;
    Ok(report)
}
