//! Encoder and decoder parameters bundled with the vocabulary they index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TableSet, TimelineStore, Vocabulary, EOS};
use crate::decoder::{self, CopyTable, Decoded, DecoderParams};
use crate::encoder::{encode_tables, EncoderInput, EncoderParams};
use crate::error::{DataError, TensorError};
use crate::tensor::{ParamStore, Tape, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub window: usize,
    /// Half-width of the uniform initialisation range.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            window: 3,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub enc: EncoderParams,
    pub dec: DecoderParams,
}

/// One game turned into ids: encoder input, copy table and decoder targets
/// (the summary followed by the end token).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub game_id: String,
    pub input: EncoderInput,
    pub copy: CopyTable,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub game_id: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.window == 0 {
            return Err(TensorError::Contract("hidden size and window must be positive".into()).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let enc = EncoderParams::register(&mut store, v, config.hidden, config.window, config.init_scale, &mut rng)?;
        let dec = DecoderParams::register(&mut store, v, config.hidden, config.init_scale, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            enc,
            dec,
        })
    }

    /// Rebuilds a model around previously trained parameters. Every
    /// parameter must be present with the expected shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        if store.len() != model.store.len() {
            return Err(DataError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                store.len()
            ))
            .into());
        }
        for (_, p) in model.store.iter_mut() {
            let loaded = store
                .id(&p.name)
                .map(|id| store.get(id))
                .ok_or_else(|| DataError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if loaded.tensor.shape() != p.tensor.shape() {
                return Err(DataError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    loaded.tensor.shape(),
                    p.tensor.shape()
                ))
                .into());
            }
            *p = loaded.clone();
        }
        Ok(model)
    }

    pub fn prepare(&self, game: &TableSet, timelines: &TimelineStore) -> Example {
        let copy = CopyTable::new(game, &self.vocab);
        let mut targets: Vec<usize> = game.summary.iter().map(|t| copy.output_id(t, &self.vocab)).collect();
        targets.push(EOS);
        Example {
            game_id: game.game_id.clone(),
            input: EncoderInput::new(game, timelines, &self.vocab, self.config.window),
            copy,
            targets,
        }
    }

    /// Teacher-forced `log P(y_t)` for each target of `ex`.
    pub fn target_log_probs(
        &self,
        tape: &mut Tape,
        ex: &Example,
        targets: &[usize],
        dropout: f64,
        bptt_block: Option<usize>,
    ) -> Result<Vec<Var>, TensorError> {
        let enc = encode_tables(tape, &self.enc, &ex.input)?;
        let mem = decoder::build_memory(tape, &self.dec, &enc)?;
        decoder::teacher_forced_log_probs(tape, &self.dec, &mem, &ex.copy, targets, dropout, bptt_block)
    }

    /// `Σ_t log P(y_t | y_<t, S)` of exactly `tokens`. Tokens that are
    /// neither in the vocabulary nor copyable score as the unknown token.
    pub fn sequence_log_prob(&self, game: &TableSet, timelines: &TimelineStore, tokens: &[String]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let ex = self.prepare(game, timelines);
        let ids: Vec<usize> = tokens.iter().map(|t| ex.copy.output_id(t, &self.vocab)).collect();
        let mut tape = Tape::new(&self.store);
        let lps = self.target_log_probs(&mut tape, &ex, &ids, 0.0, None)?;
        Ok(lps.iter().map(|&v| tape.scalar_value(v)).sum())
    }

    fn decode_with(&self, ex: &Example, f: impl FnOnce(&mut Tape, &decoder::Memory) -> Result<Decoded, TensorError>) -> Result<Generated> {
        let mut tape = Tape::new(&self.store);
        let enc = encode_tables(&mut tape, &self.enc, &ex.input)?;
        let mem = decoder::build_memory(&mut tape, &self.dec, &enc)?;
        let out = f(&mut tape, &mem)?;
        let tokens = out
            .ids
            .iter()
            .map(|&id| ex.copy.token(id, &self.vocab).unwrap_or("<unk>").to_string())
            .collect();
        Ok(Generated {
            game_id: ex.game_id.clone(),
            tokens,
            log_prob: out.log_prob,
        })
    }

    pub fn beam_search(&self, ex: &Example, beam: usize, max_len: usize) -> Result<Generated> {
        self.decode_with(ex, |tape, mem| decoder::beam_search(tape, &self.dec, mem, &ex.copy, beam, max_len))
    }

    pub fn greedy(&self, ex: &Example, max_len: usize) -> Result<Generated> {
        self.decode_with(ex, |tape, mem| decoder::greedy_decode(tape, &self.dec, mem, &ex.copy, max_len))
    }
}
