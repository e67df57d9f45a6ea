//! Two-layer LSTM decoder with input feeding, dual attention and
//! conditional copy.
//!
//! At each step the decoder state `d_t` scores every row (β, normalised over
//! all rows of all tables) and every record within its row (γ, normalised
//! per row). Record weights are `α̃ = β·γ`, which sum to one over all
//! records. The output distribution mixes vocabulary generation with
//! copying a record value:
//!
//! `P(y) = p_copy · Σ_{records with value y} α̃ + (1 − p_copy) · P_gen(y)`.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::data::{TableSet, Vocabulary, BOS, EOS, PAD, UNK};
use crate::encoder::EncodedTables;
use crate::error::TensorError;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub hidden: usize,
    pub vocab_size: usize,
    pub word_emb: ParamId,
    pub lstm: [LstmLayer; 2],
    /// Affine map from the mean gated row to `[h1; c1; h2; c2]`.
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub row_score: ParamId,
    pub record_score: ParamId,
    /// `d̃ = tanh(W_c [d; context])`.
    pub merge_w: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub copy_w: ParamId,
    pub copy_b: ParamId,
}

impl DecoderParams {
    pub fn register<R: Rng>(store: &mut ParamStore, vocab_size: usize, hidden: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let h = hidden;
        let mut add = |name: &str, shape: &[usize], rng: &mut R| store.add(format!("dec.{name}"), Tensor::uniform(shape, scale, rng));
        let word_emb = add("word_emb", &[vocab_size, h], rng)?;
        let lstm = [
            LstmLayer {
                w: add("lstm0.w", &[4 * h, 3 * h], rng)?,
                b: add("lstm0.b", &[4 * h], rng)?,
            },
            LstmLayer {
                w: add("lstm1.w", &[4 * h, 2 * h], rng)?,
                b: add("lstm1.b", &[4 * h], rng)?,
            },
        ];
        Ok(Self {
            hidden,
            vocab_size,
            word_emb,
            lstm,
            init_w: add("init.w", &[4 * h, h], rng)?,
            init_b: add("init.b", &[4 * h], rng)?,
            row_score: add("attn.row", &[h, h], rng)?,
            record_score: add("attn.record", &[h, h], rng)?,
            merge_w: add("merge.w", &[h, 2 * h], rng)?,
            out_w: add("out.w", &[vocab_size, h], rng)?,
            out_b: add("out.b", &[vocab_size], rng)?,
            copy_w: add("copy.w", &[h], rng)?,
            copy_b: add("copy.b", &[1], rng)?,
        })
    }
}

/// Output ids of the records a decoder can copy from.
///
/// Output ids below the vocabulary size are vocabulary tokens; record values
/// missing from the vocabulary get per-game extended ids after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyTable {
    vocab_size: usize,
    record_ids: Vec<usize>,
    extended: Vec<String>,
    by_output: HashMap<usize, Vec<usize>>,
}

impl CopyTable {
    /// Records are listed table by table, row by row, matching the order
    /// used by [`Memory`].
    pub fn new(game: &TableSet, vocab: &Vocabulary) -> Self {
        let mut extended: Vec<String> = Vec::new();
        let mut record_ids = Vec::new();
        for r in game.records() {
            let id = match vocab.get(&r.value) {
                Some(id) => id,
                None => match extended.iter().position(|v| *v == r.value) {
                    Some(k) => vocab.len() + k,
                    None => {
                        extended.push(r.value.clone());
                        vocab.len() + extended.len() - 1
                    }
                },
            };
            record_ids.push(id);
        }
        let mut by_output: HashMap<usize, Vec<usize>> = HashMap::new();
        for (k, &id) in record_ids.iter().enumerate() {
            by_output.entry(id).or_default().push(k);
        }
        Self {
            vocab_size: vocab.len(),
            record_ids,
            extended,
            by_output,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab_size + self.extended.len()
    }

    pub fn num_records(&self) -> usize {
        self.record_ids.len()
    }

    pub fn record_output_ids(&self) -> &[usize] {
        &self.record_ids
    }

    /// Indices of records whose value is output `id`.
    pub fn records_with(&self, id: usize) -> &[usize] {
        self.by_output.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Vocabulary id, else extended copy id, else the unknown id.
    pub fn output_id(&self, token: &str, vocab: &Vocabulary) -> usize {
        vocab
            .get(token)
            .or_else(|| self.extended.iter().position(|v| v == token).map(|k| self.vocab_size + k))
            .unwrap_or(UNK)
    }

    pub fn token<'a>(&'a self, id: usize, vocab: &'a Vocabulary) -> Option<&'a str> {
        if id < self.vocab_size {
            vocab.token(id)
        } else {
            self.extended.get(id - self.vocab_size).map(String::as_str)
        }
    }
}

/// Encoder outputs flattened for attention.
pub struct Memory {
    /// `[N, H]` fused records of all tables.
    pub records: Var,
    pub record_keys: Var,
    /// `[M, H]` gated row vectors of all tables.
    pub rows: Var,
    pub row_keys: Var,
    pub row_lens: Vec<usize>,
}

pub struct DecoderVars {
    word_emb: Var,
    lstm_w: [Var; 2],
    lstm_b: [Var; 2],
    merge_w: Var,
    out_w: Var,
    out_b: Var,
    copy_w: Var,
    copy_b: Var,
    pub vocab_size: usize,
    pub hidden: usize,
}

impl DecoderVars {
    pub fn new(tape: &mut Tape, p: &DecoderParams) -> Self {
        Self {
            word_emb: tape.param(p.word_emb),
            lstm_w: [tape.param(p.lstm[0].w), tape.param(p.lstm[1].w)],
            lstm_b: [tape.param(p.lstm[0].b), tape.param(p.lstm[1].b)],
            merge_w: tape.param(p.merge_w),
            out_w: tape.param(p.out_w),
            out_b: tape.param(p.out_b),
            copy_w: tape.param(p.copy_w),
            copy_b: tape.param(p.copy_b),
            vocab_size: p.vocab_size,
            hidden: p.hidden,
        }
    }
}

pub fn build_memory(tape: &mut Tape, p: &DecoderParams, enc: &EncodedTables) -> Result<Memory> {
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut row_lens = Vec::new();
    for t in &enc.tables {
        for (i, fused) in t.fused.iter().enumerate() {
            records.extend_from_slice(fused);
            row_lens.push(fused.len());
            rows.push(t.gated_rows[i]);
        }
    }
    if records.is_empty() {
        return Err(TensorError::Contract("cannot decode from empty tables".into()));
    }
    let records = tape.stack_rows(&records)?;
    let rows = tape.stack_rows(&rows)?;
    let rec_w = tape.param(p.record_score);
    let rec_w_t = tape.transpose(rec_w)?;
    let record_keys = tape.matmul(records, rec_w_t)?;
    let row_w = tape.param(p.row_score);
    let row_w_t = tape.transpose(row_w)?;
    let row_keys = tape.matmul(rows, row_w_t)?;
    Ok(Memory {
        records,
        record_keys,
        rows,
        row_keys,
        row_lens,
    })
}

/// Hidden and cell states of both layers plus the fed-back attentional state.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: [Var; 2],
    pub c: [Var; 2],
    pub feed: Var,
}

impl DecoderState {
    /// Same values, no gradient path to earlier steps.
    pub fn detach(&self, tape: &mut Tape) -> Self {
        Self {
            h: [tape.detach(self.h[0]), tape.detach(self.h[1])],
            c: [tape.detach(self.c[0]), tape.detach(self.c[1])],
            feed: tape.detach(self.feed),
        }
    }
}

/// Both layers start from an affine map of the mean gated row vector; the
/// fed-back state starts at zero.
pub fn init_state(tape: &mut Tape, p: &DecoderParams, mem: &Memory) -> Result<DecoderState> {
    let h = p.hidden;
    let mean = tape.mean_over_axis(mem.rows, 0)?;
    let w = tape.param(p.init_w);
    let b = tape.param(p.init_b);
    let pre = tape.matvec(w, mean)?;
    let all = tape.add(pre, b)?;
    Ok(DecoderState {
        h: [tape.slice(all, 0, h)?, tape.slice(all, 2 * h, h)?],
        c: [tape.slice(all, h, h)?, tape.slice(all, 3 * h, h)?],
        feed: tape.zeros(&[h]),
    })
}

fn lstm_cell(tape: &mut Tape, w: Var, b: Var, x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let xh = tape.concat(&[x, h])?;
    let pre = tape.matvec(w, xh)?;
    let z = tape.add(pre, b)?;
    let i = tape.slice(z, 0, hidden)?;
    let f = tape.slice(z, hidden, hidden)?;
    let g = tape.slice(z, 2 * hidden, hidden)?;
    let o = tape.slice(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

#[derive(Clone, Copy, Debug)]
pub struct DualAttention {
    /// Row weights over all rows of all tables.
    pub beta: Var,
    /// Record weights, normalised within each row.
    pub gamma: Var,
    /// `β_i · γ_ij`, normalised over all records.
    pub alpha: Var,
}

pub fn dual_attention(tape: &mut Tape, d: Var, mem: &Memory) -> Result<DualAttention> {
    let row_scores = tape.matvec(mem.row_keys, d)?;
    let beta = tape.softmax(row_scores)?;
    let rec_scores = tape.matvec(mem.record_keys, d)?;
    let gamma = tape.segment_softmax(rec_scores, &mem.row_lens)?;
    let beta_rep = tape.repeat_segments(beta, &mem.row_lens)?;
    let alpha = tape.mul(beta_rep, gamma)?;
    Ok(DualAttention { beta, gamma, alpha })
}

/// Everything one decoder step exposes.
#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub d: Var,
    pub d_tilde: Var,
    pub beta: Var,
    pub gamma: Var,
    pub alpha: Var,
    /// `P(z_t = 1)`, shape `[1]`.
    pub p_copy: Var,
    pub gen_dist: Var,
}

pub fn decode_step(
    tape: &mut Tape,
    v: &DecoderVars,
    prev: usize,
    state: &DecoderState,
    mem: &Memory,
    copy: &CopyTable,
    dropout: f64,
) -> Result<(DecodeStep, DecoderState)> {
    if prev >= copy.num_outputs() {
        return Err(TensorError::Contract(format!(
            "previous token id {prev} is outside the {} known outputs",
            copy.num_outputs()
        )));
    }
    let input_id = if prev < v.vocab_size { prev } else { UNK };
    let emb = tape.embedding_lookup(v.word_emb, input_id)?;
    let emb = tape.dropout(emb, dropout)?;
    let x = tape.concat(&[emb, state.feed])?;
    let (h0, c0) = lstm_cell(tape, v.lstm_w[0], v.lstm_b[0], x, state.h[0], state.c[0], v.hidden)?;
    let x1 = tape.dropout(h0, dropout)?;
    let (h1, c1) = lstm_cell(tape, v.lstm_w[1], v.lstm_b[1], x1, state.h[1], state.c[1], v.hidden)?;
    let d = h1;

    let att = dual_attention(tape, d, mem)?;
    let context = tape.attend(att.alpha, mem.records)?;
    let joined = tape.concat(&[d, context])?;
    let pre = tape.matvec(v.merge_w, joined)?;
    let d_tilde = tape.tanh(pre)?;

    let out_in = tape.dropout(d_tilde, dropout)?;
    let logits = tape.matvec(v.out_w, out_in)?;
    let logits = tape.add(logits, v.out_b)?;
    let gen_dist = tape.softmax(logits)?;

    let copy_logit = tape.dot(v.copy_w, d)?;
    let copy_logit = tape.add(copy_logit, v.copy_b)?;
    let p_copy = tape.sigmoid(copy_logit)?;

    let step = DecodeStep {
        d,
        d_tilde,
        beta: att.beta,
        gamma: att.gamma,
        alpha: att.alpha,
        p_copy,
        gen_dist,
    };
    let next = DecoderState {
        h: [h0, h1],
        c: [c0, c1],
        feed: d_tilde,
    };
    Ok((step, next))
}

/// `log P(target)`, marginalising over the copy switch: both branches
/// contribute when the target is generable and copyable.
pub fn target_log_prob(tape: &mut Tape, step: &DecodeStep, target: usize, copy: &CopyTable) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if target < copy.vocab_size() {
        let g = tape.pick(step.gen_dist, target)?;
        let keep = tape.one_minus(step.p_copy)?;
        parts.push(tape.mul(keep, g)?);
    }
    let idx = copy.records_with(target);
    if !idx.is_empty() {
        let mass = tape.gather_sum(step.alpha, idx)?;
        parts.push(tape.mul(step.p_copy, mass)?);
    }
    if parts.is_empty() {
        return Err(TensorError::Contract(format!("target id {target} is neither generable nor copyable")));
    }
    let p = tape.add_n(&parts)?;
    tape.log(p)
}

/// The full mixture over vocabulary ids followed by extended copy ids.
pub fn mixture_distribution(tape: &Tape, step: &DecodeStep, copy: &CopyTable) -> Vec<f64> {
    let p = tape.scalar_value(step.p_copy);
    let mut dist = vec![0.0; copy.num_outputs()];
    for (d, g) in dist.iter_mut().zip(tape.value(step.gen_dist)) {
        *d = (1.0 - p) * g;
    }
    for (&id, a) in copy.record_output_ids().iter().zip(tape.value(step.alpha)) {
        dist[id] += p * a;
    }
    dist
}

/// Teacher-forced log-probabilities of `targets`. With `bptt_block = Some(k)`
/// the recurrent state is detached every `k` steps: values carry forward,
/// gradients stop at the block boundary.
pub fn teacher_forced_log_probs(
    tape: &mut Tape,
    p: &DecoderParams,
    mem: &Memory,
    copy: &CopyTable,
    targets: &[usize],
    dropout: f64,
    bptt_block: Option<usize>,
) -> Result<Vec<Var>> {
    let vars = DecoderVars::new(tape, p);
    let mut state = init_state(tape, p, mem)?;
    let mut prev = BOS;
    let mut out = Vec::with_capacity(targets.len());
    for (t, &y) in targets.iter().enumerate() {
        if let Some(k) = bptt_block {
            if t > 0 && t % k == 0 {
                state = state.detach(tape);
            }
        }
        let (step, next) = decode_step(tape, &vars, prev, &state, mem, copy, dropout)?;
        out.push(target_log_prob(tape, &step, y, copy)?);
        state = next;
        prev = y;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Output ids without the end token.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// Step at which the end token was chosen (or `max_len` if forced).
    pub completed_at: usize,
}

fn better(a: &Decoded, b: &Decoded) -> bool {
    match a.log_prob.total_cmp(&b.log_prob) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.completed_at, &a.ids) < (b.completed_at, &b.ids),
    }
}

/// Beam search over the mixture distribution, without length
/// normalisation. Candidates are ranked by log-probability, ties by token
/// ids. Search stops once `beam` hypotheses have finished or no live
/// hypothesis can beat the best finished one; hypotheses still live at
/// `max_len` are closed as they are.
pub fn beam_search(
    tape: &mut Tape,
    p: &DecoderParams,
    mem: &Memory,
    copy: &CopyTable,
    beam: usize,
    max_len: usize,
) -> Result<Decoded> {
    if beam == 0 || max_len == 0 {
        return Err(TensorError::Contract("beam and max_len must be at least 1".into()));
    }
    let vars = DecoderVars::new(tape, p);
    let start = init_state(tape, p, mem)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: start,
    }];
    let mut done: Vec<Decoded> = Vec::new();

    for t in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (step, next) = decode_step(tape, &vars, prev, &hyp.state, mem, copy, 0.0)?;
            next_states.push(next);
            let dist = mixture_distribution(tape, &step, copy);
            for (y, &py) in dist.iter().enumerate() {
                if y == PAD || y == BOS || py <= 0.0 {
                    continue;
                }
                cands.push((hyp.log_prob + py.ln(), hi, y));
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                let ta = live[a.1].tokens.iter().chain(std::iter::once(&a.2));
                let tb = live[b.1].tokens.iter().chain(std::iter::once(&b.2));
                ta.cmp(tb)
            })
        });
        let mut new_live = Vec::with_capacity(beam);
        for &(lp, hi, y) in cands.iter().take(beam) {
            if y == EOS {
                done.push(Decoded {
                    ids: live[hi].tokens.clone(),
                    log_prob: lp,
                    completed_at: t,
                });
            } else {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(y);
                new_live.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    state: next_states[hi],
                });
            }
        }
        live = new_live;
        let best_done = done.iter().map(|d| d.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if done.len() >= beam || live.is_empty() || best_done >= best_live {
            break;
        }
    }
    for h in live {
        done.push(Decoded {
            ids: h.tokens,
            log_prob: h.log_prob,
            completed_at: max_len,
        });
    }
    let mut best = done.swap_remove(0);
    for d in done {
        if better(&d, &best) {
            best = d;
        }
    }
    Ok(best)
}

/// Argmax decoding; ties go to the smaller id.
pub fn greedy_decode(tape: &mut Tape, p: &DecoderParams, mem: &Memory, copy: &CopyTable, max_len: usize) -> Result<Decoded> {
    let vars = DecoderVars::new(tape, p);
    let mut state = init_state(tape, p, mem)?;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    for t in 0..max_len {
        let prev = ids.last().copied().unwrap_or(BOS);
        let (step, next) = decode_step(tape, &vars, prev, &state, mem, copy, 0.0)?;
        let dist = mixture_distribution(tape, &step, copy);
        let (y, py) = dist
            .iter()
            .enumerate()
            .filter(|(y, _)| *y != PAD && *y != BOS)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (y, &py)| if py > best.1 { (y, py) } else { best });
        log_prob += py.ln();
        if y == EOS {
            return Ok(Decoded {
                ids,
                log_prob,
                completed_at: t,
            });
        }
        ids.push(y);
        state = next;
    }
    Ok(Decoded {
        ids,
        log_prob,
        completed_at: max_len,
    })
}
