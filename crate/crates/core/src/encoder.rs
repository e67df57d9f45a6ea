//! Three-layer table encoder.
//!
//! 1. Each record is embedded by a one-layer ReLU MLP over its entity, type,
//!    value and home/visiting embeddings, then re-encoded three times: against
//!    the other records of its row, the other records of its column, and its
//!    own history window (with position embeddings).
//! 2. A fusion gate scores each of the three views against a general
//!    representation of all three and takes the softmax-weighted sum.
//! 3. Fused records are mean-pooled into row vectors, which a content
//!    selection gate rescales using attention over the other rows of the
//!    same table.
//!
//! Empty attention sets (a row with one column, a table with one row, a
//! record without history) produce a zero context vector.

use rand::Rng;

use crate::data::{history_window, Record, TableSet, TimelineStore, Vocabulary};
use crate::error::TensorError;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// `vᵀ tanh(W [a; b] + c)`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMlp {
    pub w: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl ScoreMlp {
    fn register<R: Rng>(store: &mut ParamStore, prefix: &str, h: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), Tensor::uniform(&[h, 2 * h], scale, rng))?,
            b: store.add(format!("{prefix}.b"), Tensor::uniform(&[h], scale, rng))?,
            v: store.add(format!("{prefix}.v"), Tensor::uniform(&[h], scale, rng))?,
        })
    }

    pub fn score(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let (w, bias, v) = (tape.param(self.w), tape.param(self.b), tape.param(self.v));
        let ab = tape.concat(&[a, b])?;
        let pre = tape.matvec(w, ab)?;
        let pre = tape.add(pre, bias)?;
        let act = tape.tanh(pre)?;
        tape.dot(v, act)
    }
}

/// Bilinear self-attention over a set followed by `tanh(W_f [x; context])`.
#[derive(Clone, Copy, Debug)]
pub struct SetAttention {
    pub w_o: ParamId,
    pub w_f: ParamId,
}

impl SetAttention {
    fn register<R: Rng>(store: &mut ParamStore, prefix: &str, h: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_o: store.add(format!("{prefix}.w_o"), Tensor::uniform(&[h, h], scale, rng))?,
            w_f: store.add(format!("{prefix}.w_f"), Tensor::uniform(&[h, 2 * h], scale, rng))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub hidden: usize,
    pub window: usize,
    pub entity_emb: ParamId,
    pub type_emb: ParamId,
    pub value_emb: ParamId,
    pub feature_emb: ParamId,
    pub record_w: ParamId,
    pub record_b: ParamId,
    pub row: SetAttention,
    pub col: SetAttention,
    /// `window + 1` rows: history slots `0..window` (oldest first) and the
    /// current record at index `window`.
    pub pos_emb: ParamId,
    pub time_score: ScoreMlp,
    pub time_w_f: ParamId,
    pub gen_w: ParamId,
    pub gen_b: ParamId,
    /// Shared by the row, column and time views.
    pub fusion_score: ScoreMlp,
    pub gate_w_r: ParamId,
    pub gate_w_g: ParamId,
    pub gate_b_g: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        window: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden;
        let mut add = |name: &str, shape: &[usize], rng: &mut R| store.add(format!("enc.{name}"), Tensor::uniform(shape, scale, rng));
        let entity_emb = add("entity_emb", &[vocab_size, h], rng)?;
        let type_emb = add("type_emb", &[vocab_size, h], rng)?;
        let value_emb = add("value_emb", &[vocab_size, h], rng)?;
        let feature_emb = add("feature_emb", &[2, h], rng)?;
        let record_w = add("record_w", &[h, 4 * h], rng)?;
        let record_b = add("record_b", &[h], rng)?;
        let pos_emb = add("pos_emb", &[window + 1, h], rng)?;
        let time_w_f = add("time.w_f", &[h, 2 * h], rng)?;
        let gen_w = add("fusion.gen_w", &[h, 3 * h], rng)?;
        let gen_b = add("fusion.gen_b", &[h], rng)?;
        let gate_w_r = add("gate.w_r", &[h, h], rng)?;
        let gate_w_g = add("gate.w_g", &[h, 2 * h], rng)?;
        let gate_b_g = add("gate.b_g", &[h], rng)?;
        Ok(Self {
            hidden,
            window,
            entity_emb,
            type_emb,
            value_emb,
            feature_emb,
            record_w,
            record_b,
            row: SetAttention::register(store, "enc.row", h, scale, rng)?,
            col: SetAttention::register(store, "enc.col", h, scale, rng)?,
            pos_emb,
            time_score: ScoreMlp::register(store, "enc.time.score", h, scale, rng)?,
            time_w_f,
            gen_w,
            gen_b,
            fusion_score: ScoreMlp::register(store, "enc.fusion.score", h, scale, rng)?,
            gate_w_r,
            gate_w_g,
            gate_b_g,
        })
    }
}

/// Vocabulary ids of one record's four fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordIds {
    pub entity: usize,
    pub rtype: usize,
    pub value: usize,
    pub feature: usize,
}

impl RecordIds {
    pub fn of(r: &Record, vocab: &Vocabulary) -> Self {
        Self {
            entity: vocab.id(&r.entity),
            rtype: vocab.id(&r.rtype),
            value: vocab.id(&r.value),
            feature: r.feature.index(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellInput {
    pub ids: RecordIds,
    /// History window, oldest first.
    pub history: Vec<RecordIds>,
}

/// Id-level view of a game, ready for the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    /// One grid per table; empty tables have no rows.
    pub tables: Vec<Vec<Vec<CellInput>>>,
}

impl EncoderInput {
    pub fn new(game: &TableSet, store: &TimelineStore, vocab: &Vocabulary, window: usize) -> Self {
        let tables = game
            .tables
            .iter()
            .map(|t| {
                t.rows
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|r| CellInput {
                                ids: RecordIds::of(r, vocab),
                                history: history_window(r, store, window)
                                    .iter()
                                    .map(|h| RecordIds::of(h, vocab))
                                    .collect(),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { tables }
    }

    pub fn num_records(&self) -> usize {
        self.tables.iter().flatten().map(Vec::len).sum()
    }
}

/// Tape handles for everything the encoder computed on one table.
#[derive(Clone, Debug, Default)]
pub struct EncodedTable {
    pub embeddings: Vec<Vec<Var>>,
    pub row_dim: Vec<Vec<Var>>,
    pub col_dim: Vec<Vec<Var>>,
    pub time_dim: Vec<Vec<Var>>,
    pub general: Vec<Vec<Var>>,
    pub fusion_weights: Vec<Vec<Var>>,
    pub fused: Vec<Vec<Var>>,
    /// One `[C, C]` weight matrix per row.
    pub row_attention: Vec<Var>,
    /// One `[R, R]` weight matrix per column.
    pub col_attention: Vec<Var>,
    /// Weights over the history window; `None` when the history is empty.
    pub time_attention: Vec<Vec<Option<Var>>>,
    pub rows: Vec<Var>,
    pub gate_attention: Option<Var>,
    pub gates: Vec<Var>,
    pub gated_rows: Vec<Var>,
}

impl EncodedTable {
    pub fn num_rows(&self) -> usize {
        self.fused.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct EncodedTables {
    pub tables: Vec<EncodedTable>,
}

/// Parameter handles registered on one tape, plus transposes shared by
/// every call on that tape.
pub struct EncoderVars {
    entity_emb: Var,
    type_emb: Var,
    value_emb: Var,
    feature_emb: Var,
    record_w: Var,
    record_b: Var,
    pos_emb: Var,
    row_w_o: Var,
    row_w_f_t: Var,
    col_w_o: Var,
    col_w_f_t: Var,
    time_w_f: Var,
    gen_w: Var,
    gen_b: Var,
    gate_w_r: Var,
    gate_w_g_t: Var,
    gate_b_g: Var,
}

impl EncoderVars {
    pub fn new(tape: &mut Tape, p: &EncoderParams) -> Result<Self> {
        let row_w_f = tape.param(p.row.w_f);
        let col_w_f = tape.param(p.col.w_f);
        let gate_w_g = tape.param(p.gate_w_g);
        Ok(Self {
            entity_emb: tape.param(p.entity_emb),
            type_emb: tape.param(p.type_emb),
            value_emb: tape.param(p.value_emb),
            feature_emb: tape.param(p.feature_emb),
            record_w: tape.param(p.record_w),
            record_b: tape.param(p.record_b),
            pos_emb: tape.param(p.pos_emb),
            row_w_o: tape.param(p.row.w_o),
            row_w_f_t: tape.transpose(row_w_f)?,
            col_w_o: tape.param(p.col.w_o),
            col_w_f_t: tape.transpose(col_w_f)?,
            time_w_f: tape.param(p.time_w_f),
            gen_w: tape.param(p.gen_w),
            gen_b: tape.param(p.gen_b),
            gate_w_r: tape.param(p.gate_w_r),
            gate_w_g_t: tape.transpose(gate_w_g)?,
            gate_b_g: tape.param(p.gate_b_g),
        })
    }
}

/// `ReLU(W_a [e; c; v; f] + b_a)`.
pub fn embed_record(tape: &mut Tape, v: &EncoderVars, ids: RecordIds) -> Result<Var> {
    let e = tape.embedding_lookup(v.entity_emb, ids.entity)?;
    let c = tape.embedding_lookup(v.type_emb, ids.rtype)?;
    let val = tape.embedding_lookup(v.value_emb, ids.value)?;
    let f = tape.embedding_lookup(v.feature_emb, ids.feature)?;
    let x = tape.concat(&[e, c, val, f])?;
    let pre = tape.matvec(v.record_w, x)?;
    let pre = tape.add(pre, v.record_b)?;
    tape.relu(pre)
}

/// Self-attention over a set of vectors: each item attends to every other
/// item through `xᵀ W_o y`, and the output is `tanh(W_f [x; context])`.
/// Returns the outputs and the `[n, n]` weight matrix.
fn encode_set(tape: &mut Tape, items: &[Var], w_o: Var, w_f_t: Var) -> Result<(Vec<Var>, Var)> {
    let r = tape.stack_rows(items)?;
    let r_t = tape.transpose(r)?;
    let keys = tape.matmul(w_o, r_t)?;
    let scores = tape.matmul(r, keys)?;
    let weights = tape.softmax_excluding_self(scores)?;
    let context = tape.attend(weights, r)?;
    let joined = tape.concat_cols(r, context)?;
    let pre = tape.matmul(joined, w_f_t)?;
    let out = tape.tanh(pre)?;
    let rows = (0..items.len()).map(|i| tape.row(out, i)).collect::<Result<Vec<_>>>()?;
    Ok((rows, weights))
}

/// Row view: records of one row attend to each other.
pub fn encode_row_dim(tape: &mut Tape, v: &EncoderVars, row: &[Var]) -> Result<(Vec<Var>, Var)> {
    encode_set(tape, row, v.row_w_o, v.row_w_f_t)
}

/// Column view: records of one column (one per row) attend to each other.
pub fn encode_col_dim(tape: &mut Tape, v: &EncoderVars, column: &[Var]) -> Result<(Vec<Var>, Var)> {
    encode_set(tape, column, v.col_w_o, v.col_w_f_t)
}

/// Time view. `history` holds embeddings of the window, oldest first; the
/// current record is the query only.
pub fn encode_time_dim(
    tape: &mut Tape,
    v: &EncoderVars,
    p: &EncoderParams,
    record: Var,
    history: &[Var],
) -> Result<(Var, Option<Var>)> {
    if history.len() > p.window {
        return Err(TensorError::Contract(format!(
            "history of length {} exceeds window {}",
            history.len(),
            p.window
        )));
    }
    let (context, weights) = if history.is_empty() {
        (tape.zeros(&[p.hidden]), None)
    } else {
        let pos_now = tape.embedding_lookup(v.pos_emb, p.window)?;
        let query = tape.add(record, pos_now)?;
        let mut slots = Vec::with_capacity(history.len());
        let mut scores = Vec::with_capacity(history.len());
        for (k, &h) in history.iter().enumerate() {
            let pos = tape.embedding_lookup(v.pos_emb, k)?;
            let rp = tape.add(h, pos)?;
            scores.push(p.time_score.score(tape, query, rp)?);
            slots.push(rp);
        }
        let scores = tape.concat(&scores)?;
        let weights = tape.softmax(scores)?;
        let slots = tape.stack_rows(&slots)?;
        (tape.attend(weights, slots)?, Some(weights))
    };
    let joined = tape.concat(&[record, context])?;
    let pre = tape.matvec(v.time_w_f, joined)?;
    Ok((tape.tanh(pre)?, weights))
}

/// Fusion gate. Returns the fused vector, the general representation and
/// the (row, column, time) weights.
pub fn fuse(
    tape: &mut Tape,
    v: &EncoderVars,
    p: &EncoderParams,
    r_row: Var,
    r_col: Var,
    r_time: Var,
) -> Result<(Var, Var, Var)> {
    let all = tape.concat(&[r_row, r_col, r_time])?;
    let pre = tape.matvec(v.gen_w, all)?;
    let pre = tape.add(pre, v.gen_b)?;
    let general = tape.tanh(pre)?;
    let s_row = p.fusion_score.score(tape, r_row, general)?;
    let s_col = p.fusion_score.score(tape, r_col, general)?;
    let s_time = p.fusion_score.score(tape, r_time, general)?;
    let scores = tape.concat(&[s_row, s_col, s_time])?;
    let weights = tape.softmax(scores)?;
    let views = tape.stack_rows(&[r_row, r_col, r_time])?;
    let fused = tape.attend(weights, views)?;
    Ok((fused, general, weights))
}

/// Output of the row-level layer for one table.
pub struct RowEncoding {
    pub rows: Vec<Var>,
    pub gated_rows: Vec<Var>,
    pub gates: Vec<Var>,
    pub attention: Var,
}

/// Mean-pools each row of fused records, then applies the content
/// selection gate `g_i = σ(W_g [row_i; c_i] + b_g)` where `c_i` attends
/// over the other rows.
pub fn encode_rows(tape: &mut Tape, v: &EncoderVars, fused: &[Vec<Var>]) -> Result<RowEncoding> {
    if fused.is_empty() {
        return Err(TensorError::Contract("encode_rows needs at least one row".into()));
    }
    let rows = fused
        .iter()
        .map(|row| {
            let m = tape.stack_rows(row)?;
            tape.mean_over_axis(m, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let r = tape.stack_rows(&rows)?;
    let r_t = tape.transpose(r)?;
    let keys = tape.matmul(v.gate_w_r, r_t)?;
    let scores = tape.matmul(r, keys)?;
    let attention = tape.softmax_excluding_self(scores)?;
    let context = tape.attend(attention, r)?;
    let joined = tape.concat_cols(r, context)?;
    let pre = tape.matmul(joined, v.gate_w_g_t)?;
    let pre = tape.add_row(pre, v.gate_b_g)?;
    let gate = tape.sigmoid(pre)?;
    let gated = tape.mul(gate, r)?;
    let mut gates = Vec::with_capacity(rows.len());
    let mut gated_rows = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        gates.push(tape.row(gate, i)?);
        gated_rows.push(tape.row(gated, i)?);
    }
    Ok(RowEncoding {
        rows,
        gated_rows,
        gates,
        attention,
    })
}

fn encode_table(tape: &mut Tape, v: &EncoderVars, p: &EncoderParams, grid: &[Vec<CellInput>]) -> Result<EncodedTable> {
    let mut out = EncodedTable::default();
    if grid.is_empty() {
        return Ok(out);
    }
    let n_rows = grid.len();
    let n_cols = grid[0].len();

    for row in grid {
        let emb = row.iter().map(|c| embed_record(tape, v, c.ids)).collect::<Result<Vec<_>>>()?;
        out.embeddings.push(emb);
    }

    for i in 0..n_rows {
        let (enc, w) = encode_row_dim(tape, v, &out.embeddings[i])?;
        out.row_dim.push(enc);
        out.row_attention.push(w);
    }

    let mut col_dim = vec![Vec::with_capacity(n_cols); n_rows];
    for j in 0..n_cols {
        let column: Vec<Var> = out.embeddings.iter().map(|r| r[j]).collect();
        let (enc, w) = encode_col_dim(tape, v, &column)?;
        for (i, e) in enc.into_iter().enumerate() {
            col_dim[i].push(e);
        }
        out.col_attention.push(w);
    }
    out.col_dim = col_dim;

    for (i, row) in grid.iter().enumerate() {
        let mut times = Vec::with_capacity(n_cols);
        let mut weights = Vec::with_capacity(n_cols);
        for (j, cell) in row.iter().enumerate() {
            let hist = cell
                .history
                .iter()
                .map(|ids| embed_record(tape, v, *ids))
                .collect::<Result<Vec<_>>>()?;
            let (t, w) = encode_time_dim(tape, v, p, out.embeddings[i][j], &hist)?;
            times.push(t);
            weights.push(w);
        }
        out.time_dim.push(times);
        out.time_attention.push(weights);
    }

    for i in 0..n_rows {
        let (mut fused, mut general, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..n_cols {
            let (f, g, w) = fuse(tape, v, p, out.row_dim[i][j], out.col_dim[i][j], out.time_dim[i][j])?;
            fused.push(f);
            general.push(g);
            weights.push(w);
        }
        out.fused.push(fused);
        out.general.push(general);
        out.fusion_weights.push(weights);
    }

    let rows = encode_rows(tape, v, &out.fused)?;
    out.rows = rows.rows;
    out.gated_rows = rows.gated_rows;
    out.gates = rows.gates;
    out.gate_attention = Some(rows.attention);
    Ok(out)
}

/// Runs all three layers on each of the three tables. Tables share one set
/// of encoder parameters.
pub fn encode_tables(tape: &mut Tape, p: &EncoderParams, input: &EncoderInput) -> Result<EncodedTables> {
    let vars = EncoderVars::new(tape, p)?;
    let tables = input
        .tables
        .iter()
        .map(|grid| encode_table(tape, &vars, p, grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedTables { tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: usize = 4;

    fn setup() -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::register(&mut store, 10, H, 2, 0.5, &mut rng).unwrap();
        (store, p)
    }

    fn ids(k: usize) -> RecordIds {
        RecordIds {
            entity: 4 + k % 3,
            rtype: 5 + k % 2,
            value: 6 + k % 4,
            feature: k % 2,
        }
    }

    #[test]
    fn record_embedding_is_relu_of_bias_when_weights_vanish() {
        let (mut store, p) = setup();
        store.get_mut(p.record_w).tensor.data_mut().fill(0.0);
        let bias = vec![0.3, -0.2, 0.0, 1.5];
        store.get_mut(p.record_b).tensor.data_mut().copy_from_slice(&bias);
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let e = embed_record(&mut tape, &v, ids(0)).unwrap();
        assert_eq!(tape.value(e), &[0.3, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn record_embedding_is_non_negative() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        for k in 0..12 {
            let e = embed_record(&mut tape, &v, ids(k)).unwrap();
            assert!(tape.value(e).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn single_item_set_uses_zero_context() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let x = tape.vector(vec![0.1, 0.2, 0.3, 0.4]);
        let (out, w) = encode_row_dim(&mut tape, &v, &[x]).unwrap();
        assert_eq!(tape.value(w), &[0.0]);
        let zero = tape.zeros(&[H]);
        let joined = tape.concat(&[x, zero]).unwrap();
        let w_f = tape.param(p.row.w_f);
        let pre = tape.matvec(w_f, joined).unwrap();
        let expected = tape.tanh(pre).unwrap();
        assert_eq!(tape.value(out[0]), tape.value(expected));
    }

    #[test]
    fn identical_neighbours_share_attention_equally() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let a = tape.vector(vec![0.5, -0.1, 0.2, 0.0]);
        let b = tape.vector(vec![0.3, 0.3, 0.3, 0.3]);
        let (_, w) = encode_col_dim(&mut tape, &v, &[a, b, b]).unwrap();
        let w = tape.value(w);
        assert!((w[1] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
        assert_eq!(w[0], 0.0);
        let (_, w2) = encode_row_dim(&mut tape, &v, &[a, b]).unwrap();
        assert_eq!(tape.value(w2), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn time_view_single_history_gets_full_weight() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let r = tape.vector(vec![0.1; H]);
        let h = tape.vector(vec![0.2; H]);
        let (_, w) = encode_time_dim(&mut tape, &v, &p, r, &[h]).unwrap();
        assert_eq!(tape.value(w.unwrap()), &[1.0]);
        let (_, none) = encode_time_dim(&mut tape, &v, &p, r, &[]).unwrap();
        assert!(none.is_none());
        assert!(encode_time_dim(&mut tape, &v, &p, r, &[h, h, h]).is_err());
    }

    #[test]
    fn fusing_identical_views_returns_the_view() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let x = tape.vector(vec![0.7, -0.3, 0.05, 0.9]);
        let (fused, _, w) = fuse(&mut tape, &v, &p, x, x, x).unwrap();
        for &wi in tape.value(w) {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
        for (a, b) in tape.value(fused).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_rows_shrink_mean_pooled_rows() {
        let (store, p) = setup();
        let mut tape = Tape::new(&store);
        let v = EncoderVars::new(&mut tape, &p).unwrap();
        let a = tape.vector(vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.vector(vec![3.0, 0.0, -1.0, 0.0]);
        let c = tape.vector(vec![-1.0, 1.0, 1.0, 1.0]);
        let enc = encode_rows(&mut tape, &v, &[vec![a, b], vec![c, c]]).unwrap();
        assert_eq!(tape.value(enc.rows[0]), &[2.0, 1.0, 1.0, 2.0]);
        for (row, gated) in enc.rows.iter().zip(&enc.gated_rows) {
            for (x, g) in tape.value(*row).iter().zip(tape.value(*gated)) {
                assert!(g.abs() <= x.abs());
            }
        }
    }

    #[test]
    fn encodes_a_two_by_three_grid() {
        let (store, p) = setup();
        let cell = |k| CellInput {
            ids: ids(k),
            history: vec![ids(k + 1)],
        };
        let input = EncoderInput {
            tables: vec![vec![vec![cell(0), cell(1), cell(2)], vec![cell(3), cell(4), cell(5)]], vec![], vec![vec![cell(6)]]],
        };
        let mut tape = Tape::new(&store);
        let enc = encode_tables(&mut tape, &p, &input).unwrap();
        let t = &enc.tables[0];
        assert_eq!((t.fused.len(), t.fused[0].len()), (2, 3));
        assert_eq!(tape.shape(t.row_attention[0]), &[3, 3]);
        assert_eq!(tape.shape(t.col_attention[0]), &[2, 2]);
        assert_eq!(t.gated_rows.len(), 2);
        assert_eq!(enc.tables[1].num_rows(), 0);
        assert_eq!(tape.shape(enc.tables[2].fused[0][0]), &[H]);
    }
}
