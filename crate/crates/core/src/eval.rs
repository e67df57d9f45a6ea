//! BLEU and extractive metrics (RG, CS, CO) over generated summaries.
//!
//! Facts are read back from text by a deterministic rule extractor:
//! every numeric token is attributed to the most recent entity mention at
//! most `span` tokens before it. Its type comes from the cue word right
//! after the number ("18 points" is PTS) when the entity has that column,
//! otherwise from the first not-yet-used column of that entity whose table
//! value equals the number. Numbers matching neither rule are skipped.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::baseline::STAT_CUES;
use crate::data::{Record, TableSet};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractedFact {
    pub entity: String,
    pub rtype: String,
    pub value: String,
    /// Token index of the number.
    pub position: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    /// Maximum distance from an entity mention to a number attributed to it.
    pub span: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { span: 20 }
    }
}

fn is_number(tok: &str) -> bool {
    tok.parse::<f64>().is_ok_and(f64::is_finite)
}

fn same_value(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Surface forms of each entity: the name as one token, and the name split
/// on spaces and underscores. Longer forms are tried first.
fn mention_forms(tables: &TableSet) -> Vec<(Vec<String>, String)> {
    let mut seen = HashSet::new();
    let mut forms = Vec::new();
    for r in tables.records() {
        if !seen.insert(r.entity.clone()) {
            continue;
        }
        forms.push((vec![r.entity.clone()], r.entity.clone()));
        let parts: Vec<String> = r.entity.split([' ', '_']).filter(|p| !p.is_empty()).map(String::from).collect();
        if parts.len() > 1 {
            forms.push((parts, r.entity.clone()));
        }
    }
    forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    forms
}

pub fn extract_records(text: &[String], tables: &TableSet) -> Vec<ExtractedFact> {
    extract_records_with(text, tables, &ExtractorConfig::default())
}

pub fn extract_records_with(text: &[String], tables: &TableSet, config: &ExtractorConfig) -> Vec<ExtractedFact> {
    let forms = mention_forms(tables);
    let mut cells: HashMap<&str, Vec<&Record>> = HashMap::new();
    for r in tables.records() {
        cells.entry(r.entity.as_str()).or_default().push(r);
    }

    let mut facts = Vec::new();
    let mut used: HashSet<(String, String)> = HashSet::new();
    let mut current: Option<(&str, usize)> = None;
    let mut i = 0;
    while i < text.len() {
        if let Some((form, entity)) = forms.iter().find(|(f, _)| text[i..].starts_with(f)) {
            current = Some((entity.as_str(), i + form.len() - 1));
            i += form.len();
            continue;
        }
        let tok = &text[i];
        if let (true, Some((entity, at))) = (is_number(tok), current) {
            if i - at <= config.span {
                let records = &cells[entity];
                let cue_type = text
                    .get(i + 1)
                    .and_then(|cue| STAT_CUES.iter().find(|(_, c)| c == cue))
                    .map(|(col, _)| *col)
                    .filter(|col| records.iter().any(|r| r.rtype == *col));
                let rtype = cue_type.map(String::from).or_else(|| {
                    records
                        .iter()
                        .find(|r| same_value(&r.value, tok) && !used.contains(&(entity.to_string(), r.rtype.clone())))
                        .map(|r| r.rtype.clone())
                });
                if let Some(rtype) = rtype {
                    if used.insert((entity.to_string(), rtype.clone())) {
                        facts.push(ExtractedFact {
                            entity: entity.to_string(),
                            rtype,
                            value: tok.clone(),
                            position: i,
                        });
                    }
                }
            }
        }
        i += 1;
    }
    facts
}

/// Extracted facts and how many of them agree with the table.
pub fn rg(generated: &[String], tables: &TableSet) -> (usize, usize) {
    let facts = extract_records(generated, tables);
    let correct = facts
        .iter()
        .filter(|f| {
            tables
                .records()
                .any(|r| r.entity == f.entity && r.rtype == f.rtype && same_value(&r.value, &f.value))
        })
        .count();
    (correct, facts.len())
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn fact_set(facts: &[ExtractedFact]) -> HashSet<(&str, &str, &str)> {
    facts.iter().map(|f| (f.entity.as_str(), f.rtype.as_str(), f.value.as_str())).collect()
}

/// Content selection (P%, R%, F1%) with facts keyed by (entity, type, value).
pub fn cs(generated: &[String], reference: &[String], tables: &TableSet) -> (f64, f64, f64) {
    let gen = extract_records(generated, tables);
    let refs = extract_records(reference, tables);
    let (a, b) = (fact_set(&gen), fact_set(&refs));
    let common = a.intersection(&b).count();
    let (p, r) = (percent(common, a.len()), percent(common, b.len()));
    (p, r, f1(p, r))
}

/// Unrestricted Damerau-Levenshtein distance (insertions, deletions,
/// substitutions and transpositions of adjacent symbols, with edits allowed
/// between transposed symbols).
pub fn damerau_levenshtein<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let inf = n + m;
    // Row/column 0 of `d` hold the sentinel `inf`; real indices are shifted by one.
    let mut d = vec![vec![0usize; m + 2]; n + 2];
    d[0][0] = inf;
    for i in 0..=n {
        d[i + 1][0] = inf;
        d[i + 1][1] = i;
    }
    for j in 0..=m {
        d[0][j + 1] = inf;
        d[1][j + 1] = j;
    }
    let mut last_row: HashMap<&T, usize> = HashMap::new();
    for i in 1..=n {
        let mut last_match_col = 0;
        for j in 1..=m {
            let i1 = last_row.get(&b[j - 1]).copied().unwrap_or(0);
            let j1 = last_match_col;
            let cost = if a[i - 1] == b[j - 1] {
                last_match_col = j;
                0
            } else {
                1
            };
            d[i + 1][j + 1] = (d[i][j] + cost)
                .min(d[i + 1][j] + 1)
                .min(d[i][j + 1] + 1)
                .min(d[i1][j1] + (i - i1 - 1) + 1 + (j - j1 - 1));
        }
        last_row.insert(&a[i - 1], i);
    }
    d[n + 1][m + 1]
}

/// Content ordering: `(1 − DLD / max_len) × 100` over the position-ordered
/// (entity, type) keys of each text; 100 when both are empty.
pub fn co(generated: &[String], reference: &[String], tables: &TableSet) -> f64 {
    let key = |f: ExtractedFact| (f.entity, f.rtype);
    let a: Vec<_> = extract_records(generated, tables).into_iter().map(key).collect();
    let b: Vec<_> = extract_records(reference, tables).into_iter().map(key).collect();
    co_score(&a, &b)
}

pub fn co_score<T: Eq + Hash>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 100.0;
    }
    (1.0 - damerau_levenshtein(a, b) as f64 / longest as f64) * 100.0
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on a 0 to 100 scale with one reference per candidate
/// and no smoothing.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matched[n] as f64 / total[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * log_p.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "RG-P%")]
    pub rg_p: f64,
    #[serde(rename = "RG-#")]
    pub rg_count: f64,
    #[serde(rename = "CS-P%")]
    pub cs_p: f64,
    #[serde(rename = "CS-R%")]
    pub cs_r: f64,
    #[serde(rename = "CS-F1%")]
    pub cs_f1: f64,
    #[serde(rename = "CO-DLD%")]
    pub co_dld: f64,
    #[serde(rename = "BLEU")]
    pub bleu: f64,
}

/// RG precision is pooled over all extracted facts; RG-#, CS precision and
/// recall and CO are averaged per summary, and CS F1 is the harmonic mean
/// of the averaged precision and recall.
pub fn evaluate(generated: &[Vec<String>], references: &[Vec<String>], games: &[TableSet]) -> MetricsReport {
    assert!(
        generated.len() == references.len() && references.len() == games.len(),
        "generated, reference and game lists must align"
    );
    let n = games.len();
    if n == 0 {
        return MetricsReport {
            rg_p: 0.0,
            rg_count: 0.0,
            cs_p: 0.0,
            cs_r: 0.0,
            cs_f1: 0.0,
            co_dld: 0.0,
            bleu: 0.0,
        };
    }
    let (mut correct, mut found) = (0, 0);
    let (mut p_sum, mut r_sum, mut co_sum) = (0.0, 0.0, 0.0);
    for ((g, r), game) in generated.iter().zip(references).zip(games) {
        let (c, f) = rg(g, game);
        correct += c;
        found += f;
        let (p, rc, _) = cs(g, r, game);
        p_sum += p;
        r_sum += rc;
        co_sum += co(g, r, game);
    }
    let (cs_p, cs_r) = (p_sum / n as f64, r_sum / n as f64);
    MetricsReport {
        rg_p: percent(correct, found),
        rg_count: found as f64 / n as f64,
        cs_p,
        cs_r,
        cs_f1: f1(cs_p, cs_r),
        co_dld: co_sum / n as f64,
        bleu: bleu(generated, references),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dld_basic_cases() {
        assert_eq!(damerau_levenshtein(&["a", "b", "c"], &["a", "c", "b"]), 1);
        assert_eq!(damerau_levenshtein::<u8>(&[], &[1, 2]), 2);
        assert_eq!(damerau_levenshtein(b"ca", b"abc"), 2);
        assert_eq!(damerau_levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn co_of_one_transposition() {
        assert!((co_score(&["a", "b", "c"], &["a", "c", "b"]) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(co_score::<u8>(&[], &[]), 100.0);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = vec![toks("the cat sat on the mat")];
        assert!((bleu(&a, &a) - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[toks("x y z w")], &[toks("a b c d")]), 0.0);
        assert_eq!(bleu(&[vec![]], &[toks("a b c d")]), 0.0);
    }

    #[test]
    fn f1_of_zero_is_zero() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!((f1(100.0, 50.0) - 200.0 / 3.0).abs() < 1e-9);
    }
}
