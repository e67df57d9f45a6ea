//! Deterministic template summaries.
//!
//! Output is an introductory sentence (both team scores and the winner), one
//! sentence per top-scoring player and a closing sentence. Every number the
//! template writes is copied verbatim from a table cell and is immediately
//! followed by the cue word of its column, which is what lets the rule-based
//! extractor in [`crate::eval`] read the facts back exactly.

use std::cmp::Ordering;

use crate::data::{Record, TableId, TableSet};
use crate::error::DataError;

/// Column → cue word written right after the column's value.
pub const STAT_CUES: &[(&str, &str)] = &[
    ("PTS", "points"),
    ("REB", "rebounds"),
    ("AST", "assists"),
    ("FGM", "field_goals"),
    ("FGA", "shots"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateConfig {
    pub top_k_players: usize,
    /// Player clauses after the points clause, as (column, verb). Columns
    /// missing from a table are skipped.
    pub player_clauses: Vec<(String, String)>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            top_k_players: 6,
            player_clauses: [("REB", "grabbed"), ("AST", "dished"), ("FGM", "made"), ("FGA", "took")]
                .iter()
                .map(|(c, v)| (c.to_string(), v.to_string()))
                .collect(),
        }
    }
}

pub fn cue_for(column: &str) -> Option<&'static str> {
    STAT_CUES.iter().find(|(c, _)| *c == column).map(|(_, cue)| *cue)
}

fn numeric(game: &TableSet, r: &Record) -> Result<f64, DataError> {
    r.value.parse::<f64>().map_err(|_| DataError::Schema {
        game_id: game.game_id.clone(),
        reason: format!("{}/{} value {:?} is not numeric", r.entity, r.rtype, r.value),
    })
}

fn missing(game: &TableSet, what: &str) -> DataError {
    DataError::Schema {
        game_id: game.game_id.clone(),
        reason: what.to_string(),
    }
}

pub fn generate_template(game: &TableSet, config: &TemplateConfig) -> Result<Vec<String>, DataError> {
    let teams = game.table(TableId::Teams);
    if teams.num_rows() != 2 {
        return Err(missing(game, &format!("team table needs exactly two rows, found {}", teams.num_rows())));
    }
    let team_pts = teams
        .column_index("PTS")
        .ok_or_else(|| missing(game, "team table has no PTS column"))?;

    let mut out: Vec<String> = Vec::new();
    let mut push = |toks: &[&str]| out.extend(toks.iter().map(|t| t.to_string()));

    let (home, vis) = (&teams.rows[0][team_pts], &teams.rows[1][team_pts]);
    match numeric(game, home)?.partial_cmp(&numeric(game, vis)?) {
        Some(Ordering::Equal) | None => push(&[
            "The", &home.entity, "and", "the", &vis.entity, "tied", "at", &home.value, "points", ".",
        ]),
        Some(order) => {
            let (w, l) = if order == Ordering::Greater { (home, vis) } else { (vis, home) };
            push(&[
                "The", &w.entity, "scored", &w.value, "points", "to", "defeat", "the", &l.entity, ",", "who",
                "finished", "with", &l.value, "points", ".",
            ]);
        }
    }

    let mut players: Vec<(f64, &[Record])> = Vec::new();
    for id in [TableId::HomePlayers, TableId::VisitingPlayers] {
        let table = game.table(id);
        if table.is_empty() {
            continue;
        }
        let pts = table
            .column_index("PTS")
            .ok_or_else(|| missing(game, &format!("{} has no PTS column", id.json_key())))?;
        for row in &table.rows {
            players.push((numeric(game, &row[pts])?, row.as_slice()));
        }
    }
    players.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1[0].entity.cmp(&b.1[0].entity)));

    for (_, row) in players.iter().take(config.top_k_players) {
        let cell = |col: &str| row.iter().find(|r| r.rtype == col);
        let pts = cell("PTS").expect("PTS checked above");
        push(&[&pts.entity, "scored", &pts.value, "points"]);
        for (col, verb) in &config.player_clauses {
            if let (Some(r), Some(cue)) = (cell(col), cue_for(col)) {
                push(&[",", verb, &r.value, cue]);
            }
        }
        push(&["."]);
    }

    push(&["Next", ",", "the", &home.entity, "and", "the", &vis.entity, "return", "to", "action", "."]);
    Ok(out)
}

/// Number of sentences in a token sequence, counting "." terminators.
pub fn sentence_count(tokens: &[String]) -> usize {
    tokens.iter().filter(|t| *t == ".").count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, Table};

    fn row(entity: &str, table: TableId, feature: Feature, row: usize, cells: &[(&str, &str)]) -> Vec<Record> {
        cells
            .iter()
            .enumerate()
            .map(|(col, (t, v))| Record {
                entity: entity.into(),
                rtype: t.to_string(),
                value: v.to_string(),
                feature,
                date: 0,
                table,
                row,
                col,
            })
            .collect()
    }

    pub(crate) fn game(players: &[(&str, bool, &str)], home_pts: &str, vis_pts: &str) -> TableSet {
        let mut home = vec![];
        let mut vis = vec![];
        for (name, is_home, pts) in players {
            let (t, f, v) = if *is_home {
                (TableId::HomePlayers, Feature::Home, &mut home)
            } else {
                (TableId::VisitingPlayers, Feature::Visiting, &mut vis)
            };
            let idx = v.len();
            v.push(row(name, t, f, idx, &[("PTS", pts), ("REB", "4"), ("AST", "2")]));
        }
        TableSet {
            game_id: "g".into(),
            date: 0,
            tables: [
                Table {
                    id: TableId::HomePlayers,
                    rows: home,
                },
                Table {
                    id: TableId::VisitingPlayers,
                    rows: vis,
                },
                Table {
                    id: TableId::Teams,
                    rows: vec![
                        row("Hornets", TableId::Teams, Feature::Home, 0, &[("PTS", home_pts)]),
                        row("Wizards", TableId::Teams, Feature::Visiting, 1, &[("PTS", vis_pts)]),
                    ],
                },
            ],
            summary: vec![],
        }
    }

    #[test]
    fn higher_score_is_named_winner() {
        let g = game(&[("A", true, "10")], "98", "101");
        let out = generate_template(&g, &TemplateConfig::default()).unwrap();
        assert_eq!(&out[..5], &["The", "Wizards", "scored", "101", "points"]);
        assert!(out[5..10].contains(&"defeat".to_string()));
    }

    #[test]
    fn two_players_give_four_sentences() {
        let g = game(&[("A", true, "10"), ("B", false, "12")], "101", "98");
        let out = generate_template(&g, &TemplateConfig::default()).unwrap();
        assert_eq!(sentence_count(&out), 4);
        let a = out.iter().position(|t| t == "A").unwrap();
        let b = out.iter().position(|t| t == "B").unwrap();
        assert!(b < a, "players are ranked by points");
    }

    #[test]
    fn at_most_six_players_ranked_with_name_tiebreak() {
        let players: Vec<(String, bool, String)> = (0..9)
            .map(|i| (format!("P{i}"), i % 2 == 0, if i < 4 { "20".into() } else { i.to_string() }))
            .collect();
        let refs: Vec<(&str, bool, &str)> = players.iter().map(|(a, b, c)| (a.as_str(), *b, c.as_str())).collect();
        let g = game(&refs, "101", "98");
        let out = generate_template(&g, &TemplateConfig::default()).unwrap();
        assert_eq!(sentence_count(&out), 8);
        let mentioned: Vec<&String> = out.iter().filter(|t| t.starts_with('P')).collect();
        assert_eq!(mentioned, ["P0", "P1", "P2", "P3", "P8", "P7"]);
    }

    #[test]
    fn tie_is_reported() {
        let g = game(&[("A", true, "10")], "100", "100");
        let out = generate_template(&g, &TemplateConfig::default()).unwrap();
        assert!(out.contains(&"tied".to_string()));
    }

    #[test]
    fn missing_pts_is_schema_error() {
        let mut g = game(&[("A", true, "10")], "100", "90");
        for r in g.tables[0].rows[0].iter_mut() {
            if r.rtype == "PTS" {
                r.rtype = "MIN".into();
            }
        }
        assert!(matches!(
            generate_template(&g, &TemplateConfig::default()),
            Err(DataError::Schema { .. })
        ));
    }

    #[test]
    fn numbers_come_from_the_tables() {
        let g = game(&[("A", true, "10"), ("B", false, "12")], "101", "98");
        let out = generate_template(&g, &TemplateConfig::default()).unwrap();
        let values: Vec<&str> = g.records().map(|r| r.value.as_str()).collect();
        for t in out.iter().filter(|t| t.parse::<f64>().is_ok()) {
            assert!(values.contains(&t.as_str()), "{t}");
        }
    }

    #[test]
    fn deterministic() {
        let g = game(&[("A", true, "10"), ("B", false, "12")], "101", "98");
        let cfg = TemplateConfig::default();
        assert_eq!(generate_template(&g, &cfg).unwrap(), generate_template(&g, &cfg).unwrap());
    }
}
