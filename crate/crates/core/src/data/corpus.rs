//! JSON corpus files: one array of games per split.
//!
//! ```json
//! [{"game_id": "g1", "date": "2016-01-02",
//!   "home_players": {"Al_Jefferson": {"PTS": "18", "AST": "3"}},
//!   "vis_players": {...},
//!   "teams": {"Hornets": {...}, "Wizards": {...}},
//!   "summary": ["Al_Jefferson", "scored", "18", "points", "."]}]
//! ```
//!
//! Row and column order follow the order of keys in the file. The first row
//! of `teams` is the home team.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde_json::{Map, Value};

use super::{Dataset, Feature, Record, Table, TableId, TableSet};
use crate::error::DataError;

/// File names of the three splits inside a corpus directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSchema {
    pub train: String,
    pub dev: String,
    pub test: String,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        Self {
            train: "train.json".into(),
            dev: "dev.json".into(),
            test: "test.json".into(),
        }
    }
}

pub fn load_corpus(dir: &Path, schema: &CorpusSchema) -> Result<Dataset, DataError> {
    let train = load_split(&dir.join(&schema.train))?;
    let dev = load_split(&dir.join(&schema.dev))?;
    let test = load_split(&dir.join(&schema.test))?;

    let mut seen = std::collections::HashSet::new();
    for g in train.iter().chain(&dev).chain(&test) {
        if !seen.insert(g.game_id.as_str()) {
            return Err(schema_err(&g.game_id, "game_id appears more than once across splits"));
        }
    }
    Ok(Dataset::new(train, dev, test))
}

pub fn save_corpus(dataset: &Dataset, dir: &Path, schema: &CorpusSchema) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    save_split(&dataset.train, &dir.join(&schema.train))?;
    save_split(&dataset.dev, &dir.join(&schema.dev))?;
    save_split(&dataset.test, &dir.join(&schema.test))
}

pub fn save_split(games: &[TableSet], path: &Path) -> Result<(), DataError> {
    let value = Value::Array(games.iter().map(game_to_json).collect());
    let text = serde_json::to_string_pretty(&value).expect("corpus values serialise");
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads one split file.
pub fn load_split(path: &Path) -> Result<Vec<TableSet>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: PathBuf::from(path),
        source,
    })?;
    let Value::Array(items) = value else {
        return Err(schema_err("<file>", &format!("{} must hold a JSON array", path.display())));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| game_from_json(item, i))
        .collect()
}

fn schema_err(game_id: &str, reason: &str) -> DataError {
    DataError::Schema {
        game_id: game_id.to_string(),
        reason: reason.to_string(),
    }
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

pub(crate) fn parse_date(s: &str) -> Option<i64> {
    let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()?;
    Some((d - epoch()).num_days())
}

pub(crate) fn format_date(days: i64) -> String {
    (epoch() + chrono::Duration::days(days)).format("%Y-%m-%d").to_string()
}

fn game_from_json(item: &Value, position: usize) -> Result<TableSet, DataError> {
    let obj = item
        .as_object()
        .ok_or_else(|| schema_err(&format!("#{position}"), "example is not a JSON object"))?;
    let game_id = obj
        .get("game_id")
        .and_then(Value::as_str)
        .ok_or_else(|| schema_err(&format!("#{position}"), "missing game_id"))?
        .to_string();
    let date_str = obj
        .get("date")
        .and_then(Value::as_str)
        .ok_or_else(|| schema_err(&game_id, "missing date"))?;
    let date = parse_date(date_str).ok_or_else(|| schema_err(&game_id, &format!("bad date {date_str:?}")))?;

    let mut tables = Vec::with_capacity(3);
    for id in TableId::ALL {
        let grid = obj
            .get(id.json_key())
            .ok_or_else(|| schema_err(&game_id, &format!("missing table {}", id.json_key())))?
            .as_object()
            .ok_or_else(|| schema_err(&game_id, &format!("table {} is not an object", id.json_key())))?;
        tables.push(table_from_json(grid, id, date, &game_id)?);
    }

    let summary = match obj.get("summary") {
        Some(Value::Array(toks)) => toks
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| schema_err(&game_id, "summary tokens must be strings"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(schema_err(&game_id, "summary must be a list of tokens")),
        None => return Err(schema_err(&game_id, "missing summary")),
    };

    let tables: [Table; 3] = tables.try_into().expect("three tables");
    Ok(TableSet {
        game_id,
        date,
        tables,
        summary,
    })
}

fn cell_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn table_from_json(grid: &Map<String, Value>, id: TableId, date: i64, game_id: &str) -> Result<Table, DataError> {
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::with_capacity(grid.len());
    for (row_idx, (entity, cells)) in grid.iter().enumerate() {
        if entity.is_empty() {
            return Err(schema_err(game_id, &format!("empty entity name in {}", id.json_key())));
        }
        let cells = cells
            .as_object()
            .ok_or_else(|| schema_err(game_id, &format!("row {entity} is not an object")))?;
        let cols = columns.get_or_insert_with(|| cells.keys().cloned().collect());
        if cells.len() != cols.len() || cols.iter().any(|c| !cells.contains_key(c)) {
            return Err(schema_err(
                game_id,
                &format!("row {entity} of {} has a different column set", id.json_key()),
            ));
        }
        let feature = match id {
            TableId::HomePlayers => Feature::Home,
            TableId::VisitingPlayers => Feature::Visiting,
            TableId::Teams if row_idx == 0 => Feature::Home,
            TableId::Teams => Feature::Visiting,
        };
        let mut row = Vec::with_capacity(cols.len());
        for (col_idx, rtype) in cols.iter().enumerate() {
            let value = cell_string(&cells[rtype])
                .ok_or_else(|| schema_err(game_id, &format!("{entity}/{rtype} is not a string")))?;
            if value.is_empty() {
                return Err(schema_err(game_id, &format!("{entity}/{rtype} has an empty value")));
            }
            row.push(Record {
                entity: entity.clone(),
                rtype: rtype.clone(),
                value,
                feature,
                date,
                table: id,
                row: row_idx,
                col: col_idx,
            });
        }
        rows.push(row);
    }
    Ok(Table { id, rows })
}

fn game_to_json(g: &TableSet) -> Value {
    let mut obj = Map::new();
    obj.insert("game_id".into(), Value::String(g.game_id.clone()));
    obj.insert("date".into(), Value::String(format_date(g.date)));
    for table in &g.tables {
        let mut grid = Map::new();
        for row in &table.rows {
            let cells: Map<String, Value> = row
                .iter()
                .map(|r| (r.rtype.clone(), Value::String(r.value.clone())))
                .collect();
            grid.insert(row[0].entity.clone(), Value::Object(cells));
        }
        obj.insert(table.id.json_key().into(), Value::Object(grid));
    }
    obj.insert(
        "summary".into(),
        Value::Array(g.summary.iter().cloned().map(Value::String).collect()),
    );
    Value::Object(obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fixture_game() -> Value {
        json!({
            "game_id": "g1",
            "date": "2016-01-02",
            "home_players": {"A": {"PTS": "10", "AST": "2", "REB": "5"}},
            "vis_players": {"B": {"PTS": "7", "AST": "1", "REB": "9"}},
            "teams": {"T": {"PTS": "17", "AST": "3", "REB": "14"}},
            "summary": ["A", "scored", "10", "points"]
        })
    }

    fn write_dir(train: Value, dev: Value, test: Value) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.json"), train.to_string()).unwrap();
        fs::write(dir.path().join("dev.json"), dev.to_string()).unwrap();
        fs::write(dir.path().join("test.json"), test.to_string()).unwrap();
        dir
    }

    #[test]
    fn one_game_two_players_three_columns() {
        let dir = write_dir(json!([fixture_game()]), json!([]), json!([]));
        let ds = load_corpus(dir.path(), &CorpusSchema::default()).unwrap();
        assert_eq!(ds.train.len(), 1);
        let g = &ds.train[0];
        assert_eq!(g.num_records(), 9);
        assert_eq!(g.table(TableId::Teams).num_rows(), 1);
        assert_eq!(g.table(TableId::HomePlayers).columns(), vec!["PTS", "AST", "REB"]);
        assert_eq!(g.date, parse_date("2016-01-02").unwrap());
        assert!(ds.vocab.get("scored").is_some());
        assert!(ds.vocab.get("REB").is_some());
        assert!(ds.vocab.get("9").is_some());
    }

    #[test]
    fn empty_splits_give_reserved_vocabulary() {
        let dir = write_dir(json!([]), json!([]), json!([]));
        let ds = load_corpus(dir.path(), &CorpusSchema::default()).unwrap();
        assert!(ds.train.is_empty() && ds.dev.is_empty() && ds.test.is_empty());
        assert_eq!(ds.vocab.len(), 4);
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_corpus(dir.path(), &CorpusSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn missing_table_names_the_game() {
        let mut g = fixture_game();
        g.as_object_mut().unwrap().remove("teams");
        let dir = write_dir(json!([g]), json!([]), json!([]));
        match load_corpus(dir.path(), &CorpusSchema::default()).unwrap_err() {
            DataError::Schema { game_id, reason } => {
                assert_eq!(game_id, "g1");
                assert!(reason.contains("teams"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_date_names_the_game() {
        let mut g = fixture_game();
        g.as_object_mut().unwrap().remove("date");
        let dir = write_dir(json!([g]), json!([]), json!([]));
        assert!(matches!(
            load_corpus(dir.path(), &CorpusSchema::default()).unwrap_err(),
            DataError::Schema { game_id, .. } if game_id == "g1"
        ));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let mut g = fixture_game();
        g["home_players"]["C"] = json!({"PTS": "1"});
        let dir = write_dir(json!([g]), json!([]), json!([]));
        assert!(matches!(
            load_corpus(dir.path(), &CorpusSchema::default()).unwrap_err(),
            DataError::Schema { .. }
        ));
    }

    #[test]
    fn duplicate_game_ids_across_splits_are_rejected() {
        let dir = write_dir(json!([fixture_game()]), json!([fixture_game()]), json!([]));
        assert!(load_corpus(dir.path(), &CorpusSchema::default()).is_err());
    }

    #[test]
    fn date_round_trip() {
        for s in ["1970-01-01", "2016-11-30", "2000-02-29"] {
            assert_eq!(format_date(parse_date(s).unwrap()), s);
        }
    }
}
