//! Record/table data model, corpus I/O, timelines and the synthetic corpus.

mod corpus;
mod timeline;
mod toy;
mod vocab;

pub use corpus::{load_corpus, save_corpus, save_split, CorpusSchema};
pub use timeline::{build_timelines, history_window, TimelineStore};
pub use toy::{gen_toy_corpus, ToySpec};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

/// Whether a row's entity played at home.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    Home,
    Visiting,
}

impl Feature {
    pub fn index(self) -> usize {
        match self {
            Feature::Home => 0,
            Feature::Visiting => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TableId {
    HomePlayers,
    VisitingPlayers,
    Teams,
}

impl TableId {
    pub const ALL: [TableId; 3] = [TableId::HomePlayers, TableId::VisitingPlayers, TableId::Teams];

    pub fn json_key(self) -> &'static str {
        match self {
            TableId::HomePlayers => "home_players",
            TableId::VisitingPlayers => "vis_players",
            TableId::Teams => "teams",
        }
    }
}

/// One table cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub entity: String,
    pub rtype: String,
    pub value: String,
    pub feature: Feature,
    /// Days since 1970-01-01.
    pub date: i64,
    pub table: TableId,
    pub row: usize,
    pub col: usize,
}

/// A rectangular grid of records: one row per entity, one column per type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: TableId,
    pub rows: Vec<Vec<Record>>,
}

impl Table {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn columns(&self) -> Vec<&str> {
        self.rows
            .first()
            .map(|r| r.iter().map(|rec| rec.rtype.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn column_index(&self, rtype: &str) -> Option<usize> {
        self.rows.first()?.iter().position(|r| r.rtype == rtype)
    }

    pub fn entity(&self, row: usize) -> &str {
        &self.rows[row][0].entity
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.rows.iter().flatten()
    }

    /// Column `col` as a list of records, top to bottom.
    pub fn column(&self, col: usize) -> Vec<&Record> {
        self.rows.iter().map(|r| &r[col]).collect()
    }
}

/// The three tables of one game plus its reference summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSet {
    pub game_id: String,
    pub date: i64,
    /// Home players, visiting players, teams, in that order.
    pub tables: [Table; 3],
    pub summary: Vec<String>,
}

impl TableSet {
    pub fn table(&self, id: TableId) -> &Table {
        &self.tables[id as usize]
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.tables.iter().flat_map(Table::records)
    }

    pub fn num_records(&self) -> usize {
        self.records().count()
    }

    /// All records of `entity`, across tables.
    pub fn entity_records<'a>(&'a self, entity: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records().filter(move |r| r.entity == entity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub train: Vec<TableSet>,
    pub dev: Vec<TableSet>,
    pub test: Vec<TableSet>,
    pub vocab: Vocabulary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

impl Dataset {
    /// Builds a dataset and its vocabulary from the training split.
    pub fn new(train: Vec<TableSet>, dev: Vec<TableSet>, test: Vec<TableSet>) -> Self {
        let vocab = Vocabulary::from_training(&train);
        Self { train, dev, test, vocab }
    }

    pub fn split(&self, split: Split) -> &[TableSet] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_games(&self) -> impl Iterator<Item = &TableSet> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}
