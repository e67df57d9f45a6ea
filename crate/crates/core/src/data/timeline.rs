use std::collections::{BTreeMap, BTreeSet};

use super::{Dataset, Record};

/// Date-ascending record sequences keyed by (entity, type), built over every
/// split. Leakage of future games is prevented by the strict date cut in
/// [`history_window`], not by restricting which splits are indexed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TimelineStore {
    index: BTreeMap<(String, String), Vec<Record>>,
    num_entities: usize,
    num_types: usize,
}

impl TimelineStore {
    pub fn get(&self, entity: &str, rtype: &str) -> Option<&[Record]> {
        self.index
            .get(&(entity.to_string(), rtype.to_string()))
            .map(Vec::as_slice)
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn num_timelines(&self) -> usize {
        self.index.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &[Record])> {
        self.index.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

pub fn build_timelines(dataset: &Dataset) -> TimelineStore {
    // (date, game_id, table, row, col) totally orders records, so the
    // result does not depend on the order games are listed in.
    let mut keyed: BTreeMap<(String, String), Vec<(i64, &str, &Record)>> = BTreeMap::new();
    let mut entities = BTreeSet::new();
    let mut types = BTreeSet::new();
    for game in dataset.all_games() {
        for r in game.records() {
            entities.insert(r.entity.as_str());
            types.insert(r.rtype.as_str());
            keyed
                .entry((r.entity.clone(), r.rtype.clone()))
                .or_default()
                .push((r.date, game.game_id.as_str(), r));
        }
    }
    let index = keyed
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| {
                (a.0, a.1, a.2.table, a.2.row, a.2.col).cmp(&(b.0, b.1, b.2.table, b.2.row, b.2.col))
            });
            (k, v.into_iter().map(|(_, _, r)| r.clone()).collect())
        })
        .collect();
    TimelineStore {
        index,
        num_entities: entities.len(),
        num_types: types.len(),
    }
}

/// The `w` most recent records of `record`'s timeline dated strictly before
/// `record.date`, oldest first. Unknown timelines give an empty window.
pub fn history_window(record: &Record, store: &TimelineStore, w: usize) -> Vec<Record> {
    assert!(w >= 1, "history window must be at least 1");
    let Some(timeline) = store.get(&record.entity, &record.rtype) else {
        return Vec::new();
    };
    let end = timeline.partition_point(|r| r.date < record.date);
    timeline[end.saturating_sub(w)..end].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, Table, TableId, TableSet};

    fn rec(entity: &str, rtype: &str, value: &str, date: i64) -> Record {
        Record {
            entity: entity.into(),
            rtype: rtype.into(),
            value: value.into(),
            feature: Feature::Home,
            date,
            table: TableId::HomePlayers,
            row: 0,
            col: 0,
        }
    }

    fn game(id: &str, records: Vec<Record>) -> TableSet {
        let date = records[0].date;
        TableSet {
            game_id: id.into(),
            date,
            tables: [
                Table {
                    id: TableId::HomePlayers,
                    rows: vec![records],
                },
                Table {
                    id: TableId::VisitingPlayers,
                    rows: vec![],
                },
                Table {
                    id: TableId::Teams,
                    rows: vec![],
                },
            ],
            summary: vec!["x".into()],
        }
    }

    #[test]
    fn two_records_are_sorted_by_date() {
        let ds = Dataset::new(
            vec![
                game("g5", vec![rec("AlJefferson", "PTS", "18", 5)]),
                game("g2", vec![rec("AlJefferson", "PTS", "10", 2)]),
            ],
            vec![],
            vec![],
        );
        let store = build_timelines(&ds);
        let tl = store.get("AlJefferson", "PTS").unwrap();
        assert_eq!(tl.iter().map(|r| r.date).collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn single_record_gives_singleton_timeline() {
        let ds = Dataset::new(vec![game("g", vec![rec("A", "PTS", "1", 1)])], vec![], vec![]);
        let store = build_timelines(&ds);
        assert_eq!(store.get("A", "PTS").unwrap().len(), 1);
        assert_eq!((store.num_entities(), store.num_types()), (1, 1));
    }

    #[test]
    fn window_keeps_most_recent_strictly_earlier() {
        let games: Vec<TableSet> = (1..=5)
            .map(|d| game(&format!("g{d}"), vec![rec("A", "PTS", &d.to_string(), d)]))
            .collect();
        let ds = Dataset::new(games, vec![], vec![]);
        let store = build_timelines(&ds);
        let query = rec("A", "PTS", "5", 5);
        let hist = history_window(&query, &store, 3);
        assert_eq!(hist.iter().map(|r| r.date).collect::<Vec<_>>(), vec![2, 3, 4]);

        let earliest = rec("A", "PTS", "1", 1);
        assert!(history_window(&earliest, &store, 3).is_empty());

        let absent = rec("B", "PTS", "1", 9);
        assert!(history_window(&absent, &store, 3).is_empty());
    }

    #[test]
    fn empty_dataset_gives_empty_store() {
        let store = build_timelines(&Dataset::default());
        assert_eq!(store.num_timelines(), 0);
        assert_eq!(store.num_entities(), 0);
    }
}
