use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::parse_date;
use super::{Dataset, Feature, Record, Table, TableId, TableSet};
use crate::baseline::{generate_template, TemplateConfig};

const TEAM_NAMES: [&str; 12] = [
    "Hawks", "Celtics", "Nets", "Hornets", "Bulls", "Cavaliers", "Mavericks", "Nuggets", "Pistons", "Warriors",
    "Rockets", "Pacers",
];
const FIRST: [&str; 12] = [
    "Al", "John", "Gary", "Gerald", "Kemba", "Marcin", "Bradley", "Otto", "Nene", "Kris", "Jared", "Garrett",
];
const LAST: [&str; 12] = [
    "Jefferson", "Wall", "Neal", "Henderson", "Walker", "Gortat", "Beal", "Porter", "Hilario", "Humphries",
    "Dudley", "Temple",
];

/// Shape of a synthetic league.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySpec {
    pub seed: u64,
    pub games: usize,
    pub dev_games: usize,
    pub test_games: usize,
    pub players_per_team: usize,
    pub teams: usize,
    /// Player columns; team tables get these plus `WIN`.
    pub player_columns: Vec<String>,
}

impl ToySpec {
    pub fn new(seed: u64, games: usize, players_per_team: usize) -> Self {
        Self {
            seed,
            games,
            dev_games: 0,
            test_games: 0,
            players_per_team,
            teams: 4,
            player_columns: ["PTS", "AST", "REB", "FGM", "FGA"].iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_splits(mut self, dev_games: usize, test_games: usize) -> Self {
        self.dev_games = dev_games;
        self.test_games = test_games;
        self
    }

    pub fn with_columns(mut self, columns: &[&str]) -> Self {
        self.player_columns = columns.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_teams(mut self, teams: usize) -> Self {
        self.teams = teams;
        self
    }

    /// Consecutive daily games; train games come first, then dev, then test.
    pub fn generate(&self) -> Dataset {
        assert!(self.games >= 1, "a toy corpus needs at least one game");
        assert!(self.players_per_team >= 1, "teams need at least one player");
        assert!((2..=TEAM_NAMES.len()).contains(&self.teams), "between 2 and 12 teams");
        assert!(self.player_columns.iter().any(|c| c == "PTS"), "player columns must include PTS");

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut names: Vec<String> = FIRST
            .iter()
            .flat_map(|f| LAST.iter().map(move |l| format!("{f}_{l}")))
            .collect();
        names.shuffle(&mut rng);
        let rosters: Vec<(&str, Vec<String>)> = (0..self.teams)
            .map(|t| {
                let start = t * self.players_per_team;
                (TEAM_NAMES[t], names[start..start + self.players_per_team].to_vec())
            })
            .collect();

        let base = parse_date("2016-01-01").expect("valid base date");
        let total = self.games + self.dev_games + self.test_games;
        let mut all = Vec::with_capacity(total);
        for g in 0..total {
            let home = rng.gen_range(0..self.teams);
            let mut vis = rng.gen_range(0..self.teams - 1);
            if vis >= home {
                vis += 1;
            }
            all.push(self.game(&mut rng, g, base + g as i64, &rosters[home], &rosters[vis]));
        }
        let test = all.split_off(self.games + self.dev_games);
        let dev = all.split_off(self.games);
        Dataset::new(all, dev, test)
    }

    fn player_stats(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut fgm = 0;
        self.player_columns
            .iter()
            .map(|c| match c.as_str() {
                "PTS" => rng.gen_range(0..=30),
                "AST" => rng.gen_range(0..=10),
                "REB" => rng.gen_range(0..=12),
                "FGM" => {
                    fgm = rng.gen_range(0..=12);
                    fgm
                }
                "FGA" => fgm + rng.gen_range(0..=8),
                _ => rng.gen_range(0..=10),
            })
            .collect()
    }

    fn game(
        &self,
        rng: &mut ChaCha8Rng,
        index: usize,
        date: i64,
        home: &(&str, Vec<String>),
        vis: &(&str, Vec<String>),
    ) -> TableSet {
        let cols = &self.player_columns;
        let mut player_tables = Vec::new();
        let mut totals = Vec::new();
        for (id, feature, roster) in [
            (TableId::HomePlayers, Feature::Home, &home.1),
            (TableId::VisitingPlayers, Feature::Visiting, &vis.1),
        ] {
            let mut sums = vec![0u32; cols.len()];
            let rows: Vec<Vec<Record>> = roster
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let stats = self.player_stats(rng);
                    sums.iter_mut().zip(&stats).for_each(|(s, v)| *s += v);
                    stats
                        .iter()
                        .zip(cols)
                        .enumerate()
                        .map(|(j, (v, c))| Record {
                            entity: name.clone(),
                            rtype: c.clone(),
                            value: v.to_string(),
                            feature,
                            date,
                            table: id,
                            row: i,
                            col: j,
                        })
                        .collect()
                })
                .collect();
            player_tables.push(Table { id, rows });
            totals.push(sums);
        }

        let pts = cols.iter().position(|c| c == "PTS").expect("PTS present");
        let team_rows = [(home.0, Feature::Home, 0usize), (vis.0, Feature::Visiting, 1usize)]
            .iter()
            .map(|&(name, feature, i)| {
                let own = totals[i][pts];
                let other = totals[1 - i][pts];
                let win = match own.cmp(&other) {
                    std::cmp::Ordering::Greater => "W",
                    std::cmp::Ordering::Less => "L",
                    std::cmp::Ordering::Equal => "T",
                };
                let values = totals[i].iter().map(u32::to_string).chain([win.to_string()]);
                cols.iter()
                    .cloned()
                    .chain(["WIN".to_string()])
                    .zip(values)
                    .enumerate()
                    .map(|(j, (c, v))| Record {
                        entity: name.to_string(),
                        rtype: c,
                        value: v,
                        feature,
                        date,
                        table: TableId::Teams,
                        row: i,
                        col: j,
                    })
                    .collect()
            })
            .collect();

        let [home_t, vis_t]: [Table; 2] = player_tables.try_into().expect("two player tables");
        let mut game = TableSet {
            game_id: format!("toy-{}-{index:04}", self.seed),
            date,
            tables: [
                home_t,
                vis_t,
                Table {
                    id: TableId::Teams,
                    rows: team_rows,
                },
            ],
            summary: Vec::new(),
        };
        game.summary = generate_template(&game, &TemplateConfig::default()).expect("toy games satisfy the template schema");
        game
    }
}

/// Synthetic corpus with every game in the training split.
pub fn gen_toy_corpus(seed: u64, games: usize, players_per_team: usize) -> Dataset {
    ToySpec::new(seed, games, players_per_team).generate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_timelines, save_corpus, CorpusSchema};

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_toy_corpus(3, 5, 2);
        let b = gen_toy_corpus(3, 5, 2);
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_corpus(&a, da.path(), &CorpusSchema::default()).unwrap();
        save_corpus(&b, db.path(), &CorpusSchema::default()).unwrap();
        for f in ["train.json", "dev.json", "test.json"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn single_game_single_player() {
        let ds = gen_toy_corpus(1, 1, 1);
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.train[0].table(TableId::HomePlayers).num_rows(), 1);
        assert_eq!(ds.train[0].table(TableId::VisitingPlayers).num_rows(), 1);
        assert_eq!(ds.train[0].table(TableId::Teams).num_rows(), 2);
    }

    #[test]
    fn splits_are_chronological_and_disjoint() {
        let ds = ToySpec::new(9, 6, 2).with_splits(2, 3).generate();
        assert_eq!((ds.train.len(), ds.dev.len(), ds.test.len()), (6, 2, 3));
        let last_train = ds.train.iter().map(|g| g.date).max().unwrap();
        assert!(ds.dev.iter().chain(&ds.test).all(|g| g.date > last_train));
        let mut ids: Vec<&str> = ds.all_games().map(|g| g.game_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 11);
    }

    #[test]
    fn team_totals_are_consistent() {
        let ds = gen_toy_corpus(4, 3, 3);
        for g in &ds.train {
            let teams = g.table(TableId::Teams);
            for (t, p) in [(0, TableId::HomePlayers), (1, TableId::VisitingPlayers)] {
                let total: u32 = g.table(p).rows.iter().map(|r| r[0].value.parse::<u32>().unwrap()).sum();
                assert_eq!(teams.rows[t][0].value, total.to_string());
            }
        }
    }

    #[test]
    fn players_recur_so_timelines_have_history() {
        let ds = gen_toy_corpus(7, 20, 4);
        let store = build_timelines(&ds);
        assert!(store.iter().any(|(_, tl)| tl.len() > 3));
    }
}
