use std::collections::HashMap;

use crate::data::{truncate_history, ImpressionLog, NewsRecord, Vocab};
use crate::model::NewsInput;

/// News items indexed for the model, with the entity rows they reference.
/// Entity row 0 is padding.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    pub news: Vec<NewsInput>,
    pub news_ids: Vec<String>,
    news_index: HashMap<String, usize>,
    /// Entity mentions dropped because the entity list was frozen.
    pub unknown_entities: usize,
}

impl Corpus {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            entities: vec![String::new()],
            entity_index: HashMap::new(),
            news: Vec::new(),
            news_ids: Vec::new(),
            news_index: HashMap::new(),
            unknown_entities: 0,
        }
    }

    /// Starts from a fixed entity list (row order preserved, row 0 padding).
    pub fn with_entities(vocab: Vocab, entities: Vec<String>) -> Self {
        let mut c = Self::new(vocab);
        for e in entities.into_iter().skip(1) {
            c.entity_index.insert(e.clone(), c.entities.len());
            c.entities.push(e);
        }
        c
    }

    /// Adds news items (later duplicates of an id are ignored). New entities
    /// get rows when `grow` is set and are dropped otherwise.
    pub fn add_news(&mut self, records: &[NewsRecord], grow: bool) {
        for r in records {
            if self.news_index.contains_key(&r.news_id) {
                continue;
            }
            let mut ents = Vec::with_capacity(r.entity_ids.len());
            for e in &r.entity_ids {
                match self.entity_index.get(e) {
                    Some(&i) => ents.push(i),
                    None if grow => {
                        self.entity_index.insert(e.clone(), self.entities.len());
                        ents.push(self.entities.len());
                        self.entities.push(e.clone());
                    }
                    None => self.unknown_entities += 1,
                }
            }
            self.news_index.insert(r.news_id.clone(), self.news.len());
            self.news_ids.push(r.news_id.clone());
            self.news.push(NewsInput {
                tokens: r.genre_texts.clone(),
                entities: ents,
            });
        }
    }

    pub fn news_position(&self, id: &str) -> Option<usize> {
        self.news_index.get(id).copied()
    }

    pub fn entity_row(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    /// Resolves logs against the corpus. Unknown history or candidate ids are
    /// dropped; impressions left with an empty history or no candidates are
    /// dropped too.
    pub fn resolve(&self, logs: &[ImpressionLog], m: usize) -> (Vec<Impression>, ResolveStats) {
        let mut stats = ResolveStats::default();
        let mut out = Vec::with_capacity(logs.len());
        for log in logs {
            let hist: Vec<usize> = log
                .history
                .iter()
                .filter_map(|id| {
                    let p = self.news_position(id);
                    stats.unknown_history += usize::from(p.is_none());
                    p
                })
                .collect();
            let (kept, mask) = truncate_history(&hist, m, 0);
            let real = mask.iter().filter(|&&k| k).count();
            let mut candidates = Vec::with_capacity(log.shown.len());
            let mut labels = Vec::with_capacity(log.shown.len());
            for (id, label) in &log.shown {
                match self.news_position(id) {
                    Some(p) => {
                        candidates.push(p);
                        labels.push(*label);
                    }
                    None => stats.unknown_candidates += 1,
                }
            }
            if real == 0 {
                stats.empty_history += 1;
                continue;
            }
            if candidates.is_empty() {
                stats.no_candidates += 1;
                continue;
            }
            out.push(Impression {
                impression_id: log.impression_id.clone(),
                user_id: log.user_id.clone(),
                history: kept[..real].to_vec(),
                candidates,
                labels,
            });
        }
        (out, stats)
    }
}

/// One impression in corpus positions. `history` holds at most `m` real
/// items, most recent last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub history: Vec<usize>,
    pub candidates: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResolveStats {
    pub unknown_history: usize,
    pub unknown_candidates: usize,
    pub empty_history: usize,
    pub no_candidates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, ents: &[&str]) -> NewsRecord {
        NewsRecord {
            news_id: id.into(),
            category: "c".into(),
            subcategory: "s".into(),
            genre_texts: vec![vec![2, 3], vec![]],
            entity_ids: ents.iter().map(|e| e.to_string()).collect(),
        }
    }

    fn log(hist: &[&str], shown: &[(&str, u8)]) -> ImpressionLog {
        ImpressionLog {
            impression_id: "1".into(),
            user_id: "U".into(),
            timestamp: String::new(),
            history: hist.iter().map(|h| h.to_string()).collect(),
            shown: shown.iter().map(|(s, l)| (s.to_string(), *l)).collect(),
        }
    }

    #[test]
    fn entity_rows_grow_or_freeze() {
        let mut c = Corpus::new(Vocab::new());
        c.add_news(&[rec("N1", &["Q1", "Q2"]), rec("N2", &["Q2"])], true);
        assert_eq!(c.entities, vec!["", "Q1", "Q2"]);
        assert_eq!(c.news[1].entities, vec![2]);
        c.add_news(&[rec("N3", &["Q9", "Q1"])], false);
        assert_eq!(c.news[2].entities, vec![1]);
        assert_eq!(c.unknown_entities, 1);
    }

    #[test]
    fn resolution_keeps_recent_history_and_counts_drops() {
        let mut c = Corpus::new(Vocab::new());
        c.add_news(&[rec("N1", &[]), rec("N2", &[]), rec("N3", &[])], true);
        let logs = [
            log(&["N1", "N2", "N3", "X"], &[("N1", 1), ("Y", 0), ("N2", 0)]),
            log(&["X"], &[("N1", 1)]),
        ];
        let (imps, stats) = c.resolve(&logs, 2);
        assert_eq!(imps.len(), 1);
        assert_eq!(imps[0].history, vec![1, 2]);
        assert_eq!(imps[0].labels, vec![1, 0]);
        assert_eq!(stats.unknown_history, 2);
        assert_eq!(stats.unknown_candidates, 1);
        assert_eq!(stats.empty_history, 1);
    }
}
