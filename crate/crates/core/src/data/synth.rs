//! Synthetic corpora with planted, candidate-dependent click behaviour.
//!
//! Every news item belongs to one topic. Titles draw most tokens from a
//! topic-specific block of the vocabulary and entities from a topic-specific
//! cluster. Each user holds 2 to 4 interest topics; a shown candidate is
//! clicked with probability `1 - noise` when its topic is both an interest and
//! present in the user's history, and with probability `noise` otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mind::{write_behaviors, write_news_table, ImpressionLog, NewsRecord};
use super::text::Vocab;
use super::DataError;
use crate::kv::KvFile;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub topics: usize,
    pub users: usize,
    pub news: usize,
    pub vocab: usize,
    pub entities_per_topic: usize,
    pub entities_per_news: usize,
    pub relations: usize,
    pub history_min: usize,
    pub history_max: usize,
    /// Fraction of history clicks drawn from non-interest topics.
    pub history_noise: f64,
    pub candidates: usize,
    pub train_impressions: usize,
    pub test_impressions: usize,
    pub title_len: usize,
    pub abstract_len: usize,
    /// Click rule noise, in `[0, 0.5)`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            topics: 5,
            users: 200,
            news: 400,
            vocab: 300,
            entities_per_topic: 12,
            entities_per_news: 3,
            relations: 4,
            history_min: 3,
            history_max: 8,
            history_noise: 0.2,
            candidates: 6,
            train_impressions: 500,
            test_impressions: 200,
            title_len: 8,
            abstract_len: 12,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub const KEYS: [&'static str; 17] = [
        "topics",
        "users",
        "news",
        "vocab",
        "entities_per_topic",
        "entities_per_news",
        "relations",
        "history_min",
        "history_max",
        "history_noise",
        "candidates",
        "train_impressions",
        "test_impressions",
        "title_len",
        "abstract_len",
        "noise",
        "seed",
    ];

    /// Parses a flat `key=value` file; absent keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, DataError> {
        let kv = KvFile::parse(text, &Self::KEYS)?;
        let d = Self::default();
        let s = Self {
            topics: kv.get_or("topics", d.topics)?,
            users: kv.get_or("users", d.users)?,
            news: kv.get_or("news", d.news)?,
            vocab: kv.get_or("vocab", d.vocab)?,
            entities_per_topic: kv.get_or("entities_per_topic", d.entities_per_topic)?,
            entities_per_news: kv.get_or("entities_per_news", d.entities_per_news)?,
            relations: kv.get_or("relations", d.relations)?,
            history_min: kv.get_or("history_min", d.history_min)?,
            history_max: kv.get_or("history_max", d.history_max)?,
            history_noise: kv.get_or("history_noise", d.history_noise)?,
            candidates: kv.get_or("candidates", d.candidates)?,
            train_impressions: kv.get_or("train_impressions", d.train_impressions)?,
            test_impressions: kv.get_or("test_impressions", d.test_impressions)?,
            title_len: kv.get_or("title_len", d.title_len)?,
            abstract_len: kv.get_or("abstract_len", d.abstract_len)?,
            noise: kv.get_or("noise", d.noise)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Format(m.to_string()));
        if self.topics < 2 {
            return bad("topics must be at least 2");
        }
        if self.news < self.topics || self.users == 0 || self.candidates < 2 {
            return bad("news >= topics, users >= 1 and candidates >= 2 required");
        }
        if self.vocab < 2 * self.topics {
            return bad("vocab must hold at least two tokens per topic");
        }
        if self.entities_per_topic < 2 || self.entities_per_news == 0 || self.relations == 0 {
            return bad("entity settings must be positive (entities_per_topic >= 2)");
        }
        if self.history_min == 0 || self.history_max < self.history_min {
            return bad("history range must satisfy 1 <= history_min <= history_max");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.history_noise) {
            return bad("history_noise must lie in [0, 1)");
        }
        if self.title_len == 0 || self.abstract_len == 0 {
            return bad("text lengths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub news: Vec<NewsRecord>,
    pub vocab: Vocab,
    pub train: Vec<ImpressionLog>,
    pub test: Vec<ImpressionLog>,
    /// `(head, relation, tail)` ids; every triple stays within one topic.
    pub triples: Vec<(String, String, String)>,
    pub news_topic: Vec<usize>,
    pub user_interests: Vec<Vec<usize>>,
    /// Entity ids per topic cluster.
    pub clusters: Vec<Vec<String>>,
}

fn entity_name(topic: usize, j: usize, per_topic: usize) -> String {
    format!("Q{}", 1000 + topic * per_topic + j)
}

/// Whether the click rule makes `topic` a likely click for this user.
pub fn click_eligible(topic: usize, interests: &[usize], history_topics: &BTreeSet<usize>) -> bool {
    interests.contains(&topic) && history_topics.contains(&topic)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.topics;

    let mut vocab = Vocab::new();
    for i in 0..spec.vocab {
        vocab.insert(&format!("w{i}"));
    }
    // 80% of the vocabulary split into topic blocks, the rest shared
    let block = (spec.vocab * 4 / 5) / k;
    let topic_tokens = |t: usize| 2 + t * block..2 + (t + 1) * block;
    let common = 2 + k * block..2 + spec.vocab;

    let clusters: Vec<Vec<String>> = (0..k)
        .map(|t| (0..spec.entities_per_topic).map(|j| entity_name(t, j, spec.entities_per_topic)).collect())
        .collect();

    let mut news = Vec::with_capacity(spec.news);
    let mut news_topic = Vec::with_capacity(spec.news);
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); k];
    for n in 0..spec.news {
        // every topic gets at least one article
        let t = if n < k { n } else { rng.random_range(0..k) };
        let text = |max: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            let len = rng.random_range(max.div_ceil(2)..=max);
            (0..len)
                .map(|_| {
                    if common.is_empty() || rng.random::<f64>() < 0.7 {
                        rng.random_range(topic_tokens(t))
                    } else {
                        rng.random_range(common.clone())
                    }
                })
                .collect()
        };
        let title = text(spec.title_len, &mut rng);
        let abs = text(spec.abstract_len, &mut rng);
        let n_ent = rng.random_range(1..=spec.entities_per_news.min(spec.entities_per_topic));
        let ents = rand::seq::index::sample(&mut rng, spec.entities_per_topic, n_ent)
            .into_iter()
            .map(|j| clusters[t][j].clone())
            .collect();
        news.push(NewsRecord {
            news_id: format!("N{}", n + 1),
            category: format!("topic{t}"),
            subcategory: format!("topic{t}"),
            genre_texts: vec![title, abs],
            entity_ids: ents,
        });
        news_topic.push(t);
        by_topic[t].push(n);
    }

    let user_interests: Vec<Vec<usize>> = (0..spec.users)
        .map(|_| {
            let c = rng.random_range(2..=4usize).min(k);
            let mut v = rand::seq::index::sample(&mut rng, k, c).into_vec();
            v.sort_unstable();
            v
        })
        .collect();

    let make = |count: usize, offset: usize, rng: &mut ChaCha8Rng| -> Vec<ImpressionLog> {
        (0..count)
            .map(|i| {
                let u = rng.random_range(0..spec.users);
                let interests = &user_interests[u];
                let others: Vec<usize> = (0..k).filter(|t| !interests.contains(t)).collect();
                let hlen = rng.random_range(spec.history_min..=spec.history_max);
                let mut history = Vec::with_capacity(hlen);
                let mut htopics = BTreeSet::new();
                for _ in 0..hlen {
                    let t = if !others.is_empty() && rng.random::<f64>() < spec.history_noise {
                        *others.choose(rng).expect("non-empty")
                    } else {
                        *interests.choose(rng).expect("non-empty")
                    };
                    htopics.insert(t);
                    history.push(*by_topic[t].choose(rng).expect("topic has news"));
                }
                let mut shown = Vec::with_capacity(spec.candidates);
                for _ in 0..spec.candidates {
                    let t = if others.is_empty() || rng.random::<f64>() < 0.5 {
                        *interests.choose(rng).expect("non-empty")
                    } else {
                        *others.choose(rng).expect("non-empty")
                    };
                    let n = *by_topic[t].choose(rng).expect("topic has news");
                    let p = if click_eligible(t, interests, &htopics) {
                        1.0 - spec.noise
                    } else {
                        spec.noise
                    };
                    let label = u8::from(rng.random::<f64>() < p);
                    shown.push((news[n].news_id.clone(), label));
                }
                ImpressionLog {
                    impression_id: (offset + i + 1).to_string(),
                    user_id: format!("U{}", u + 1),
                    timestamp: format!("t{}", offset + i),
                    history: history.iter().map(|&n| news[n].news_id.clone()).collect(),
                    shown,
                }
            })
            .collect()
    };
    let train = make(spec.train_impressions, 0, &mut rng);
    let test = make(spec.test_impressions, spec.train_impressions, &mut rng);

    // chain each cluster so it is connected, then add random in-cluster edges
    let mut set = BTreeSet::new();
    for (t, cl) in clusters.iter().enumerate() {
        for j in 1..cl.len() {
            let r = rng.random_range(0..spec.relations);
            set.insert((cl[j - 1].clone(), format!("R{r}"), cl[j].clone()));
        }
        for _ in 0..cl.len() {
            let a = rng.random_range(0..cl.len());
            let b = rng.random_range(0..cl.len());
            if a != b {
                let r = (t + a) % spec.relations;
                set.insert((cl[a].clone(), format!("R{r}"), cl[b].clone()));
            }
        }
    }

    Ok(SyntheticData {
        news,
        vocab,
        train,
        test,
        triples: set.into_iter().collect(),
        news_topic,
        user_interests,
        clusters,
    })
}

impl SyntheticData {
    /// Writes `train/`, `test/` (MIND layout), `triples.tsv` and `truth.tsv`.
    pub fn write_dir(&self, out: &Path) -> Result<(), DataError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| DataError::io(&p, e)
        };
        for (split, logs) in [("train", &self.train), ("test", &self.test)] {
            let dir = out.join(split);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let mut buf = Vec::new();
            write_news_table(&mut buf, &self.news, &self.vocab).map_err(io(&dir))?;
            fs::write(dir.join("news.tsv"), &buf).map_err(io(&dir))?;
            let mut buf = Vec::new();
            write_behaviors(&mut buf, logs).map_err(io(&dir))?;
            fs::write(dir.join("behaviors.tsv"), &buf).map_err(io(&dir))?;
        }
        let triples: String = self
            .triples
            .iter()
            .map(|(h, r, t)| format!("{h}\t{r}\t{t}\n"))
            .collect();
        fs::write(out.join("triples.tsv"), triples).map_err(io(out))?;
        let mut truth = String::new();
        for (n, t) in self.news_topic.iter().enumerate() {
            truth.push_str(&format!("news\t{}\t{t}\n", self.news[n].news_id));
        }
        for (u, ts) in self.user_interests.iter().enumerate() {
            let ts: Vec<String> = ts.iter().map(usize::to_string).collect();
            truth.push_str(&format!("user\tU{}\t{}\n", u + 1, ts.join(" ")));
        }
        fs::write(out.join("truth.tsv"), truth).map_err(io(out))?;
        Ok(())
    }

    /// Topic of each news id, for audits.
    pub fn topic_of(&self) -> BTreeMap<&str, usize> {
        self.news
            .iter()
            .zip(&self.news_topic)
            .map(|(n, &t)| (n.news_id.as_str(), t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            noise,
            seed,
            train_impressions: 300,
            test_impressions: 50,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small(0.1, 3)).unwrap();
        let b = generate_synthetic(&small(0.1, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(0.1, 4)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn noiseless_positives_have_topic_in_history() {
        let d = generate_synthetic(&small(0.0, 5)).unwrap();
        let topic = d.topic_of();
        let mut positives = 0;
        for log in &d.train {
            let u: usize = log.user_id[1..].parse::<usize>().unwrap() - 1;
            let ht: BTreeSet<usize> = log.history.iter().map(|h| topic[h.as_str()]).collect();
            for (id, lab) in &log.shown {
                let t = topic[id.as_str()];
                let eligible = click_eligible(t, &d.user_interests[u], &ht);
                assert_eq!(*lab == 1, eligible);
                if *lab == 1 {
                    positives += 1;
                    assert!(ht.contains(&t));
                }
            }
        }
        assert!(positives > 0);
    }

    #[test]
    fn label_frequencies_follow_click_rule() {
        let spec = SynthSpec {
            noise: 0.2,
            train_impressions: 2000,
            test_impressions: 0,
            candidates: 5,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let topic = d.topic_of();
        let (mut e_n, mut e_pos, mut i_n, mut i_pos) = (0, 0, 0, 0);
        for log in &d.train {
            let u: usize = log.user_id[1..].parse::<usize>().unwrap() - 1;
            let ht: BTreeSet<usize> = log.history.iter().map(|h| topic[h.as_str()]).collect();
            for (id, lab) in &log.shown {
                if click_eligible(topic[id.as_str()], &d.user_interests[u], &ht) {
                    e_n += 1;
                    e_pos += *lab as usize;
                } else {
                    i_n += 1;
                    i_pos += *lab as usize;
                }
            }
        }
        assert_eq!(e_n + i_n, 10_000);
        let pe = e_pos as f64 / e_n as f64;
        let pi = i_pos as f64 / i_n as f64;
        assert!((pe - 0.8).abs() < 0.02, "eligible click rate {pe}");
        assert!((pi - 0.2).abs() < 0.02, "ineligible click rate {pi}");
    }

    #[test]
    fn triples_stay_inside_topic_clusters() {
        let d = generate_synthetic(&small(0.0, 1)).unwrap();
        for (h, _, t) in &d.triples {
            let ch = d.clusters.iter().position(|c| c.contains(h)).unwrap();
            let ct = d.clusters.iter().position(|c| c.contains(t)).unwrap();
            assert_eq!(ch, ct);
        }
    }

    #[test]
    fn spec_parsing() {
        let s = SynthSpec::from_kv("# comment\ntopics=3\nnoise = 0.1\n").unwrap();
        assert_eq!(s.topics, 3);
        assert_eq!(s.noise, 0.1);
        assert!(SynthSpec::from_kv("bogus=1").is_err());
        assert!(SynthSpec::from_kv("noise=0.5").is_err());
    }
}
