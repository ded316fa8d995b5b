//! MIND-layout TSV files.
//!
//! `news.tsv`: news_id, category, subcategory, title, abstract, url,
//! title_entities (JSON), abstract_entities (JSON).
//!
//! `behaviors.tsv`: impression_id, user_id, time, space separated history,
//! space separated `newsid-label` impressions.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::Value;

use super::text::{tokenize, Vocab};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewsRecord {
    pub news_id: String,
    pub category: String,
    pub subcategory: String,
    /// Token ids per genre (title first, then abstract), truncated but unpadded.
    pub genre_texts: Vec<Vec<usize>>,
    pub entity_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImpressionLog {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: String,
    /// Most recent click last.
    pub history: Vec<String>,
    pub shown: Vec<(String, u8)>,
}

impl ImpressionLog {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.shown.iter().enumerate().filter(|(_, s)| s.1 == 1).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.shown.iter().enumerate().filter(|(_, s)| s.1 == 0).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug)]
pub enum VocabPolicy {
    /// Build from the parsed file, keeping tokens seen at least this often.
    Build { min_count: usize },
    /// Encode against an existing vocabulary; unseen tokens map to unknown.
    Fixed(Vocab),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewsParseOptions {
    /// Max tokens kept per genre; its length is the genre count.
    pub genre_lengths: Vec<usize>,
    pub entity_cap: usize,
}

impl Default for NewsParseOptions {
    fn default() -> Self {
        Self {
            genre_lengths: vec![30, 60],
            entity_cap: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewsTable {
    pub records: Vec<NewsRecord>,
    pub vocab: Vocab,
    /// Entity columns that failed to parse as JSON and were treated as empty.
    pub entity_json_warnings: usize,
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| DataError::io(path, e))
}

/// Extracts `WikidataId` fields in order of appearance. Returns `None` on
/// malformed JSON.
pub fn parse_entity_column(col: &str) -> Option<Vec<String>> {
    let col = col.trim();
    if col.is_empty() {
        return Some(Vec::new());
    }
    let v: Value = serde_json::from_str(col).ok()?;
    let arr = v.as_array()?;
    Some(
        arr.iter()
            .filter_map(|e| e.get("WikidataId").and_then(Value::as_str))
            .map(str::to_string)
            .collect(),
    )
}

pub fn parse_news_table(path: &Path, policy: &VocabPolicy, opts: &NewsParseOptions) -> Result<NewsTable, DataError> {
    let reader = open(path)?;
    parse_news_reader(reader, policy, opts).map_err(|e| e.with_path(path))
}

pub fn parse_news_reader<R: BufRead>(reader: R, policy: &VocabPolicy, opts: &NewsParseOptions) -> Result<NewsTable, DataError> {
    if opts.genre_lengths.is_empty() || opts.genre_lengths.len() > 2 {
        return Err(DataError::Format(format!(
            "genre count {} unsupported (title and abstract only)",
            opts.genre_lengths.len()
        )));
    }
    struct Raw {
        id: String,
        cat: String,
        sub: String,
        texts: Vec<Vec<String>>,
        entities: Vec<String>,
    }
    let mut raws = Vec::new();
    let mut warnings = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Malformed {
            path: None,
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 8 {
            return Err(DataError::Malformed {
                path: None,
                line: i + 1,
                msg: format!("expected 8 tab-separated fields, found {}", f.len()),
            });
        }
        let texts = [f[3], f[4]]
            .iter()
            .zip(&opts.genre_lengths)
            .map(|(t, &len)| {
                let mut tok = tokenize(t);
                tok.truncate(len);
                tok
            })
            .collect();
        let mut entities: Vec<String> = Vec::new();
        for col in [f[6], f[7]] {
            match parse_entity_column(col) {
                Some(ids) => {
                    for id in ids {
                        if !entities.contains(&id) {
                            entities.push(id);
                        }
                    }
                }
                None => warnings += 1,
            }
        }
        entities.truncate(opts.entity_cap);
        raws.push(Raw {
            id: f[0].to_string(),
            cat: f[1].to_string(),
            sub: f[2].to_string(),
            texts,
            entities,
        });
    }
    let vocab = match policy {
        VocabPolicy::Build { min_count } => Vocab::build(
            raws.iter().flat_map(|r| r.texts.iter().map(Vec::as_slice)),
            *min_count,
        ),
        VocabPolicy::Fixed(v) => v.clone(),
    };
    let records = raws
        .into_iter()
        .map(|r| NewsRecord {
            news_id: r.id,
            category: r.cat,
            subcategory: r.sub,
            genre_texts: r.texts.iter().map(|t| vocab.encode(t)).collect(),
            entity_ids: r.entities,
        })
        .collect();
    Ok(NewsTable {
        records,
        vocab,
        entity_json_warnings: warnings,
    })
}

fn entity_json(ids: &[String]) -> String {
    let arr: Vec<Value> = ids
        .iter()
        .map(|id| {
            serde_json::json!({
                "Label": id,
                "Type": "E",
                "WikidataId": id,
                "Confidence": 1.0,
                "OccurrenceOffsets": [],
                "SurfaceForms": [],
            })
        })
        .collect();
    Value::Array(arr).to_string()
}

/// Serializes records in the news TSV layout. All entities go into the title
/// entity column.
pub fn write_news_table<W: Write>(mut w: W, records: &[NewsRecord], vocab: &Vocab) -> std::io::Result<()> {
    for r in records {
        let text = |g: usize| {
            r.genre_texts
                .get(g)
                .map(|t| {
                    t.iter()
                        .map(|&i| vocab.token(i).unwrap_or("[unk]"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default()
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t\t{}\t[]",
            r.news_id,
            r.category,
            r.subcategory,
            text(0),
            text(1),
            entity_json(&r.entity_ids)
        )?;
    }
    Ok(())
}

pub fn parse_behaviors(path: &Path) -> Result<Vec<ImpressionLog>, DataError> {
    let reader = open(path)?;
    parse_behaviors_reader(reader).map_err(|e| e.with_path(path))
}

pub fn parse_behaviors_reader<R: BufRead>(reader: R) -> Result<Vec<ImpressionLog>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let bad = |msg: String| DataError::Malformed {
            path: None,
            line: i + 1,
            msg,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 5 {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let history = f[3].split_whitespace().map(str::to_string).collect();
        let mut shown = Vec::new();
        for item in f[4].split_whitespace() {
            let (id, label) = item
                .rsplit_once('-')
                .ok_or_else(|| bad(format!("impression `{item}` lacks a -0/-1 label")))?;
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
            };
            shown.push((id.to_string(), label));
        }
        if shown.is_empty() {
            return Err(bad("impression shows no items".into()));
        }
        out.push(ImpressionLog {
            impression_id: f[0].to_string(),
            user_id: f[1].to_string(),
            timestamp: f[2].to_string(),
            history,
            shown,
        });
    }
    Ok(out)
}

pub fn write_behaviors<W: Write>(mut w: W, logs: &[ImpressionLog]) -> std::io::Result<()> {
    for l in logs {
        let mut shown = String::new();
        for (k, (id, lab)) in l.shown.iter().enumerate() {
            if k > 0 {
                shown.push(' ');
            }
            let _ = write!(shown, "{id}-{lab}");
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            l.impression_id,
            l.user_id,
            l.timestamp,
            l.history.join(" "),
            shown
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "N55528\tlifestyle\tlifestyleroyals\tThe Brands Queen Elizabeth, Prince Charles, and Prince Philip Swear By\tShop the notebooks, jackets, and more that the royals can't live without.\thttps://assets.msn.com/labs/mind/AAGH0ET.html\t[{\"Label\": \"Prince Philip, Duke of Edinburgh\", \"Type\": \"P\", \"WikidataId\": \"Q80976\", \"Confidence\": 1.0, \"OccurrenceOffsets\": [48], \"SurfaceForms\": [\"Prince Philip\"]}, {\"Label\": \"Charles, Prince of Wales\", \"Type\": \"P\", \"WikidataId\": \"Q43274\", \"Confidence\": 1.0, \"OccurrenceOffsets\": [28], \"SurfaceForms\": [\"Prince Charles\"]}]\t[]";

    fn parse(text: &str) -> NewsTable {
        parse_news_reader(text.as_bytes(), &VocabPolicy::Build { min_count: 1 }, &NewsParseOptions::default()).unwrap()
    }

    #[test]
    fn mind_line_with_two_title_entities() {
        let t = parse(LINE);
        let r = &t.records[0];
        assert_eq!(r.news_id, "N55528");
        assert_eq!(r.category, "lifestyle");
        assert_eq!(r.entity_ids, vec!["Q80976", "Q43274"]);
        assert_eq!(r.genre_texts.len(), 2);
        assert_eq!(t.vocab.token(r.genre_texts[0][0]), Some("the"));
        assert_eq!(t.entity_json_warnings, 0);
    }

    #[test]
    fn empty_and_malformed_entity_columns() {
        let t = parse("N1\tc\ts\ttitle\tabs\turl\t[]\t[]");
        assert!(t.records[0].entity_ids.is_empty());
        let t = parse("N1\tc\ts\ttitle\tabs\turl\t[{bad\t[]");
        assert!(t.records[0].entity_ids.is_empty());
        assert_eq!(t.entity_json_warnings, 1);
    }

    #[test]
    fn entities_deduplicated_and_capped() {
        let ids: Vec<String> = (0..8).map(|i| format!("Q{i}")).collect();
        let line = format!("N1\tc\ts\tt\ta\tu\t{}\t{}", entity_json(&ids), entity_json(&ids[..2]));
        let t = parse(&line);
        assert_eq!(t.records[0].entity_ids, ids[..5].to_vec());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_news_reader(
            format!("{LINE}\nN2\tonly\tthree").as_bytes(),
            &VocabPolicy::Build { min_count: 1 },
            &NewsParseOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn behaviors_layout() {
        let logs = parse_behaviors_reader("1\tU1\tt\tN1 N2\tN3-1 N4-0".as_bytes()).unwrap();
        assert_eq!(logs[0].history, vec!["N1", "N2"]);
        assert_eq!(logs[0].shown, vec![("N3".into(), 1), ("N4".into(), 0)]);
        let logs = parse_behaviors_reader("1\tU1\tt\t\tN3-1".as_bytes()).unwrap();
        assert!(logs[0].history.is_empty());
        assert!(parse_behaviors_reader("1\tU1\tt\t\tN3-2".as_bytes()).is_err());
        assert!(parse_behaviors_reader("1\tU1\tt\t\tN3".as_bytes()).is_err());
    }

    #[test]
    fn behaviors_round_trip() {
        let text = "7\tU9\t11/11/2019 9:05:58 AM\tN1 N2 N3\tN4-0 N5-1\n8\tU2\tt\t\tN1-1\n";
        let logs = parse_behaviors_reader(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_behaviors(&mut out, &logs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
