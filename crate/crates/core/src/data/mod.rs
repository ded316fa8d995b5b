//! Corpus ingestion: MIND-layout news and behavior files, vocabularies,
//! padding, vector files and synthetic corpora.

mod mind;
mod synth;
mod text;
mod vectors;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kv::KvError;

pub use mind::{
    parse_behaviors, parse_behaviors_reader, parse_entity_column, parse_news_reader, parse_news_table,
    write_behaviors, write_news_table, ImpressionLog, NewsParseOptions, NewsRecord, NewsTable, VocabPolicy,
};
pub use synth::{click_eligible, generate_synthetic, SynthSpec, SyntheticData};
pub use text::{tokenize, truncate_or_pad, Vocab, PAD, UNK};
pub use vectors::{EntityTable, VectorTable};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}line {line}: {msg}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Malformed {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Config(#[from] KvError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn with_path(self, p: &Path) -> Self {
        match self {
            DataError::Malformed { line, msg, .. } => DataError::Malformed {
                path: Some(p.to_path_buf()),
                line,
                msg,
            },
            other => other,
        }
    }
}

/// Keeps the `m` most recent clicks (history is most-recent-last) and pads
/// the tail with `pad`. The mask marks real slots.
pub fn truncate_history<T: Clone>(history: &[T], m: usize, pad: T) -> (Vec<T>, Vec<bool>) {
    assert!(m >= 1, "history cap must be positive");
    let start = history.len().saturating_sub(m);
    let mut kept = history[start..].to_vec();
    let real = kept.len();
    kept.resize(m, pad);
    let mut mask = vec![true; real];
    mask.resize(m, false);
    (kept, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_padding_and_recency() {
        let (h, m) = truncate_history(&[1, 2, 3], 50, 0);
        assert_eq!(&h[..3], &[1, 2, 3]);
        assert_eq!(m.iter().filter(|&&x| x).count(), 3);
        assert_eq!(h.len(), 50);
        let long: Vec<u32> = (1..=60).collect();
        let (h, m) = truncate_history(&long, 50, 0);
        assert_eq!(h, (11..=60).collect::<Vec<_>>());
        assert!(m.iter().all(|&x| x));
    }
}
