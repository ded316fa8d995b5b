use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "[pad]";
const UNK_TOKEN: &str = "[unk]";

/// Lower-cases and splits on whitespace and punctuation. Punctuation is a
/// separator only and never becomes a token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token to index mapping. Index 0 is padding and index 1 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Builds a vocabulary from token streams keeping tokens seen at least
    /// `min_count` times, in first-appearance order.
    pub fn build<'a>(streams: impl IntoIterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for s in streams {
            for t in s {
                let c = counts.entry(t.as_str()).or_insert(0);
                if *c == 0 {
                    order.push(t.as_str());
                }
                *c += 1;
            }
        }
        let mut v = Self::new();
        for t in order {
            if counts[t] >= min_count.max(1) {
                v.insert(t);
            }
        }
        v
    }

    /// Adds a token if absent and returns its index.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t)).collect()
    }

    /// One token per line, in index order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != PAD_TOKEN || lines.next()? != UNK_TOKEN {
            return None;
        }
        let mut v = Self::new();
        for l in lines {
            v.insert(l);
        }
        Some(v)
    }
}

/// Keeps the first `len` tokens and right-pads with [`PAD`]. The mask marks
/// real tokens.
pub fn truncate_or_pad(tokens: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(len >= 1, "sequence length must be positive");
    let keep = tokens.len().min(len);
    let mut seq = tokens[..keep].to_vec();
    seq.resize(len, PAD);
    let mut mask = vec![true; keep];
    mask.resize(len, false);
    (seq, mask)
}
