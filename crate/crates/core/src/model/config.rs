use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::kv::{KvError, KvFile};

/// Normalization used when weighting candidate entities by clicked entities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlphaMode {
    /// Softmax over candidate entities of the dot products.
    #[default]
    Softmax,
    /// Dot products divided by their plain sum over candidate entities.
    Literal,
}

/// Normalization axis of the entity-level user attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EqMode {
    /// Softmax over the clicked entities of each clicked news item.
    #[default]
    Corrected,
    /// Softmax over candidate entities; the resulting scale is always 1.
    Literal,
}

macro_rules! str_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, ModelError> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(ModelError::Config(format!("unknown {} `{s}`", stringify!($t)))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(AlphaMode, "softmax" => AlphaMode::Softmax, "literal" => AlphaMode::Literal);
str_enum!(EqMode, "corrected" => EqMode::Corrected, "literal" => EqMode::Literal);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_word: bool,
    pub use_entity: bool,
    pub use_news: bool,
    pub aware_word: bool,
    pub aware_entity: bool,
    pub aware_news: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Variant::Full.flags()
    }
}

impl AblationFlags {
    pub fn any_aware(&self) -> bool {
        (self.use_word && self.aware_word) || (self.use_entity && self.aware_entity) || (self.use_news && self.aware_news)
    }
}

/// Named model variants: the full model, one granularity removed
/// (`w`, `e`, `n`), one granularity's candidate conditioning removed
/// (`wc`, `ec`, `nc`), or all conditioning removed (`c`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    W,
    Wc,
    E,
    Ec,
    N,
    Nc,
    C,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::W,
        Variant::Wc,
        Variant::E,
        Variant::Ec,
        Variant::N,
        Variant::Nc,
        Variant::C,
    ];

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags {
            use_word: true,
            use_entity: true,
            use_news: true,
            aware_word: true,
            aware_entity: true,
            aware_news: true,
        };
        match self {
            Variant::Full => {}
            Variant::W => f.use_word = false,
            Variant::Wc => f.aware_word = false,
            Variant::E => f.use_entity = false,
            Variant::Ec => f.aware_entity = false,
            Variant::N => f.use_news = false,
            Variant::Nc => f.aware_news = false,
            Variant::C => {
                f.aware_word = false;
                f.aware_entity = false;
                f.aware_news = false;
            }
        }
        f
    }
}

str_enum!(Variant,
    "full" => Variant::Full, "w" => Variant::W, "wc" => Variant::Wc, "e" => Variant::E,
    "ec" => Variant::Ec, "n" => Variant::N, "nc" => Variant::Nc, "c" => Variant::C);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Rows of the entity table, including the padding row 0.
    pub entity_rows: usize,
    pub d_w: usize,
    pub d_e: usize,
    /// Matching dimension.
    pub d: usize,
    /// Genres per news item.
    pub g: usize,
    /// Tokens per genre.
    pub l: usize,
    /// Clicked news kept per user.
    pub m: usize,
    /// Entities kept per clicked news item.
    pub entities_clicked: usize,
    /// Entities kept per candidate.
    pub entities_candidate: usize,
    /// News-level attention heads.
    pub lambda1: usize,
    /// Word-level attention heads.
    pub lambda2: usize,
    pub text_heads: usize,
    pub positional: bool,
    pub dropout: f64,
    pub alpha_mode: AlphaMode,
    pub eq_mode: EqMode,
    pub flags: AblationFlags,
    pub finetune_entities: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            entity_rows: 1,
            d_w: 64,
            d_e: 100,
            d: 64,
            g: 2,
            l: 30,
            m: 50,
            entities_clicked: 5,
            entities_candidate: 5,
            lambda1: 4,
            lambda2: 4,
            text_heads: 4,
            positional: true,
            dropout: 0.2,
            alpha_mode: AlphaMode::Softmax,
            eq_mode: EqMode::Corrected,
            flags: AblationFlags::default(),
            finetune_entities: false,
        }
    }
}

impl ModelConfig {
    /// Width of the user vector given the enabled components.
    pub fn user_width(&self) -> usize {
        let f = self.flags;
        usize::from(f.use_word) * self.d_w + usize::from(f.use_entity) * self.d_e + usize::from(f.use_news) * self.d_w
    }

    pub fn news_width(&self) -> usize {
        self.d_w + self.d_e
    }

    /// Length of the stacked history token sequence.
    pub fn history_tokens(&self) -> usize {
        self.m * self.g * self.l
    }

    /// Keys understood by [`ModelConfig::apply_kv`].
    pub const KEYS: [&'static str; 24] = [
        "vocab_size", "entity_rows", "d_w", "d_e", "d", "g", "l", "m", "D", "Dc", "lambda1", "lambda2",
        "text_heads", "positional", "dropout", "alpha_mode", "eq_mode", "finetune_entities", "use_word",
        "use_entity", "use_news", "aware_word", "aware_entity", "aware_news",
    ];

    /// Overrides fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<(), KvError> {
        macro_rules! take {
            ($($key:literal => $field:expr),+ $(,)?) => {
                $(if let Some(v) = kv.get($key)? { $field = v; })+
            };
        }
        take!(
            "vocab_size" => self.vocab_size, "entity_rows" => self.entity_rows,
            "d_w" => self.d_w, "d_e" => self.d_e, "d" => self.d, "g" => self.g, "l" => self.l,
            "m" => self.m, "D" => self.entities_clicked, "Dc" => self.entities_candidate,
            "lambda1" => self.lambda1, "lambda2" => self.lambda2, "text_heads" => self.text_heads,
            "positional" => self.positional, "dropout" => self.dropout,
            "alpha_mode" => self.alpha_mode, "eq_mode" => self.eq_mode,
            "finetune_entities" => self.finetune_entities,
            "use_word" => self.flags.use_word, "use_entity" => self.flags.use_entity,
            "use_news" => self.flags.use_news, "aware_word" => self.flags.aware_word,
            "aware_entity" => self.flags.aware_entity, "aware_news" => self.flags.aware_news,
        );
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let f = self.flags;
        let vals: [String; 24] = [
            self.vocab_size.to_string(), self.entity_rows.to_string(), self.d_w.to_string(),
            self.d_e.to_string(), self.d.to_string(), self.g.to_string(), self.l.to_string(),
            self.m.to_string(), self.entities_clicked.to_string(), self.entities_candidate.to_string(),
            self.lambda1.to_string(), self.lambda2.to_string(), self.text_heads.to_string(),
            self.positional.to_string(), self.dropout.to_string(), self.alpha_mode.to_string(),
            self.eq_mode.to_string(), self.finetune_entities.to_string(), f.use_word.to_string(),
            f.use_entity.to_string(), f.use_news.to_string(), f.aware_word.to_string(),
            f.aware_entity.to_string(), f.aware_news.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(vals) {
            kv.set(k, v);
        }
        kv
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (k, v) in [
            ("vocab_size", self.vocab_size),
            ("entity_rows", self.entity_rows),
            ("d_w", self.d_w),
            ("d_e", self.d_e),
            ("d", self.d),
            ("g", self.g),
            ("l", self.l),
            ("m", self.m),
            ("D", self.entities_clicked),
            ("Dc", self.entities_candidate),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("text_heads", self.text_heads),
        ] {
            if v == 0 {
                return bad(format!("`{k}` must be positive"));
            }
        }
        for (k, h) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("text_heads", self.text_heads)] {
            if self.d_w % h != 0 {
                return bad(format!("`{k}` = {h} does not divide d_w = {}", self.d_w));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let f = self.flags;
        if !(f.use_word || f.use_entity || f.use_news) {
            return bad("at least one interest component must be enabled".into());
        }
        Ok(())
    }
}
