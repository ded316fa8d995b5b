//! The recommender: candidate news encoder, candidate-aware user model and
//! bilinear matching score.
//!
//! Linear maps are stored input-major (`in × out`) and applied to row
//! vectors, so a forward pass is a chain of `x · W` products on a [`Tape`].

mod config;
mod news;
mod user;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub use config::{AblationFlags, AlphaMode, EqMode, ModelConfig, Variant};
pub use news::CandidateVars;
pub use user::{stack_history_tokens, UserContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model setting: {0}")]
    Config(String),
    #[error("empty user history")]
    EmptyHistory,
    #[error("degenerate normalization: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Token ids per genre (unpadded, at most `l` each) and entity table rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NewsInput {
    pub tokens: Vec<Vec<usize>>,
    pub entities: Vec<usize>,
}

/// Inverted dropout driven by an optional generator; without one it is the
/// identity (evaluation mode).
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply<S: Scalar>(&mut self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(r) if self.p > 0.0 => Ok(tape.dropout(x, self.p, true, r)?),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let b = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-b..b)).collect();
        self.put(name, vec![rows, cols], data)
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, x: f64) -> Result<()> {
        self.put(name, vec![rows, cols], vec![x; rows * cols])
    }

    fn put(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.store.add(name, Tensor::new(shape, data)?.trainable())?;
        Ok(())
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.xavier(&format!("{name}.w"), rows, cols)?;
        self.fill(&format!("{name}.b"), 1, cols, 0.0)
    }
}

impl<S: Scalar> Model<S> {
    /// Randomly initialized parameters for `config`; all randomness comes
    /// from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut it = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (dw, de) = (c.d_w, c.d_e);
        let words = (0..c.vocab_size * dw).map(|_| it.rng.random_range(-0.1..0.1)).collect();
        it.put("word_emb", vec![c.vocab_size, dw], words)?;
        let mut ent: Vec<f64> = (0..c.entity_rows * de).map(|_| it.rng.random_range(-0.1..0.1)).collect();
        ent[..de].iter_mut().for_each(|x| *x = 0.0);
        it.put("entity_emb", vec![c.entity_rows, de], ent)?;
        if c.positional {
            it.xavier("text.pos", c.l, dw)?;
        }
        for gi in 0..c.g {
            let p = format!("text.{gi}");
            for w in ["wq", "wk", "wv", "wo"] {
                it.xavier(&format!("{p}.{w}"), dw, dw)?;
            }
            it.fill(&format!("{p}.ln1.gamma"), 1, dw, 1.0)?;
            it.fill(&format!("{p}.ln1.beta"), 1, dw, 0.0)?;
            it.linear(&format!("{p}.ffn1"), dw, dw)?;
            it.linear(&format!("{p}.ffn2"), dw, dw)?;
            it.fill(&format!("{p}.ln2.gamma"), 1, dw, 1.0)?;
            it.fill(&format!("{p}.ln2.beta"), 1, dw, 0.0)?;
        }
        it.xavier("text.pool.w", dw, 1)?;
        it.fill("text.pool.b", c.l, 1, 0.0)?;
        it.linear("text.mlp1", c.g * dw, dw)?;
        it.linear("text.mlp2", dw, dw)?;
        it.linear("cand_ent.mlp1", c.entities_candidate * de, de)?;
        it.linear("cand_ent.mlp2", de, de)?;

        let f = c.flags;
        if f.use_word {
            it.xavier("word.wq", 2 * dw + de, dw)?;
            it.xavier("word.wk", dw, dw)?;
            it.xavier("word.wv", dw, dw)?;
            let hd = dw / c.lambda2;
            for h in 0..c.lambda2 {
                it.xavier(&format!("word.{h}.att_q"), hd, 1)?;
                it.xavier(&format!("word.{h}.att_k"), hd, 1)?;
                it.xavier(&format!("word.{h}.w2"), hd, hd)?;
            }
            it.xavier("word.pool.w", dw, 1)?;
            it.fill("word.pool.b", c.history_tokens(), 1, 0.0)?;
        }
        if f.use_entity {
            it.linear("ent.mlp1", c.m * c.entities_clicked * de, de)?;
            it.linear("ent.mlp2", de, de)?;
        }
        if f.use_news {
            it.xavier("news.wq", 2 * dw + de, dw)?;
            it.xavier("news.wk", dw, dw)?;
            it.xavier("news.wv", dw, dw)?;
            it.linear("news.ffn1", dw, dw)?;
            it.linear("news.ffn2", dw, dw)?;
            it.xavier("news.pool.w", dw, 1)?;
            it.fill("news.pool.b", c.m, 1, 0.0)?;
        }
        it.xavier("match.wu", c.user_width(), c.d)?;
        it.xavier("match.wc", c.news_width(), c.d)?;

        let mut params = ParamStore::new();
        for (_, name, t) in store.iter() {
            let data = t.data().iter().map(|&x| S::lit(x)).collect();
            params.add(name, Tensor::new(t.shape().to_vec(), data)?.trainable())?;
        }
        let ent = params.id("entity_emb").expect("entity table");
        params.get_mut(ent).set_requires_grad(config.finetune_entities);
        Ok(Self { config, params })
    }

    /// Overwrites entity table rows; row 0 stays the zero padding row.
    pub fn set_entity_rows<'a>(&mut self, rows: impl IntoIterator<Item = (usize, &'a [S])>) -> Result<()> {
        self.set_rows("entity_emb", rows)
    }

    pub fn set_word_rows<'a>(&mut self, rows: impl IntoIterator<Item = (usize, &'a [S])>) -> Result<()> {
        self.set_rows("word_emb", rows)
    }

    fn set_rows<'a>(&mut self, name: &str, rows: impl IntoIterator<Item = (usize, &'a [S])>) -> Result<()> {
        let id = self.params.id(name).expect("embedding table");
        let t = self.params.get_mut(id);
        let (n, w) = (t.shape()[0], t.shape()[1]);
        let data = t.data_mut();
        for (r, v) in rows {
            if r >= n || v.len() != w || (name == "entity_emb" && r == 0) {
                return Err(ModelError::Config(format!(
                    "{name}: cannot set row {r} with {} values (table {n}×{w})",
                    v.len()
                )));
            }
            data[r * w..(r + 1) * w].copy_from_slice(v);
        }
        Ok(())
    }

    pub(crate) fn p(&self, tape: &mut Tape<'_, S>, name: &str) -> Result<Var> {
        let id = tape
            .store()
            .id(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter block `{name}`")))?;
        Ok(tape.param(id))
    }

    /// `x · W + b` with the block pair `{name}.w`, `{name}.b`.
    pub(crate) fn affine(&self, tape: &mut Tape<'_, S>, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Row vector of zeros or ones.
    pub(crate) fn zeros(tape: &mut Tape<'_, S>, rows: usize, cols: usize) -> Result<Var> {
        Ok(tape.constant(&[rows, cols], vec![S::zero(); rows * cols])?)
    }

    /// `ŷ = (u · W_u) · (n · W_c)`.
    pub fn score(&self, tape: &mut Tape<'_, S>, u: Var, n: Var) -> Result<Var> {
        let wu = self.p(tape, "match.wu")?;
        let wc = self.p(tape, "match.wc")?;
        let a = tape.matmul(u, wu)?;
        let b = tape.matmul(n, wc)?;
        let prod = tape.mul(a, b)?;
        Ok(tape.sum(prod)?)
    }

    /// Scores each candidate against the history; the user vector is reused
    /// across candidates when no stage conditions on the candidate.
    pub fn score_candidates(
        &self,
        tape: &mut Tape<'_, S>,
        history: &[&NewsInput],
        candidates: &[&NewsInput],
        drop: &mut Dropout<'_>,
    ) -> Result<Vec<Var>> {
        let ctx = self.user_context(tape, history, drop)?;
        let mut shared = None;
        let mut out = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let c = self.encode_candidate(tape, cand, &ctx, drop)?;
            let u = match shared {
                Some(u) => u,
                None => {
                    let u = self.user_interest(tape, &ctx, &c, drop)?;
                    if !self.config.flags.any_aware() {
                        shared = Some(u);
                    }
                    u
                }
            };
            out.push(self.score(tape, u, c.fused)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            entity_rows: 7,
            d_w: 8,
            d_e: 4,
            d: 4,
            g: 2,
            l: 4,
            m: 3,
            entities_clicked: 2,
            entities_candidate: 2,
            lambda1: 2,
            lambda2: 2,
            text_heads: 2,
            positional: true,
            dropout: 0.0,
            ..Default::default()
        }
    }

    pub(crate) fn news(tokens: &[&[usize]], entities: &[usize]) -> NewsInput {
        NewsInput {
            tokens: tokens.iter().map(|t| t.to_vec()).collect(),
            entities: entities.to_vec(),
        }
    }

    #[test]
    fn parameter_blocks_follow_ablation() {
        let full = Model::<f64>::new(toy_config(), 1).unwrap();
        let mut c = toy_config();
        c.flags = Variant::W.flags();
        let no_word = Model::<f64>::new(c, 1).unwrap();
        assert!(full.params.id("word.wq").is_some());
        assert!(no_word.params.id("word.wq").is_none());
        let wu = no_word.params.id("match.wu").unwrap();
        assert_eq!(no_word.params.get(wu).shape(), &[8 + 4, 4]);
    }

    #[test]
    fn entity_table_is_frozen_by_default() {
        let m = Model::<f64>::new(toy_config(), 1).unwrap();
        let id = m.params.id("entity_emb").unwrap();
        assert!(!m.params.get(id).requires_grad());
        assert!(m.params.get(id).data()[..4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::new(toy_config(), 5).unwrap();
        let b = Model::<f64>::new(toy_config(), 5).unwrap();
        for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn doubling_user_projection_doubles_score() {
        let mut m = Model::<f64>::new(toy_config(), 2).unwrap();
        let u = vec![0.3; m.config.user_width()];
        let n = vec![-0.2; m.config.news_width()];
        let eval = |m: &Model<f64>| {
            let mut tape = Tape::new(&m.params);
            let uv = tape.constant(&[1, u.len()], u.clone()).unwrap();
            let nv = tape.constant(&[1, n.len()], n.clone()).unwrap();
            let s = m.score(&mut tape, uv, nv).unwrap();
            tape.scalar_value(s)
        };
        let before = eval(&m);
        let id = m.params.id("match.wu").unwrap();
        m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 2.0);
        assert!((eval(&m) - 2.0 * before).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_score_by_hand() {
        let mut c = toy_config();
        c.d = 1;
        let mut m = Model::<f64>::new(c, 0).unwrap();
        let wu = m.params.id("match.wu").unwrap();
        let wc = m.params.id("match.wc").unwrap();
        m.params.get_mut(wu).data_mut().fill(0.5);
        m.params.get_mut(wc).data_mut().fill(2.0);
        let uw = m.config.user_width();
        let nw = m.config.news_width();
        let mut tape = Tape::new(&m.params);
        let u = tape.constant(&[1, uw], vec![1.0; uw]).unwrap();
        let n = tape.constant(&[1, nw], vec![0.5; nw]).unwrap();
        let s = m.score(&mut tape, u, n).unwrap();
        // (0.5 · uw) · (2 · 0.5 · nw)
        assert!((tape.scalar_value(s) - 0.5 * uw as f64 * nw as f64).abs() < 1e-12);
    }
}
