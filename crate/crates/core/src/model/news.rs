use super::{Dropout, Model, ModelError, NewsInput, Result, UserContext};
use crate::data::PAD;
use crate::model::AlphaMode;
use crate::tensor::{Tape, Var};
use crate::Scalar;

/// Candidate representation on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CandidateVars {
    /// Text part, `1 × d_w`.
    pub text: Var,
    /// Entity part, `1 × d_e`.
    pub entity: Var,
    /// `text ⊕ entity`, `1 × (d_w + d_e)`.
    pub fused: Var,
    /// Candidate entity rows `D^c × d_e`, if any.
    pub entities: Option<Var>,
}

impl<S: Scalar> Model<S> {
    /// One transformer block over a genre's token sequence. Returns an
    /// `n × d_w` matrix for `n = tokens.len() ≤ l`; masked keys are excluded
    /// from attention. An all-pad sequence yields zeros.
    pub fn encode_genre_text(
        &self,
        tape: &mut Tape<'_, S>,
        tokens: &[usize],
        mask: &[bool],
        genre: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let n = tokens.len();
        if genre >= c.g || n == 0 || n > c.l || mask.len() != n {
            return Err(ModelError::Config(format!(
                "genre {genre} of {}, {n} tokens (max {}), {} mask flags",
                c.g,
                c.l,
                mask.len()
            )));
        }
        let dw = c.d_w;
        if !mask.iter().any(|&m| m) {
            return Self::zeros(tape, n, dw);
        }
        let table = self.p(tape, "word_emb")?;
        let mut x = tape.gather(table, tokens)?;
        if c.positional {
            let pos = self.p(tape, "text.pos")?;
            let pos = tape.slice_rows(pos, 0, n)?;
            x = tape.add(x, pos)?;
        }
        let x = drop.apply(tape, x)?;

        let pre = format!("text.{genre}");
        let q = self.p(tape, &format!("{pre}.wq"))?;
        let k = self.p(tape, &format!("{pre}.wk"))?;
        let v = self.p(tape, &format!("{pre}.wv"))?;
        let q = tape.matmul(x, q)?;
        let k = tape.matmul(x, k)?;
        let v = tape.matmul(x, v)?;
        let hd = dw / c.text_heads;
        let inv = S::lit(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(c.text_heads);
        for h in 0..c.text_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv)?;
            let a = tape.softmax(s, Some(mask))?;
            heads.push(tape.matmul(a, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        let wo = self.p(tape, &format!("{pre}.wo"))?;
        let o = tape.matmul(o, wo)?;
        let o = drop.apply(tape, o)?;
        let h = tape.add(x, o)?;
        let (g1, b1) = (self.p(tape, &format!("{pre}.ln1.gamma"))?, self.p(tape, &format!("{pre}.ln1.beta"))?);
        let h = tape.layer_norm(h, g1, b1, 1e-6)?;
        let f = self.affine(tape, h, &format!("{pre}.ffn1"))?;
        let f = tape.gelu(f)?;
        let f = self.affine(tape, f, &format!("{pre}.ffn2"))?;
        let out = tape.add(h, f)?;
        let (g2, b2) = (self.p(tape, &format!("{pre}.ln2.gamma"))?, self.p(tape, &format!("{pre}.ln2.beta"))?);
        Ok(tape.layer_norm(out, g2, b2, 1e-6)?)
    }

    /// Attention pooling of contextual token rows into one `1 × d_w` vector,
    /// restricted to unmasked positions.
    pub fn pool_genre(&self, tape: &mut Tape<'_, S>, t_hat: Var, mask: &[bool]) -> Result<Var> {
        let n = tape.shape(t_hat)[0];
        let w = self.p(tape, "text.pool.w")?;
        let b = self.p(tape, "text.pool.b")?;
        let b = tape.slice_rows(b, 0, n)?;
        let s = tape.matmul(t_hat, w)?;
        let s = tape.add(s, b)?;
        let s = tape.transpose(s)?;
        let a = tape.softmax(s, Some(mask))?;
        Ok(tape.matmul(a, t_hat)?)
    }

    /// One-hidden-layer MLP from the concatenated genre vectors to `1 × d_w`.
    pub fn fuse_text(&self, tape: &mut Tape<'_, S>, genres: &[Var]) -> Result<Var> {
        if genres.len() != self.config.g {
            return Err(ModelError::Config(format!(
                "{} genre vectors for {} genres",
                genres.len(),
                self.config.g
            )));
        }
        let x = tape.concat_cols(genres)?;
        let h = self.affine(tape, x, "text.mlp1")?;
        let h = tape.tanh(h)?;
        self.affine(tape, h, "text.mlp2")
    }

    /// Text vector `1 × d_w` of one news item.
    pub fn text_vector(&self, tape: &mut Tape<'_, S>, news: &NewsInput, drop: &mut Dropout<'_>) -> Result<Var> {
        let c = &self.config;
        let mut genres = Vec::with_capacity(c.g);
        for gi in 0..c.g {
            let toks = news.tokens.get(gi).map(Vec::as_slice).unwrap_or(&[]);
            let (ids, mask) = pad_tokens(toks, c.l);
            let t = self.encode_genre_text(tape, &ids, &mask, gi, drop)?;
            genres.push(self.pool_genre(tape, t, &mask)?);
        }
        self.fuse_text(tape, &genres)
    }

    /// Per candidate entity, the summed attention it receives from the
    /// clicked entities: `s_i = Σ_j α_ij`, as a `D^c × 1` column.
    ///
    /// `ec` is `D^c × d_e`; `eu` is `D^u × d_e` or `None` when the history has
    /// no entities, in which case every `s_i = 1 / D^c`.
    pub fn candidate_entity_weights(&self, tape: &mut Tape<'_, S>, ec: Var, eu: Option<Var>) -> Result<Var> {
        let dc = tape.shape(ec)[0];
        let Some(eu) = eu else {
            return Ok(tape.constant(&[dc, 1], vec![S::lit(1.0 / dc as f64); dc])?);
        };
        let eut = tape.transpose(eu)?;
        // D^c × D^u dot products; normalize down each column
        let dots = tape.matmul(ec, eut)?;
        let alpha = match self.config.alpha_mode {
            AlphaMode::Softmax => {
                let t = tape.transpose(dots)?;
                let a = tape.softmax(t, None)?;
                tape.transpose(a)?
            }
            AlphaMode::Literal => {
                let ones = tape.constant(&[1, dc], vec![S::one(); dc])?;
                let den = tape.matmul(ones, dots)?;
                if let Some(j) = tape.value(den).iter().position(|&x| x == S::zero()) {
                    return Err(ModelError::Degenerate(format!(
                        "candidate entity relevance sums to zero for clicked entity {j}"
                    )));
                }
                tape.div(dots, den)?
            }
        };
        Ok(tape.sum_last(alpha)?)
    }

    /// Entity part `1 × d_e` of the candidate: each candidate entity rescaled
    /// by its clicked-entity relevance, flattened entity-major (zero padded to
    /// the entity cap) and passed through an MLP.
    pub fn candidate_entity_attention(
        &self,
        tape: &mut Tape<'_, S>,
        ec: Option<Var>,
        eu: Option<Var>,
    ) -> Result<Var> {
        let c = &self.config;
        let de = c.d_e;
        let cap = c.entities_candidate;
        let mut parts = Vec::with_capacity(2);
        let mut used = 0;
        if let Some(ec) = ec {
            used = tape.shape(ec)[0];
            let s = self.candidate_entity_weights(tape, ec, eu)?;
            parts.push(tape.mul(ec, s)?);
        }
        if used < cap {
            parts.push(Self::zeros(tape, cap - used, de)?);
        }
        let e_hat = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let flat = tape.reshape(e_hat, &[1, cap * de])?;
        let h = self.affine(tape, flat, "cand_ent.mlp1")?;
        let h = tape.tanh(h)?;
        self.affine(tape, h, "cand_ent.mlp2")
    }

    /// Entity rows `k × d_e` (after dropout) for up to `cap` entities.
    pub(crate) fn entity_rows(
        &self,
        tape: &mut Tape<'_, S>,
        ids: &[usize],
        cap: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Option<Var>> {
        let ids = &ids[..ids.len().min(cap)];
        if ids.is_empty() {
            return Ok(None);
        }
        let table = self.p(tape, "entity_emb")?;
        let e = tape.gather(table, ids)?;
        Ok(Some(drop.apply(tape, e)?))
    }

    /// Full candidate representation, guided by the clicked entities held in
    /// `ctx`.
    pub fn encode_candidate(
        &self,
        tape: &mut Tape<'_, S>,
        news: &NewsInput,
        ctx: &UserContext,
        drop: &mut Dropout<'_>,
    ) -> Result<CandidateVars> {
        let text = self.text_vector(tape, news, drop)?;
        let ec = self.entity_rows(tape, &news.entities, self.config.entities_candidate, drop)?;
        let entity = self.candidate_entity_attention(tape, ec, ctx.clicked_entities)?;
        let fused = tape.concat_cols(&[text, entity])?;
        Ok(CandidateVars {
            text,
            entity,
            fused,
            entities: ec,
        })
    }
}

/// Pads (or truncates) to `l`; an empty sequence becomes a single pad.
pub(crate) fn pad_tokens(tokens: &[usize], l: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids: Vec<usize> = tokens.iter().copied().take(l).collect();
    let real = ids.len();
    ids.resize(l, PAD);
    let mut mask = vec![true; real];
    mask.resize(l, false);
    (ids, mask)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{news, toy_config};
    use super::*;
    use crate::tensor::Tape;

    fn model(positional: bool) -> Model<f64> {
        let mut c = toy_config();
        c.positional = positional;
        Model::new(c, 3).unwrap()
    }

    #[test]
    fn genre_output_shape() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        let t = m
            .encode_genre_text(&mut tape, &[3, 4, 0, 0], &[true, true, false, false], 1, &mut Dropout::off())
            .unwrap();
        assert_eq!(tape.shape(t), &[4, 8]);
    }

    #[test]
    fn permuting_tokens_permutes_rows_without_positions() {
        let m = model(false);
        let mut tape = Tape::new(&m.params);
        let mask = [true, true, true, false];
        let a = m.encode_genre_text(&mut tape, &[3, 5, 7, 0], &mask, 0, &mut Dropout::off()).unwrap();
        let b = m.encode_genre_text(&mut tape, &[7, 3, 5, 0], &mask, 0, &mut Dropout::off()).unwrap();
        let (a, b) = (tape.value(a).to_vec(), tape.value(b).to_vec());
        let row = |v: &[f64], i: usize| v[i * 8..(i + 1) * 8].to_vec();
        for (ia, ib) in [(0, 1), (1, 2), (2, 0)] {
            for (x, y) in row(&a, ia).iter().zip(row(&b, ib)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extra_padding_leaves_real_rows_unchanged() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        let a = m.encode_genre_text(&mut tape, &[3, 5], &[true, true], 0, &mut Dropout::off()).unwrap();
        let b = m
            .encode_genre_text(&mut tape, &[3, 5, 0, 0], &[true, true, false, false], 0, &mut Dropout::off())
            .unwrap();
        let (a, b) = (tape.value(a).to_vec(), tape.value(b).to_vec());
        for (x, y) in a.iter().zip(&b[..16]) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn all_pad_sequence_is_zero() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        let t = m
            .encode_genre_text(&mut tape, &[0, 0, 0, 0], &[false; 4], 0, &mut Dropout::off())
            .unwrap();
        assert!(tape.value(t).iter().all(|&x| x == 0.0));
        let p = m.pool_genre(&mut tape, t, &[false; 4]).unwrap();
        assert!(tape.value(p).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pooling_single_real_token_returns_its_row() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        let rows: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let t = tape.constant(&[4, 8], rows.clone()).unwrap();
        let p = m.pool_genre(&mut tape, t, &[false, false, true, false]).unwrap();
        assert_eq!(tape.value(p), &rows[16..24]);
    }

    #[test]
    fn pooling_identical_rows_returns_the_row() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        let row: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let t = tape.constant(&[4, 8], row.repeat(4)).unwrap();
        let p = m.pool_genre(&mut tape, t, &[true; 4]).unwrap();
        for (x, y) in tape.value(p).iter().zip(&row) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_two_tokens_by_hand() {
        let mut m = model(true);
        let w = m.params.id("text.pool.w").unwrap();
        let b = m.params.id("text.pool.b").unwrap();
        m.params.get_mut(w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        m.params.get_mut(b).data_mut().copy_from_slice(&[0.0, 2f64.ln(), 0.0, 0.0]);
        let mut rows = vec![0.0; 16];
        rows[0] = 0.0;
        rows[1] = 3.0;
        rows[8] = 0.0;
        rows[9] = 6.0;
        let mut tape = Tape::new(&m.params);
        let t = tape.constant(&[2, 8], rows).unwrap();
        let p = m.pool_genre(&mut tape, t, &[true, true]).unwrap();
        // scores (0, ln 2) -> weights (1/3, 2/3)
        assert!((tape.value(p)[1] - (3.0 / 3.0 + 6.0 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fuse_text_one_dimensional_by_hand() {
        let mut c = toy_config();
        c.d_w = 1;
        c.g = 1;
        c.text_heads = 1;
        c.lambda1 = 1;
        c.lambda2 = 1;
        let mut m = Model::<f64>::new(c, 0).unwrap();
        for (name, v) in [("text.mlp1.w", 2.0), ("text.mlp1.b", 0.5), ("text.mlp2.w", -3.0), ("text.mlp2.b", 1.0)] {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).data_mut()[0] = v;
        }
        let mut tape = Tape::new(&m.params);
        let x = tape.constant(&[1, 1], vec![0.25]).unwrap();
        let y = m.fuse_text(&mut tape, &[x]).unwrap();
        assert!((tape.scalar_value(y) - (-3.0 * (1.0f64).tanh() + 1.0)).abs() < 1e-12);
        assert_eq!(tape.shape(y), &[1, 1]);
    }

    #[test]
    fn candidate_weights_examples() {
        let m = model(true);
        let mut tape = Tape::new(&m.params);
        // single candidate entity: α = 1 for every clicked entity
        let ec = tape.constant(&[1, 4], vec![1.0, 2.0, 0.0, -1.0]).unwrap();
        let eu = tape.constant(&[3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let s = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap();
        assert_eq!(tape.value(s), &[3.0]);
        // equal dot products: uniform 1/D^c per clicked entity
        let ec = tape.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let eu = tape.constant(&[1, 4], vec![0.7, 0.0, 0.0, 0.0]).unwrap();
        let s = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        // dots (ln 2, 0) -> (2/3, 1/3)
        let ec = tape.constant(&[2, 4], vec![2f64.ln(), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let eu = tape.constant(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap();
        assert!((tape.value(s)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(s)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn literal_alpha_rejects_zero_denominator() {
        let mut c = toy_config();
        c.alpha_mode = AlphaMode::Literal;
        let m = Model::<f64>::new(c, 0).unwrap();
        let mut tape = Tape::new(&m.params);
        let ec = tape.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let eu = tape.constant(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap_err();
        assert!(matches!(err, ModelError::Degenerate(_)));
        let ec = tape.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap();
        assert_eq!(tape.value(s), &[0.25, 0.75]);
    }

    #[test]
    fn rescaled_entities_stay_colinear() {
        for mode in [AlphaMode::Softmax, AlphaMode::Literal] {
            let mut c = toy_config();
            c.alpha_mode = mode;
            let m = Model::<f64>::new(c, 0).unwrap();
            let mut tape = Tape::new(&m.params);
            let ecv = vec![0.5, 0.2, -0.1, 0.3, 0.4, 0.4, 0.1, 0.0];
            let ec = tape.constant(&[2, 4], ecv.clone()).unwrap();
            let eu = tape.constant(&[2, 4], vec![0.3, 0.1, 0.2, 0.5, 0.6, 0.1, 0.1, 0.2]).unwrap();
            let s = m.candidate_entity_weights(&mut tape, ec, Some(eu)).unwrap();
            let scaled = tape.mul(ec, s).unwrap();
            for (row, orig) in tape.value(scaled).chunks(4).zip(ecv.chunks(4)) {
                let k = row[0] / orig[0];
                for (a, b) in row.iter().zip(orig) {
                    assert!((a - k * b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn candidate_width_and_repeatability() {
        let m = model(true);
        let hist = [news(&[&[2, 3], &[4]], &[1, 2])];
        let cand = news(&[&[5, 6, 7], &[8]], &[3]);
        let refs: Vec<&NewsInput> = hist.iter().collect();
        let run = || {
            let mut tape = Tape::new(&m.params);
            let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
            let c = m.encode_candidate(&mut tape, &cand, &ctx, &mut Dropout::off()).unwrap();
            assert_eq!(tape.shape(c.fused), &[1, 12]);
            assert_eq!(&tape.value(c.fused)[..8], tape.value(c.text));
            tape.value(c.fused).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_entity_table_leaves_only_bias_path() {
        let mut m = model(true);
        let id = m.params.id("entity_emb").unwrap();
        m.params.get_mut(id).data_mut().fill(0.0);
        let mut tape = Tape::new(&m.params);
        let ec = m.entity_rows(&mut tape, &[1, 2], 2, &mut Dropout::off()).unwrap();
        let eu = m.entity_rows(&mut tape, &[3], 2, &mut Dropout::off()).unwrap();
        let e = m.candidate_entity_attention(&mut tape, ec, eu).unwrap();
        let b1 = m.params.get(m.params.id("cand_ent.mlp1.b").unwrap()).data().to_vec();
        let w2 = m.params.get(m.params.id("cand_ent.mlp2.w").unwrap()).data().to_vec();
        let b2 = m.params.get(m.params.id("cand_ent.mlp2.b").unwrap()).data().to_vec();
        for j in 0..4 {
            let want: f64 = (0..4).map(|i| b1[i].tanh() * w2[i * 4 + j]).sum::<f64>() + b2[j];
            assert!((tape.value(e)[j] - want).abs() < 1e-12);
        }
    }
}
