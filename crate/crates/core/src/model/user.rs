use super::news::pad_tokens;
use super::{CandidateVars, Dropout, EqMode, Model, ModelError, NewsInput, Result};
use crate::tensor::{Tape, Var};
use crate::Scalar;

/// Candidate-independent part of the user model, computed once per history
/// and shared by every candidate scored against it.
#[derive(Clone, Debug)]
pub struct UserContext {
    /// Real clicked-news slots among the `m`.
    pub history_mask: Vec<bool>,
    /// Real token positions of the stacked history sequence.
    pub token_mask: Vec<bool>,
    /// Real entity slots among the `m · D`.
    pub entity_mask: Vec<bool>,
    /// Clicked-news text vectors, `m × d_w` (pad rows zero).
    pub content: Option<Var>,
    /// Clicked entities, `m·D × d_e` (pad rows zero).
    pub entity_slots: Var,
    /// Real clicked entities only, `D^u × d_e`.
    pub clicked_entities: Option<Var>,
    word: Option<[Var; 3]>,
    news: Option<[Var; 3]>,
}

/// Stacks the history token ids news-major, then genre, then position,
/// padding each genre to `l` and missing news items to `m`. Returns the
/// `m·g·l` ids and their mask.
pub fn stack_history_tokens(history: &[&NewsInput], m: usize, g: usize, l: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::with_capacity(m * g * l);
    let mut mask = Vec::with_capacity(m * g * l);
    for i in 0..m {
        for gi in 0..g {
            let toks = history
                .get(i)
                .and_then(|n| n.tokens.get(gi))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let (t, k) = pad_tokens(toks, l);
            ids.extend(t);
            mask.extend(k);
        }
    }
    (ids, mask)
}

impl<S: Scalar> Model<S> {
    /// Keeps the `m` most recent items (history is most-recent-last).
    fn recent<'a, 'b>(&self, history: &'b [&'a NewsInput]) -> &'b [&'a NewsInput] {
        &history[history.len().saturating_sub(self.config.m)..]
    }

    /// Query rows split as `[history part ; candidate part]`.
    fn split_query(&self, tape: &mut Tape<'_, S>, name: &str) -> Result<(Var, Var)> {
        let w = self.p(tape, name)?;
        let dw = self.config.d_w;
        let own = tape.slice_rows(w, 0, dw)?;
        let cand = tape.slice_rows(w, dw, dw + self.config.d_e)?;
        Ok((own, cand))
    }

    fn project3(&self, tape: &mut Tape<'_, S>, x: Var, stage: &str) -> Result<[Var; 3]> {
        let (wq, _) = self.split_query(tape, &format!("{stage}.wq"))?;
        let wk = self.p(tape, &format!("{stage}.wk"))?;
        let wv = self.p(tape, &format!("{stage}.wv"))?;
        Ok([tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?])
    }

    /// Adds the candidate block of the query projection when the stage is
    /// candidate-aware; otherwise the candidate block contributes nothing.
    fn conditioned_query(&self, tape: &mut Tape<'_, S>, q: Var, stage: &str, cand: Option<Var>) -> Result<Var> {
        match cand {
            Some(n) => {
                let (_, wc) = self.split_query(tape, &format!("{stage}.wq"))?;
                let cq = tape.matmul(n, wc)?;
                Ok(tape.add(q, cq)?)
            }
            None => Ok(q),
        }
    }

    pub fn user_context(
        &self,
        tape: &mut Tape<'_, S>,
        history: &[&NewsInput],
        drop: &mut Dropout<'_>,
    ) -> Result<UserContext> {
        let c = &self.config;
        let history = self.recent(history);
        if history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        let mut history_mask = vec![true; history.len()];
        history_mask.resize(c.m, false);

        let (tokens, token_mask) = stack_history_tokens(history, c.m, c.g, c.l);
        let word = if c.flags.use_word {
            let table = self.p(tape, "word_emb")?;
            let g = tape.gather(table, &tokens)?;
            let g = drop.apply(tape, g)?;
            Some(self.project3(tape, g, "word")?)
        } else {
            None
        };

        let dn = c.entities_clicked;
        let mut slots = vec![0; c.m * dn];
        let mut entity_mask = vec![false; c.m * dn];
        for (i, n) in history.iter().enumerate() {
            for (j, &e) in n.entities.iter().take(dn).enumerate() {
                slots[i * dn + j] = e;
                entity_mask[i * dn + j] = true;
            }
        }
        let table = self.p(tape, "entity_emb")?;
        let e = tape.gather(table, &slots)?;
        let e = drop.apply(tape, e)?;
        let keep = entity_mask.iter().map(|&k| if k { S::one() } else { S::zero() }).collect();
        let keep = tape.constant(&[slots.len(), 1], keep)?;
        let entity_slots = tape.mul(e, keep)?;
        let real: Vec<usize> = (0..slots.len()).filter(|&i| entity_mask[i]).collect();
        let clicked_entities = if real.is_empty() {
            None
        } else {
            Some(tape.gather(entity_slots, &real)?)
        };

        let (content, news) = if c.flags.use_news {
            let mut rows = Vec::with_capacity(c.m);
            for n in history {
                rows.push(self.text_vector(tape, n, drop)?);
            }
            if history.len() < c.m {
                rows.push(Self::zeros(tape, c.m - history.len(), c.d_w)?);
            }
            let content = tape.concat_rows(&rows)?;
            (Some(content), Some(self.project3(tape, content, "news")?))
        } else {
            (None, None)
        };

        Ok(UserContext {
            history_mask,
            token_mask,
            entity_mask,
            content,
            entity_slots,
            clicked_entities,
            word,
            news,
        })
    }

    /// Additive attention pooling `1 × k` of the rows of `x` (`L × k`) with a
    /// learned score vector, masked.
    fn additive_pool(&self, tape: &mut Tape<'_, S>, x: Var, w: Var, mask: &[bool]) -> Result<Var> {
        let k = tape.shape(x)[1];
        let s = tape.matmul(x, w)?;
        let s = tape.scale(s, S::lit(1.0 / (k as f64).sqrt()))?;
        let s = tape.transpose(s)?;
        let a = tape.softmax(s, Some(mask))?;
        Ok(tape.matmul(a, x)?)
    }

    /// `softmax(X · w + b) · X` over unmasked rows.
    fn bias_pool(&self, tape: &mut Tape<'_, S>, x: Var, stage: &str, mask: &[bool]) -> Result<Var> {
        let w = self.p(tape, &format!("{stage}.pool.w"))?;
        let b = self.p(tape, &format!("{stage}.pool.b"))?;
        let s = tape.matmul(x, w)?;
        let s = tape.add(s, b)?;
        let s = tape.transpose(s)?;
        let a = tape.softmax(s, Some(mask))?;
        Ok(tape.matmul(a, x)?)
    }

    /// Word-level interest `1 × d_w`: additive-attention (linear in the
    /// sequence length) over the stacked history tokens with queries
    /// conditioned on `cand` (the fused candidate vector) when given.
    pub fn word_level_interest(
        &self,
        tape: &mut Tape<'_, S>,
        ctx: &UserContext,
        cand: Option<Var>,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let [q0, k, v] = ctx
            .word
            .ok_or_else(|| ModelError::Config("word-level stage is disabled".into()))?;
        if !ctx.token_mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyHistory);
        }
        let cand = cand.filter(|_| c.flags.aware_word);
        let q = self.conditioned_query(tape, q0, "word", cand)?;
        let hd = c.d_w / c.lambda2;
        let mut heads = Vec::with_capacity(c.lambda2);
        for h in 0..c.lambda2 {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let wq = self.p(tape, &format!("word.{h}.att_q"))?;
            let gq = self.additive_pool(tape, qh, wq, &ctx.token_mask)?;
            let p = tape.mul(kh, gq)?;
            let wk = self.p(tape, &format!("word.{h}.att_k"))?;
            let gk = self.additive_pool(tape, p, wk, &ctx.token_mask)?;
            let u = tape.mul(vh, gk)?;
            let w2 = self.p(tape, &format!("word.{h}.w2"))?;
            heads.push(tape.matmul(u, w2)?);
        }
        let g_bar = tape.concat_cols(&heads)?;
        let g_bar = drop.apply(tape, g_bar)?;
        self.bias_pool(tape, g_bar, "word", &ctx.token_mask)
    }

    /// Per clicked-entity slot, the scale applied to its vector: a column
    /// `m·D × 1`. `ec` holds the candidate entity rows.
    pub fn clicked_entity_scales(&self, tape: &mut Tape<'_, S>, ctx: &UserContext, ec: Var) -> Result<Var> {
        let c = &self.config;
        let slots = ctx.entity_slots;
        let n = slots_len(ctx);
        let dc = tape.shape(ec)[0];
        let ect = tape.transpose(ec)?;
        let a = tape.matmul(slots, ect)?;
        match c.eq_mode {
            EqMode::Literal => {
                // Σ_k exp(A_jk) / Σ_k exp(A_jk), shifted by the row max
                let shift: Vec<S> = tape
                    .value(a)
                    .chunks(dc)
                    .map(|r| r.iter().copied().fold(S::neg_infinity(), S::max))
                    .collect();
                let shift = tape.constant(&[n, 1], shift)?;
                let z = tape.sub(a, shift)?;
                let z = tape.exp(z)?;
                let s = tape.sum_last(z)?;
                Ok(tape.div(s, s)?)
            }
            EqMode::Corrected => {
                let dn = c.entities_clicked;
                let at = tape.transpose(a)?;
                let at = tape.reshape(at, &[dc * c.m, dn])?;
                let mask: Vec<bool> = (0..dc).flat_map(|_| ctx.entity_mask.iter().copied()).collect();
                let b = tape.softmax(at, Some(&mask))?;
                let b = tape.reshape(b, &[dc, n])?;
                let ones = tape.constant(&[1, dc], vec![S::one(); dc])?;
                let s = tape.matmul(ones, b)?;
                Ok(tape.transpose(s)?)
            }
        }
    }

    /// Entity-level interest `1 × d_e`: clicked entities rescaled by their
    /// relevance to the candidate entities `ec`, flattened and passed through
    /// an MLP. Without candidate entities (or when the stage is not
    /// candidate-aware) the raw clicked entities are used.
    pub fn entity_level_interest(&self, tape: &mut Tape<'_, S>, ctx: &UserContext, ec: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let slots = ctx.entity_slots;
        let weighted = match ec.filter(|_| c.flags.aware_entity) {
            Some(ec) => {
                let s = self.clicked_entity_scales(tape, ctx, ec)?;
                tape.mul(slots, s)?
            }
            None => slots,
        };
        let flat = tape.reshape(weighted, &[1, slots_len(ctx) * c.d_e])?;
        let h = self.affine(tape, flat, "ent.mlp1")?;
        let h = tape.tanh(h)?;
        self.affine(tape, h, "ent.mlp2")
    }

    /// Multi-head attention over clicked-news vectors, heads concatenated:
    /// `m × d_w`, before the feed-forward block.
    pub fn news_self_attention(&self, tape: &mut Tape<'_, S>, ctx: &UserContext, cand: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let [q0, k, v] = ctx
            .news
            .ok_or_else(|| ModelError::Config("news-level stage is disabled".into()))?;
        if !ctx.history_mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyHistory);
        }
        let cand = cand.filter(|_| c.flags.aware_news);
        let q = self.conditioned_query(tape, q0, "news", cand)?;
        let hd = c.d_w / c.lambda1;
        let mut heads = Vec::with_capacity(c.lambda1);
        for h in 0..c.lambda1 {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let g = tape.softmax(s, Some(&ctx.history_mask))?;
            heads.push(tape.matmul(g, vh)?);
        }
        Ok(tape.concat_cols(&heads)?)
    }

    /// News-level interest `1 × d_w`.
    pub fn news_level_interest(
        &self,
        tape: &mut Tape<'_, S>,
        ctx: &UserContext,
        cand: Option<Var>,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let f = self.news_self_attention(tape, ctx, cand)?;
        let f = drop.apply(tape, f)?;
        let h = self.affine(tape, f, "news.ffn1")?;
        let h = tape.gelu(h)?;
        let f = self.affine(tape, h, "news.ffn2")?;
        self.bias_pool(tape, f, "news", &ctx.history_mask)
    }

    /// Concatenates the enabled parts in word, entity, news order.
    pub fn fuse_interests(&self, tape: &mut Tape<'_, S>, parts: [Option<Var>; 3]) -> Result<Var> {
        let parts: Vec<Var> = parts.into_iter().flatten().collect();
        match parts.len() {
            0 => Err(ModelError::Config("no interest component enabled".into())),
            1 => Ok(parts[0]),
            _ => Ok(tape.concat_cols(&parts)?),
        }
    }

    /// User interest vector `1 × user_width` for one candidate.
    pub fn user_interest(
        &self,
        tape: &mut Tape<'_, S>,
        ctx: &UserContext,
        cand: &CandidateVars,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let f = self.config.flags;
        let uw = if f.use_word {
            Some(self.word_level_interest(tape, ctx, Some(cand.fused), drop)?)
        } else {
            None
        };
        let ue = if f.use_entity {
            Some(self.entity_level_interest(tape, ctx, cand.entities)?)
        } else {
            None
        };
        let un = if f.use_news {
            Some(self.news_level_interest(tape, ctx, Some(cand.fused), drop)?)
        } else {
            None
        };
        self.fuse_interests(tape, [uw, ue, un])
    }
}

fn slots_len(ctx: &UserContext) -> usize {
    ctx.entity_mask.len()
}

#[cfg(test)]
mod tests {
    use super::super::tests::{news, toy_config};
    use super::*;
    use crate::model::Variant;

    fn hist() -> Vec<NewsInput> {
        vec![news(&[&[2, 3], &[4]], &[1, 2]), news(&[&[5, 6, 7], &[]], &[3])]
    }

    #[test]
    fn stacking_order_and_padding() {
        let h = hist();
        let refs: Vec<&NewsInput> = h.iter().collect();
        let (ids, mask) = stack_history_tokens(&refs, 3, 2, 3);
        assert_eq!(ids.len(), 18);
        assert_eq!(&ids[..6], &[2, 3, 0, 4, 0, 0]);
        assert_eq!(&ids[6..12], &[5, 6, 7, 0, 0, 0]);
        assert!(mask[12..].iter().all(|&m| !m));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
    }

    #[test]
    fn word_stage_respects_candidate_awareness() {
        let h = hist();
        let refs: Vec<&NewsInput> = h.iter().collect();
        for (variant, differ) in [(Variant::Full, true), (Variant::Wc, false)] {
            let mut c = toy_config();
            c.flags = variant.flags();
            let m = Model::<f64>::new(c, 4).unwrap();
            let mut tape = Tape::new(&m.params);
            let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
            let a = tape.constant(&[1, 12], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
            let b = tape.constant(&[1, 12], (0..12).map(|i| 1.0 - i as f64 * 0.2).collect()).unwrap();
            let ua = m.word_level_interest(&mut tape, &ctx, Some(a), &mut Dropout::off()).unwrap();
            let ub = m.word_level_interest(&mut tape, &ctx, Some(b), &mut Dropout::off()).unwrap();
            let dist: f64 = tape.value(ua).iter().zip(tape.value(ub)).map(|(x, y)| (x - y).powi(2)).sum();
            assert_eq!(dist > 0.0, differ, "{variant:?}");
        }
    }

    #[test]
    fn fully_masked_history_errors() {
        let m = Model::<f64>::new(toy_config(), 0).unwrap();
        let h = [news(&[&[], &[]], &[])];
        let refs: Vec<&NewsInput> = h.iter().collect();
        let mut tape = Tape::new(&m.params);
        let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
        let err = m.word_level_interest(&mut tape, &ctx, None, &mut Dropout::off()).unwrap_err();
        assert_eq!(err.to_string(), "empty user history");
        assert!(matches!(m.user_context(&mut tape, &[], &mut Dropout::off()), Err(ModelError::EmptyHistory)));
    }

    #[test]
    fn literal_entity_scales_are_exactly_one() {
        let mut c = toy_config();
        c.eq_mode = EqMode::Literal;
        let m = Model::<f64>::new(c, 1).unwrap();
        let h = hist();
        let refs: Vec<&NewsInput> = h.iter().collect();
        let mut tape = Tape::new(&m.params);
        let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
        let ec = tape.constant(&[2, 4], vec![3.0, -1.0, 0.5, 2.0, 0.1, 0.1, 9.0, -4.0]).unwrap();
        let s = m.clicked_entity_scales(&mut tape, &ctx, ec).unwrap();
        assert!(tape.value(s).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn corrected_scales_favor_matching_entity() {
        let mut c = toy_config();
        c.m = 1;
        let mut m = Model::<f64>::new(c, 1).unwrap();
        let id = m.params.id("entity_emb").unwrap();
        let t = m.params.get_mut(id).data_mut();
        t[4..8].copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        t[8..12].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let h = [news(&[&[2], &[]], &[1, 2])];
        let refs: Vec<&NewsInput> = h.iter().collect();
        let mut tape = Tape::new(&m.params);
        let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
        let ec = tape.constant(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = m.clicked_entity_scales(&mut tape, &ctx, ec).unwrap();
        let s = tape.value(s);
        // dots (0, 2) per candidate entity: each gives (1/(1+e²), e²/(1+e²))
        let e2 = 2f64.exp();
        assert!((s[0] - 2.0 / (1.0 + e2)).abs() < 1e-12);
        assert!((s[1] - 2.0 * e2 / (1.0 + e2)).abs() < 1e-12);
        assert!(s[1] > s[0]);
    }

    #[test]
    fn single_clicked_news_attends_to_itself() {
        let mut c = toy_config();
        c.m = 1;
        let m = Model::<f64>::new(c, 2).unwrap();
        let h = [news(&[&[2, 3], &[4]], &[1])];
        let refs: Vec<&NewsInput> = h.iter().collect();
        let mut tape = Tape::new(&m.params);
        let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
        let cand = tape.constant(&[1, 12], vec![0.3; 12]).unwrap();
        let f = m.news_self_attention(&mut tape, &ctx, Some(cand)).unwrap();
        let wv = m.params.get(m.params.id("news.wv").unwrap()).data().to_vec();
        let d = tape.value(ctx.content.unwrap()).to_vec();
        for j in 0..8 {
            let v: f64 = (0..8).map(|i| d[i] * wv[i * 8 + j]).sum();
            assert!((tape.value(f)[j] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_widths_and_order() {
        let h = hist();
        let refs: Vec<&NewsInput> = h.iter().collect();
        for (v, width) in [(Variant::Full, 20), (Variant::E, 16), (Variant::W, 12)] {
            let mut c = toy_config();
            c.flags = v.flags();
            let m = Model::<f64>::new(c, 0).unwrap();
            let mut tape = Tape::new(&m.params);
            let ctx = m.user_context(&mut tape, &refs, &mut Dropout::off()).unwrap();
            let cand = news(&[&[8], &[9]], &[4]);
            let cv = m.encode_candidate(&mut tape, &cand, &ctx, &mut Dropout::off()).unwrap();
            let u = m.user_interest(&mut tape, &ctx, &cv, &mut Dropout::off()).unwrap();
            assert_eq!(tape.shape(u), &[1, width]);
            if v == Variant::Full {
                let uw = m.word_level_interest(&mut tape, &ctx, Some(cv.fused), &mut Dropout::off()).unwrap();
                assert_eq!(&tape.value(u)[..8], tape.value(uw));
            }
        }
    }
}
