use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KgError, TripleStore};
use crate::data::EntityTable;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TranseConfig {
    pub dim: usize,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TranseConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            margin: 1.0,
            epochs: 50,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Entity and relation vectors indexed like the [`TripleStore`] they were
/// trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbedding<S> {
    pub dim: usize,
    pub entities: Vec<S>,
    pub relations: Vec<S>,
}

impl<S: Scalar> KgEmbedding<S> {
    pub fn entity(&self, e: usize) -> &[S] {
        &self.entities[e * self.dim..(e + 1) * self.dim]
    }

    pub fn relation(&self, r: usize) -> &[S] {
        &self.relations[r * self.dim..(r + 1) * self.dim]
    }

    /// `‖h + r − t‖₂`; lower is more plausible.
    pub fn score(&self, h: usize, r: usize, t: usize) -> S {
        let (hv, rv, tv) = (self.entity(h), self.relation(r), self.entity(t));
        (0..self.dim)
            .map(|i| {
                let d = hv[i] + rv[i] - tv[i];
                d * d
            })
            .sum::<S>()
            .sqrt()
    }

    pub fn to_table(&self, store: &TripleStore) -> EntityTable<S> {
        let mut t = EntityTable::new(self.dim);
        for (i, id) in store.entities().iter().enumerate() {
            t.insert(id, self.entity(i)).expect("dimension matches");
        }
        t
    }
}

fn normalize<S: Scalar>(v: &mut [S]) {
    let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if n > S::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Replaces the head or the tail (equal odds) with a uniformly drawn entity,
/// avoiding known triples when possible.
fn corrupt<R: Rng>(store: &TripleStore, (h, r, t): (usize, usize, usize), head: bool, rng: &mut R) -> (usize, usize, usize) {
    let n = store.entities().len();
    let mut cand = (h, r, t);
    for _ in 0..10 {
        let e = rng.random_range(0..n);
        cand = if head { (e, r, t) } else { (h, r, e) };
        if cand != (h, r, t) && !store.contains(cand.0, cand.1, cand.2) {
            break;
        }
    }
    cand
}

/// Trains TransE with a margin ranking loss by SGD over shuffled triples.
///
/// Entity vectors are L2-normalized after every epoch. Returns the embedding
/// and, per epoch, the mean hinge loss over a fixed set of corruptions drawn
/// once before training.
pub fn transe_train<S: Scalar>(store: &TripleStore, cfg: &TranseConfig) -> Result<(KgEmbedding<S>, Vec<f64>), KgError> {
    if store.is_empty() {
        return Err(KgError::Empty);
    }
    if cfg.margin <= 0.0 || cfg.dim == 0 || cfg.lr <= 0.0 {
        return Err(KgError::Config(format!(
            "margin {}, dim {}, lr {} must all be positive",
            cfg.margin, cfg.dim, cfg.lr
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let bound = 6.0 / (d as f64).sqrt();
    let init = |n: usize, rng: &mut ChaCha8Rng| -> Vec<S> {
        (0..n * d).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
    };
    let mut emb = KgEmbedding {
        dim: d,
        entities: init(store.entities().len(), &mut rng),
        relations: init(store.relations().len(), &mut rng),
    };
    for r in emb.relations.chunks_mut(d) {
        normalize(r);
    }
    for e in emb.entities.chunks_mut(d) {
        normalize(e);
    }

    let lr = S::lit(cfg.lr);
    let margin = S::lit(cfg.margin);
    let mut order: Vec<usize> = (0..store.triples().len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let probe: Vec<_> = store
        .triples()
        .iter()
        .map(|&tr| {
            let head = probe_rng.random::<bool>();
            (tr, corrupt(store, tr, head, &mut probe_rng))
        })
        .collect();
    let mut diff_p = vec![S::zero(); d];
    let mut diff_n = vec![S::zero(); d];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &ti in &order {
            let pos = store.triples()[ti];
            let head = rng.random::<bool>();
            let neg = corrupt(store, pos, head, &mut rng);
            let dist = |(h, r, t): (usize, usize, usize), e: &KgEmbedding<S>, out: &mut [S]| {
                for i in 0..d {
                    out[i] = e.entity(h)[i] + e.relation(r)[i] - e.entity(t)[i];
                }
                out.iter().map(|&x| x * x).sum::<S>().sqrt()
            };
            let dp = dist(pos, &emb, &mut diff_p);
            let dn = dist(neg, &emb, &mut diff_n);
            let loss = margin + dp - dn;
            if loss <= S::zero() {
                continue;
            }
            let tiny = S::lit(1e-12);
            // d‖x‖/dx = x / ‖x‖
            for i in 0..d {
                let gp = diff_p[i] / dp.max(tiny);
                let gn = diff_n[i] / dn.max(tiny);
                emb.entities[pos.0 * d + i] -= lr * gp;
                emb.entities[pos.2 * d + i] += lr * gp;
                emb.relations[pos.1 * d + i] -= lr * (gp - gn);
                emb.entities[neg.0 * d + i] += lr * gn;
                emb.entities[neg.2 * d + i] -= lr * gn;
            }
        }
        for e in emb.entities.chunks_mut(d) {
            normalize(e);
        }
        let total: f64 = probe
            .iter()
            .map(|&(p, n)| {
                let l = margin + emb.score(p.0, p.1, p.2) - emb.score(n.0, n.1, n.2);
                l.max(S::zero()).as_f64()
            })
            .sum();
        history.push(total / probe.len() as f64);
    }
    Ok((emb, history))
}

/// Fraction of triples whose score is strictly below both a head-corrupted
/// and a tail-corrupted counterpart drawn with `seed`.
pub fn corruption_ranking_accuracy<S: Scalar>(emb: &KgEmbedding<S>, store: &TripleStore, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0usize;
    for &tr in store.triples() {
        let s = emb.score(tr.0, tr.1, tr.2);
        let h = corrupt(store, tr, true, &mut rng);
        let t = corrupt(store, tr, false, &mut rng);
        if s < emb.score(h.0, h.1, h.2) && s < emb.score(t.0, t.1, t.2) {
            ok += 1;
        }
    }
    ok as f64 / store.triples().len() as f64
}
