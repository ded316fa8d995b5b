use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KgEmbedding, KgError, TripleStore};
use crate::data::EntityTable;
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GatConfig {
    pub heads: usize,
    pub n_neighbors: usize,
    pub slope: f64,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            n_neighbors: 10,
            slope: 0.2,
            epochs: 3,
            lr: 1e-3,
            margin: 1.0,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Head {
    proj: ParamId,
    a_self: ParamId,
    a_nb: ParamId,
}

/// Attention parameters for each head: a `d×d` projection and a split
/// scoring vector applied to `[proj(self) ; proj(neighbor)]`.
#[derive(Clone, Debug)]
pub struct GatParams<S> {
    pub store: ParamStore<S>,
    heads: Vec<Head>,
    dim: usize,
    slope: f64,
}

impl<S: Scalar> GatParams<S> {
    pub fn init(dim: usize, heads: usize, slope: f64, seed: u64) -> Result<Self, KgError> {
        if dim == 0 || heads == 0 {
            return Err(KgError::Config(format!("dim {dim} and heads {heads} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut hs = Vec::with_capacity(heads);
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        let uniform = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data).map(Tensor::trainable)
        };
        for h in 0..heads {
            let proj = store.add(format!("gat.{h}.proj"), uniform(vec![dim, dim], &mut rng)?)?;
            let a_self = store.add(format!("gat.{h}.a_self"), uniform(vec![dim, 1], &mut rng)?)?;
            let a_nb = store.add(format!("gat.{h}.a_nb"), uniform(vec![dim, 1], &mut rng)?)?;
            hs.push(Head { proj, a_self, a_nb });
        }
        Ok(Self {
            store,
            heads: hs,
            dim,
            slope,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    /// `a · (x P)` for a row vector `x`.
    fn project_score(&self, x: &[S], proj: ParamId, a: ParamId) -> S {
        let p = self.store.get(proj).data();
        let a = self.store.get(a).data();
        let d = self.dim;
        let mut s = S::zero();
        for j in 0..d {
            let mut z = S::zero();
            for i in 0..d {
                z += x[i] * p[i * d + j];
            }
            s += z * a[j];
        }
        s
    }

    /// Enriched vector and head-averaged attention weights for one entity.
    fn aggregate_rows(&self, me: &[S], neighbors: &[&[S]]) -> (Vec<S>, Vec<S>) {
        if neighbors.is_empty() {
            return (me.to_vec(), Vec::new());
        }
        let slope = S::lit(self.slope);
        let k = neighbors.len();
        let nh = S::lit(self.heads.len() as f64);
        let mut summary = vec![S::zero(); self.dim];
        let mut weights = vec![S::zero(); k];
        for h in &self.heads {
            let own = self.project_score(me, h.proj, h.a_self);
            let scores: Vec<S> = neighbors
                .iter()
                .map(|n| {
                    let s = own + self.project_score(n, h.proj, h.a_nb);
                    if s > S::zero() {
                        s
                    } else {
                        s * slope
                    }
                })
                .collect();
            let w = crate::tensor::softmax_slice(&scores).expect("non-empty neighbor set");
            for (j, n) in neighbors.iter().enumerate() {
                weights[j] += w[j] / nh;
                for (s, &x) in summary.iter_mut().zip(n.iter()) {
                    *s += w[j] * x / nh;
                }
            }
        }
        let half = S::lit(0.5);
        let out = me.iter().zip(&summary).map(|(&a, &b)| (a + b) * half).collect();
        (out, weights)
    }

    /// The same computation recorded on a tape, for training.
    fn aggregate_on_tape<'a>(&self, tape: &mut Tape<'a, S>, me: &[S], neighbors: &[&[S]]) -> Result<Var, KgError> {
        let d = self.dim;
        let me_v = tape.constant(&[1, d], me.to_vec())?;
        if neighbors.is_empty() {
            return Ok(me_v);
        }
        let k = neighbors.len();
        let nb = tape.constant(&[k, d], neighbors.iter().flat_map(|n| n.iter().copied()).collect())?;
        let mut summary: Option<Var> = None;
        for h in &self.heads {
            let p = tape.param(h.proj);
            let zs = tape.matmul(me_v, p)?;
            let a_s = tape.param(h.a_self);
            let own = tape.matmul(zs, a_s)?;
            let zn = tape.matmul(nb, p)?;
            let a_n = tape.param(h.a_nb);
            let sc = tape.matmul(zn, a_n)?;
            let sc = tape.add(sc, own)?;
            let sc = tape.leaky_relu(sc, S::lit(self.slope))?;
            let sc = tape.transpose(sc)?;
            let w = tape.softmax(sc, None)?;
            let part = tape.matmul(w, nb)?;
            summary = Some(match summary {
                Some(s) => tape.add(s, part)?,
                None => part,
            });
        }
        let summary = tape.scale(summary.expect("at least one head"), S::lit(1.0 / self.heads.len() as f64))?;
        let sum = tape.add(me_v, summary)?;
        Ok(tape.scale(sum, S::lit(0.5))?)
    }
}

/// Enriched entity vector together with the attention weights it used.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSummary<S> {
    pub vector: Vec<S>,
    pub neighbors: Vec<String>,
    pub weights: Vec<S>,
}

/// Mixes an entity's vector with up to `n_neighbors` graph neighbors.
///
/// An entity absent from `table` yields the zero vector and bumps `warnings`.
/// Neighbors without a vector are skipped.
pub fn neighbor_aggregate<S: Scalar>(
    entity_id: &str,
    table: &EntityTable<S>,
    store: &TripleStore,
    n_neighbors: usize,
    params: &GatParams<S>,
    warnings: &mut usize,
) -> NeighborSummary<S> {
    let Some(me) = table.get(entity_id) else {
        *warnings += 1;
        return NeighborSummary {
            vector: vec![S::zero(); table.dim()],
            neighbors: Vec::new(),
            weights: Vec::new(),
        };
    };
    let mut names = Vec::new();
    let mut rows = Vec::new();
    if let Some(e) = store.entity(entity_id) {
        for n in store.select_neighbors(e, n_neighbors) {
            let name = &store.entities()[n];
            if let Some(v) = table.get(name) {
                names.push(name.clone());
                rows.push(v);
            }
        }
    }
    let (vector, weights) = params.aggregate_rows(me, &rows);
    NeighborSummary {
        vector,
        neighbors: names,
        weights,
    }
}

/// Applies [`neighbor_aggregate`] to every entity in `table`. Returns the new
/// table and the number of warnings.
pub fn enrich_table<S: Scalar>(
    table: &EntityTable<S>,
    store: &TripleStore,
    n_neighbors: usize,
    params: &GatParams<S>,
) -> Result<(EntityTable<S>, usize), KgError> {
    let mut out = EntityTable::new(table.dim());
    let mut warnings = 0;
    for id in table.ids() {
        let s = neighbor_aggregate(id, table, store, n_neighbors, params, &mut warnings);
        out.insert(id, &s.vector)?;
    }
    Ok((out, warnings))
}

/// Fits the attention parameters so that enriched vectors still satisfy the
/// translation constraint `h + r ≈ t` better than corrupted triples, using a
/// squared-distance margin loss. Returns the mean loss per epoch.
pub fn fit_gat<S: Scalar>(
    emb: &KgEmbedding<S>,
    store: &TripleStore,
    params: &mut GatParams<S>,
    cfg: &GatConfig,
) -> Result<Vec<f64>, KgError> {
    if store.is_empty() {
        return Err(KgError::Empty);
    }
    if emb.dim != params.dim {
        return Err(KgError::Config(format!(
            "embedding dimension {} differs from attention dimension {}",
            emb.dim, params.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let neighbors: Vec<Vec<usize>> = (0..store.entities().len())
        .map(|e| store.select_neighbors(e, cfg.n_neighbors))
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &params.store,
    );
    let n_ent = store.entities().len();
    let mut order: Vec<usize> = (0..store.triples().len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let negs: Vec<(usize, usize, usize)> = chunk
                .iter()
                .map(|&ti| {
                    let (h, r, t) = store.triples()[ti];
                    let e = rng.random_range(0..n_ent);
                    if rng.random::<bool>() {
                        (e, r, t)
                    } else {
                        (h, r, e)
                    }
                })
                .collect();
            let grads = {
                let mut tape = Tape::new(&params.store);
                let enrich = |tape: &mut Tape<'_, S>, e: usize| -> Result<Var, KgError> {
                    let rows: Vec<&[S]> = neighbors[e].iter().map(|&n| emb.entity(n)).collect();
                    params.aggregate_on_tape(tape, emb.entity(e), &rows)
                };
                let dist = |tape: &mut Tape<'_, S>, (h, r, t): (usize, usize, usize)| -> Result<Var, KgError> {
                    let hv = enrich(tape, h)?;
                    let tv = enrich(tape, t)?;
                    let rv = tape.constant(&[1, emb.dim], emb.relation(r).to_vec())?;
                    let x = tape.add(hv, rv)?;
                    let x = tape.sub(x, tv)?;
                    let sq = tape.mul(x, x)?;
                    Ok(tape.sum(sq)?)
                };
                let mut losses = Vec::with_capacity(chunk.len());
                for (&ti, &neg) in chunk.iter().zip(&negs) {
                    let dp = dist(&mut tape, store.triples()[ti])?;
                    let dn = dist(&mut tape, neg)?;
                    let diff = tape.sub(dp, dn)?;
                    let m = tape.constant(&[1], vec![S::lit(cfg.margin)])?;
                    let l = tape.add(diff, m)?;
                    losses.push(tape.relu(l)?);
                }
                let all = tape.concat_rows(&losses)?;
                let loss = tape.mean(all)?;
                total += tape.scalar_value(loss).as_f64() * chunk.len() as f64;
                tape.backward(loss)?
            };
            grads.params.accumulate_into(&mut params.store);
            adam.step(&mut params.store)?;
            params.store.zero_grad();
        }
        history.push(total / order.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f64])]) -> EntityTable<f64> {
        let mut t = EntityTable::new(rows[0].1.len());
        for (id, v) in rows {
            t.insert(id, v).unwrap();
        }
        t
    }

    #[test]
    fn default_neighbor_count() {
        assert_eq!(GatConfig::default().n_neighbors, 10);
    }

    #[test]
    fn isolated_entity_keeps_its_vector() {
        let store = TripleStore::from_triples([("a", "r", "b")]);
        let t = table(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0]), ("c", &[0.3, -0.7])]);
        let p = GatParams::init(2, 1, 0.2, 1).unwrap();
        let mut w = 0;
        let s = neighbor_aggregate("c", &t, &store, 10, &p, &mut w);
        assert_eq!(s.vector, vec![0.3, -0.7]);
        assert_eq!(w, 0);
    }

    #[test]
    fn identical_neighbors_average_with_self() {
        let store = TripleStore::from_triples([("a", "r", "b"), ("a", "r", "c"), ("a", "q", "d")]);
        let n = [0.5, -1.5, 2.0];
        let t = table(&[("a", &[1.0, 1.0, 1.0]), ("b", &n), ("c", &n), ("d", &n)]);
        let p = GatParams::init(3, 2, 0.2, 9).unwrap();
        let mut w = 0;
        let s = neighbor_aggregate("a", &t, &store, 10, &p, &mut w);
        for &x in &s.weights {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        for (o, &v) in s.vector.iter().zip(&n) {
            assert!((o - (1.0 + v) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_form_a_distribution() {
        let store = TripleStore::from_triples([("a", "r", "b"), ("a", "r", "c"), ("d", "q", "a")]);
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 3.0]), ("c", &[-2.0, 1.0]), ("d", &[4.0, 4.0])]);
        let p = GatParams::init(2, 3, 0.2, 4).unwrap();
        let mut w = 0;
        let s = neighbor_aggregate("a", &t, &store, 10, &p, &mut w);
        assert_eq!(s.weights.len(), 3);
        assert!(s.weights.iter().all(|&x| x >= 0.0));
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_entity_counts_a_warning() {
        let store = TripleStore::from_triples([("a", "r", "b")]);
        let t = table(&[("a", &[1.0]), ("b", &[2.0])]);
        let p = GatParams::init(1, 1, 0.2, 0).unwrap();
        let mut w = 0;
        let s = neighbor_aggregate("zz", &t, &store, 10, &p, &mut w);
        assert_eq!(s.vector, vec![0.0]);
        assert_eq!(w, 1);
    }

    #[test]
    fn tape_and_direct_aggregation_agree() {
        let p = GatParams::<f64>::init(3, 2, 0.2, 5).unwrap();
        let me = [0.2, -0.4, 0.9];
        let nb: [&[f64]; 2] = [&[1.0, 0.5, -0.5], &[-0.3, 0.1, 0.8]];
        let (direct, _) = p.aggregate_rows(&me, &nb);
        let mut tape = Tape::new(&p.store);
        let v = p.aggregate_on_tape(&mut tape, &me, &nb).unwrap();
        for (a, b) in direct.iter().zip(tape.value(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let store = TripleStore::from_triples([("a", "r", "b"), ("b", "r", "c"), ("c", "q", "d"), ("d", "q", "a")]);
        let (emb, _) = super::super::transe_train::<f64>(
            &store,
            &super::super::TranseConfig {
                dim: 4,
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = GatConfig {
            epochs: 2,
            batch: 2,
            ..Default::default()
        };
        let run = || {
            let mut p = GatParams::init(4, 1, 0.2, 3).unwrap();
            let h = fit_gat(&emb, &store, &mut p, &cfg).unwrap();
            (h, p.store.iter().map(|(_, _, t)| t.data().to_vec()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
