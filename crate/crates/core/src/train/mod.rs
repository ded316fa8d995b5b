//! Pairwise training with in-impression negative sampling, ranking metrics
//! and ablation runs.

mod checkpoint;
mod dataset;
mod metrics;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Dropout, Model, ModelError, NewsInput, Variant};
use crate::tensor::{Adam, AdamConfig, Tape, TensorError, Var};
use crate::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use dataset::{Corpus, Impression, ResolveStats};
pub use metrics::{impression_auc, impression_metrics, mrr, ndcg_at_k, ranking, MetricsReport};

/// Named random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 2,
    Dropout = 3,
    Sampling = 4,
    Kg = 5,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossMode {
    /// `−log σ(y⁺ − y⁻)`
    #[default]
    LogBpr,
    /// `−σ(y⁺ − y⁻)`
    LiteralSigmoid,
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "log_bpr" => Ok(LossMode::LogBpr),
            "literal_sigmoid" => Ok(LossMode::LiteralSigmoid),
            _ => Err(format!("unknown loss mode `{s}`")),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::LogBpr => "log_bpr",
            LossMode::LiteralSigmoid => "literal_sigmoid",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Negatives per positive.
    pub negatives: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            negatives: 4,
            batch: 64,
            epochs: 5,
            lr: 1e-4,
            seed: 42,
            loss_mode: LossMode::LogBpr,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("no training pairs: every impression lacks a clicked or a non-clicked item")]
    NoPairs,
    #[error("invalid training setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `S` negatives from the impression's non-clicked candidates (positions into
/// `impression.candidates`): distinct when enough exist, otherwise drawn with
/// replacement. `None` when there is no non-clicked candidate.
pub fn sample_negatives<R: Rng>(impression: &Impression, s: usize, rng: &mut R) -> Option<Vec<usize>> {
    let pool: Vec<usize> = impression.negatives().collect();
    if pool.is_empty() {
        return None;
    }
    if pool.len() >= s {
        Some(rand::seq::index::sample(rng, pool.len(), s).into_iter().map(|i| pool[i]).collect())
    } else {
        Some((0..s).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

/// Mean pairwise loss for aligned positive and negative scores.
pub fn bpr_loss(pos: &[f64], neg: &[f64], mode: LossMode) -> f64 {
    assert_eq!(pos.len(), neg.len());
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let terms = pos.iter().zip(neg).map(|(p, n)| {
        let d = p - n;
        match mode {
            // −log σ(d) = log(1 + e^{−d}), computed stably
            LossMode::LogBpr => (-d).max(0.0) + (-d.abs()).exp().ln_1p(),
            LossMode::LiteralSigmoid => -sig(d),
        }
    });
    terms.sum::<f64>() / pos.len() as f64
}

/// Sum over pairs of the per-pair loss, on a tape; `diffs` holds `y⁺ − y⁻`.
pub fn pair_loss_sum<S: Scalar>(tape: &mut Tape<'_, S>, diffs: Var, mode: LossMode) -> Result<Var, TensorError> {
    let t = match mode {
        LossMode::LogBpr => tape.log_sigmoid(diffs)?,
        LossMode::LiteralSigmoid => tape.sigmoid(diffs)?,
    };
    let s = tape.sum(t)?;
    tape.scale(s, -S::one())
}

fn inputs<'a>(corpus: &'a Corpus, idx: &[usize]) -> Vec<&'a NewsInput> {
    idx.iter().map(|&i| &corpus.news[i]).collect()
}

/// Scores every candidate of one impression (evaluation mode).
pub fn score_impression<S: Scalar>(model: &Model<S>, corpus: &Corpus, imp: &Impression) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new(&model.params);
    let hist = inputs(corpus, &imp.history);
    let cands = inputs(corpus, &imp.candidates);
    let vars = model.score_candidates(&mut tape, &hist, &cands, &mut Dropout::off())?;
    Ok(vars.into_iter().map(|v| tape.scalar_value(v).as_f64()).collect())
}

/// Per-impression metrics averaged with equal weight. Impressions are scored
/// in parallel; the result does not depend on the thread count.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    impressions: &[Impression],
    keep_rows: bool,
) -> Result<MetricsReport, ModelError> {
    let scores: Vec<Vec<f64>> = impressions
        .par_iter()
        .map(|imp| score_impression(model, corpus, imp))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport::aggregate(
        impressions.iter().zip(&scores).map(|(i, s)| (i.labels.as_slice(), s.as_slice())),
        keep_rows,
    ))
}

/// Splits off the last `fraction` of impressions (file order) for validation.
pub fn split_validation(imps: &[Impression], fraction: f64) -> (Vec<Impression>, Vec<Impression>) {
    let n = imps.len();
    let mut k = (n as f64 * fraction).floor() as usize;
    if fraction > 0.0 && k == 0 && n >= 2 {
        k = 1;
    }
    (imps[..n - k].to_vec(), imps[n - k..].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pairs: usize,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation set).
    pub model: Model<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Positives skipped because their impression had no non-clicked item.
    pub skipped_pairs: usize,
}

impl<S> TrainOutcome<S> {
    /// One `key=value` line per epoch.
    pub fn history_text(&self) -> String {
        let mut s = String::new();
        for r in &self.history {
            let _ = write!(s, "epoch={} loss={} pairs={}", r.epoch, r.loss, r.pairs);
            if let Some(v) = &r.val {
                let _ = write!(s, " val_{}", v.to_kv().replace(' ', " val_"));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains with Adam on `(positive, S negatives)` groups, shuffled per epoch.
/// The loss of a batch is the mean pairwise loss over its pairs.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    corpus: &Corpus,
    train_set: &[Impression],
    val_set: &[Impression],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    if cfg.negatives == 0 || cfg.batch == 0 {
        return Err(TrainError::Config("negatives and batch must be positive".into()));
    }
    let mut samples: Vec<(usize, usize)> = Vec::new();
    let mut skipped_pairs = 0;
    for (i, imp) in train_set.iter().enumerate() {
        let has_neg = imp.negatives().next().is_some();
        for p in imp.positives() {
            if has_neg {
                samples.push((i, p));
            } else {
                skipped_pairs += 1;
            }
        }
    }
    if samples.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut sampling = substream(cfg.seed, Stream::Sampling);
    let mut drop_rng = substream(cfg.seed, Stream::Dropout);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &model.params,
    );
    let p = model.config.dropout;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<S>)> = None;
    for epoch in 1..=cfg.epochs {
        samples.shuffle(&mut sampling);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (b, chunk) in samples.chunks(cfg.batch).enumerate() {
            let batch_pairs = chunk.len() * cfg.negatives;
            let scale = S::lit(1.0 / batch_pairs as f64);
            let diverged = |detail: String| TrainError::Diverged { epoch, batch: b, detail };
            for &(i, pos) in chunk {
                let imp = &train_set[i];
                let negs = sample_negatives(imp, cfg.negatives, &mut sampling).expect("has negatives");
                let mut cands = Vec::with_capacity(1 + negs.len());
                cands.push(imp.candidates[pos]);
                cands.extend(negs.iter().map(|&n| imp.candidates[n]));
                let grads = {
                    let mut tape = Tape::new(&model.params);
                    let hist = inputs(corpus, &imp.history);
                    let cand_inputs = inputs(corpus, &cands);
                    let mut drop = Dropout::train(p, &mut drop_rng);
                    let scores = match model.score_candidates(&mut tape, &hist, &cand_inputs, &mut drop) {
                        Err(ModelError::Tensor(TensorError::NonFinite(op))) => {
                            return Err(diverged(format!("non-finite value in {op}")))
                        }
                        r => r?,
                    };
                    let all = tape.concat_rows(&scores)?;
                    let y_pos = tape.slice_rows(all, 0, 1)?;
                    let y_neg = tape.slice_rows(all, 1, negs.len())?;
                    let d = tape.sub(y_pos, y_neg)?;
                    let l = pair_loss_sum(&mut tape, d, cfg.loss_mode)?;
                    let value = tape.scalar_value(l).as_f64();
                    if !value.is_finite() {
                        return Err(diverged(format!("loss is {value}")));
                    }
                    total += value;
                    let l = tape.scale(l, scale)?;
                    tape.backward(l)?
                };
                grads.params.accumulate_into(&mut model.params);
                pairs += negs.len();
            }
            adam.step(&mut model.params)?;
            model.params.zero_grad();
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, corpus, val_set, false)?)
        };
        let score = val.as_ref().map_or(f64::NEG_INFINITY, |v| v.auc);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val.is_none()) {
            best = Some((score, epoch, model.clone()));
        }
        log::info!("epoch {epoch}: loss {:.6}", total / pairs as f64);
        history.push(EpochRecord {
            epoch,
            loss: total / pairs as f64,
            pairs,
            val,
        });
    }
    let (_, best_epoch, best_model) = best.unwrap_or((0.0, 0, model));
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        skipped_pairs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<MetricsReport>,
    pub mean: [f64; 4],
    pub sd: [f64; 4],
}

/// Per-variant metrics across seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Human-readable table with mean ± sample standard deviation.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>17} {:>17} {:>17} {:>17}\n", "variant", "auc", "mrr", "ndcg5", "ndcg10");
        for r in &self.rows {
            let name = if r.variant == Variant::Full {
                "full".to_string()
            } else {
                format!("mgca-{}", r.variant)
            };
            let _ = write!(s, "{name:<8}");
            for k in 0..4 {
                let _ = write!(s, " {:>8.4} ± {:<6.4}", r.mean[k], r.sd[k]);
            }
            s.push('\n');
        }
        s
    }

    /// One `key=value` line per variant.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let keys = ["auc", "mrr", "ndcg5", "ndcg10"];
        for r in &self.rows {
            let _ = write!(s, "variant={} runs={}", r.variant, r.runs.len());
            for (k, key) in keys.iter().enumerate() {
                let _ = write!(s, " {key}={} {key}_sd={}", r.mean[k], r.sd[k]);
            }
            s.push('\n');
        }
        s
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `run(variant, seed)` for every pair and summarizes per variant.
pub fn run_ablation<E, F>(variants: &[Variant], seeds: &[u64], mut run: F) -> Result<AblationTable, E>
where
    F: FnMut(Variant, u64) -> Result<MetricsReport, E>,
{
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let runs = seeds.iter().map(|&s| run(v, s)).collect::<Result<Vec<_>, E>>()?;
        let mut mean = [0.0; 4];
        let mut sd = [0.0; 4];
        for k in 0..4 {
            let xs: Vec<f64> = runs.iter().map(|r| [r.auc, r.mrr, r.ndcg5, r.ndcg10][k]).collect();
            (mean[k], sd[k]) = mean_sd(&xs);
        }
        rows.push(AblationRow { variant: v, runs, mean, sd });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(labels: &[u8]) -> Impression {
        Impression {
            impression_id: "1".into(),
            user_id: "U".into(),
            history: vec![0],
            candidates: (0..labels.len()).collect(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn single_negative_is_repeated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(&imp(&[1, 0, 1]), 4, &mut rng).unwrap(), vec![1; 4]);
        assert!(sample_negatives(&imp(&[1, 1]), 4, &mut rng).is_none());
    }

    #[test]
    fn enough_negatives_are_distinct() {
        let mut labels = vec![0u8; 10];
        labels.insert(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_negatives(&imp(&labels), 4, &mut rng).unwrap();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&i| i >= 1));
    }

    #[test]
    fn negative_frequencies_are_uniform() {
        let mut labels = vec![0u8; 10];
        labels.insert(0, 1);
        let imp = imp(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 11];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_negatives(&imp, 1, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / draws as f64 - 0.1).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn loss_examples() {
        assert!((bpr_loss(&[1.0], &[1.0], LossMode::LogBpr) - 2f64.ln()).abs() < 1e-15);
        assert!(bpr_loss(&[800.0], &[0.0], LossMode::LogBpr) < 1e-300);
        assert!((bpr_loss(&[800.0], &[0.0], LossMode::LiteralSigmoid) + 1.0).abs() < 1e-15);
        let want = (2f64.ln() + (4.0f64 / 3.0).ln()) / 2.0;
        assert!((bpr_loss(&[0.0, 3f64.ln()], &[0.0, 0.0], LossMode::LogBpr) - want).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_closed_form() {
        let store = crate::tensor::ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let d = tape.constant(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let l = pair_loss_sum(&mut tape, d, LossMode::LogBpr).unwrap();
        let want = 2.0 * bpr_loss(&[0.0, 3f64.ln()], &[0.0, 0.0], LossMode::LogBpr);
        assert!((tape.scalar_value(l) - want).abs() < 1e-15);
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let imps: Vec<Impression> = (0..20)
            .map(|i| {
                let mut x = imp(&[1, 0]);
                x.impression_id = i.to_string();
                x
            })
            .collect();
        let (t, v) = split_validation(&imps, 0.1);
        assert_eq!((t.len(), v.len()), (18, 2));
        assert_eq!(v[0].impression_id, "18");
        assert_eq!(split_validation(&imps, 0.0).1.len(), 0);
    }

    #[test]
    fn ablation_summary() {
        let t = run_ablation::<(), _>(&[Variant::Full, Variant::C], &[1, 2], |v, s| {
            Ok(MetricsReport {
                auc: if v == Variant::Full { 0.8 } else { 0.6 } + s as f64 * 0.01,
                ..Default::default()
            })
        })
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!((t.row(Variant::Full).unwrap().mean[0] - 0.815).abs() < 1e-12);
        assert!((t.row(Variant::C).unwrap().sd[0] - 0.01 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.to_kv().lines().count(), 2);
    }
}
