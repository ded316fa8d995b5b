//! End-to-end runs driven by a flat `key=value` configuration: load a data
//! directory, prepare entity vectors, train, evaluate, ablate and sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::data::{
    parse_behaviors, parse_news_table, DataError, EntityTable, NewsParseOptions, NewsRecord, VectorTable, Vocab,
    VocabPolicy,
};
use crate::kg::{enrich_table, fit_gat, transe_train, GatConfig, GatParams, KgError, TranseConfig, TripleStore};
use crate::kv::{KvError, KvFile};
use crate::model::{Dropout, Model, ModelConfig, ModelError, NewsInput, Variant};
use crate::tensor::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamStore};
use crate::train::{
    evaluate, load_checkpoint, pair_loss_sum, run_ablation, save_checkpoint, split_validation, substream, train, AblationTable,
    CheckpointError, Corpus, Impression, LossMode, MetricsReport, ResolveStats, Stream, TrainConfig, TrainError,
    TrainOutcome,
};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Kv(#[from] KvError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl RunError {
    /// Whether the error comes from the configuration rather than the run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            RunError::Kv(_) | RunError::Config(_) | RunError::Model(ModelError::Config(_))
        )
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

const RUN_KEYS: [&str; 28] = [
    "S",
    "lr",
    "batch",
    "epochs",
    "seed",
    "loss_mode",
    "ablation",
    "seeds",
    "val_fraction",
    "min_count",
    "transe_epochs",
    "transe_margin",
    "transe_lr",
    "gat",
    "gat_heads",
    "gat_epochs",
    "gat_lr",
    "gat_margin",
    "n_neighbors",
    "train_dir",
    "test_dir",
    "triples",
    "entity_vectors",
    "word_vectors",
    "out",
    "sweep_param",
    "sweep_values",
    "threads",
];

/// Model keys settable from a run config; the table sizes and component
/// switches are derived.
const MODEL_KEYS: [&str; 16] = [
    "d_w",
    "d_e",
    "d",
    "g",
    "l",
    "m",
    "D",
    "Dc",
    "lambda1",
    "lambda2",
    "text_heads",
    "positional",
    "dropout",
    "alpha_mode",
    "eq_mode",
    "finetune_entities",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub entity_vectors: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
    /// Variants for ablation runs; the first one is used by `train`.
    pub variants: Vec<Variant>,
    /// Seeds for ablation runs; defaults to the single run seed.
    pub seeds: Vec<u64>,
    pub min_count: usize,
    pub transe: TranseConfig,
    /// Graph-attention enrichment of pretrained entity vectors.
    pub gat: Option<GatConfig>,
    pub paths: DataPaths,
    pub sweep_param: Option<String>,
    pub sweep_values: Vec<usize>,
    /// Worker threads for evaluation; 0 uses the default pool.
    pub threads: usize,
    source: KvFile,
}

fn list<T: std::str::FromStr>(kv: &KvFile, key: &str) -> std::result::Result<Option<Vec<T>>, KvError> {
    kv.raw(key)
        .map(|v| {
            v.split(',')
                .map(|x| {
                    x.trim().parse().map_err(|_| KvError::Invalid {
                        key: key.to_string(),
                        value: x.trim().to_string(),
                    })
                })
                .collect()
        })
        .transpose()
}

impl RunConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let allowed: Vec<&str> = MODEL_KEYS.iter().chain(&RUN_KEYS).copied().collect();
        let kv = KvFile::parse(text, &allowed)?;
        Self::from_kv(kv, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    fn from_kv(kv: KvFile, base: Option<&Path>) -> Result<Self> {
        let mut model = ModelConfig::default();
        model.apply_kv(&kv)?;
        let d = TrainConfig::default();
        let loss_mode: String = kv.get_or("loss_mode", d.loss_mode.to_string())?;
        let train = TrainConfig {
            negatives: kv.get_or("S", d.negatives)?,
            batch: kv.get_or("batch", d.batch)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            seed: kv.get_or("seed", d.seed)?,
            loss_mode: loss_mode.parse::<LossMode>().map_err(RunError::Config)?,
        };
        let variants = list::<Variant>(&kv, "ablation")?.unwrap_or_else(|| vec![Variant::Full]);
        model.flags = variants.first().copied().unwrap_or(Variant::Full).flags();
        let seeds = list::<u64>(&kv, "seeds")?.unwrap_or_else(|| vec![train.seed]);
        let td = TranseConfig::default();
        let transe = TranseConfig {
            dim: model.d_e,
            margin: kv.get_or("transe_margin", td.margin)?,
            epochs: kv.get_or("transe_epochs", td.epochs)?,
            lr: kv.get_or("transe_lr", td.lr)?,
            seed: 0,
        };
        let gd = GatConfig::default();
        let gat = kv
            .get_or("gat", true)?
            .then(|| -> std::result::Result<GatConfig, KvError> {
                Ok(GatConfig {
                    heads: kv.get_or("gat_heads", gd.heads)?,
                    n_neighbors: kv.get_or("n_neighbors", gd.n_neighbors)?,
                    epochs: kv.get_or("gat_epochs", gd.epochs)?,
                    lr: kv.get_or("gat_lr", gd.lr)?,
                    margin: kv.get_or("gat_margin", gd.margin)?,
                    ..gd.clone()
                })
            })
            .transpose()?;
        let path = |key: &str| -> std::result::Result<Option<PathBuf>, KvError> {
            Ok(kv.get::<PathBuf>(key)?.map(|p| match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }))
        };
        let paths = DataPaths {
            train_dir: path("train_dir")?,
            test_dir: path("test_dir")?,
            triples: path("triples")?,
            entity_vectors: path("entity_vectors")?,
            word_vectors: path("word_vectors")?,
            out: path("out")?,
        };
        let cfg = Self {
            model,
            train,
            val_fraction: kv.get_or("val_fraction", 0.1)?,
            variants,
            seeds,
            min_count: kv.get_or("min_count", 1)?,
            transe,
            gat,
            paths,
            sweep_param: kv.get("sweep_param")?,
            sweep_values: list(&kv, "sweep_values")?.unwrap_or_default(),
            threads: kv.get_or("threads", 0)?,
            source: kv,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.train.negatives == 0 {
            return bad("`S` must be positive");
        }
        if self.train.batch == 0 {
            return bad("`batch` must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("`val_fraction` must lie in [0, 1)");
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return bad("`ablation` and `seeds` must not be empty");
        }
        if let Some(p) = &self.sweep_param {
            if p != "lambda1" && p != "lambda2" {
                return bad("`sweep_param` must be lambda1 or lambda2");
            }
        }
        Ok(())
    }

    /// Replaces the run seed (and the ablation seeds when they were not set).
    pub fn set_seed(&mut self, seed: u64) {
        if self.source.raw("seeds").is_none() {
            self.seeds = vec![seed];
        }
        self.train.seed = seed;
        self.source.set("seed", seed);
    }

    pub fn set_out(&mut self, out: PathBuf) {
        self.source.set("out", out.display());
        self.paths.out = Some(out);
    }

    /// Effective settings as `key=value` text.
    pub fn to_text(&self) -> String {
        self.source.to_text()
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.paths.out.as_deref().ok_or(RunError::Kv(KvError::Missing("out".into())))
    }
}

/// Data loaded and indexed for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub train: Vec<Impression>,
    pub val: Vec<Impression>,
    pub test: Vec<Impression>,
    pub entity_vectors: Option<EntityTable<f64>>,
    pub word_vectors: Option<VectorTable<f64>>,
    pub train_stats: ResolveStats,
    pub test_stats: ResolveStats,
    pub entity_json_warnings: usize,
    pub kg_warnings: usize,
}

fn parse_options(c: &ModelConfig) -> NewsParseOptions {
    NewsParseOptions {
        genre_lengths: vec![c.l; c.g],
        entity_cap: c.entities_clicked.max(c.entities_candidate),
    }
}

fn load_split(dir: &Path, policy: &VocabPolicy, opts: &NewsParseOptions) -> Result<(Vec<NewsRecord>, Vocab, usize, Vec<crate::data::ImpressionLog>)> {
    let news = parse_news_table(&dir.join("news.tsv"), policy, opts)?;
    let logs = parse_behaviors(&dir.join("behaviors.tsv"))?;
    Ok((news.records, news.vocab, news.entity_json_warnings, logs))
}

/// Entity vectors learned from a triple file: TransE, then optional
/// graph-attention enrichment.
pub fn kg_vectors(cfg: &RunConfig, path: &Path) -> Result<(EntityTable<f64>, usize)> {
    let store = TripleStore::load(path)?;
    let mut rng = substream(cfg.train.seed, Stream::Kg);
    let tc = TranseConfig {
        seed: rng.random(),
        ..cfg.transe.clone()
    };
    let (emb, _) = transe_train::<f64>(&store, &tc)?;
    let table = emb.to_table(&store);
    let Some(gc) = &cfg.gat else {
        return Ok((table, 0));
    };
    let gc = GatConfig {
        seed: rng.random(),
        ..gc.clone()
    };
    let mut params = GatParams::init(tc.dim, gc.heads, gc.slope, gc.seed)?;
    fit_gat(&emb, &store, &mut params, &gc)?;
    Ok(enrich_table(&table, &store, gc.n_neighbors, &params)?)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let train_dir = cfg
        .paths
        .train_dir
        .as_deref()
        .ok_or(RunError::Kv(KvError::Missing("train_dir".into())))?;
    let opts = parse_options(&cfg.model);
    let (train_news, vocab, mut json_warnings, train_logs) =
        load_split(train_dir, &VocabPolicy::Build { min_count: cfg.min_count }, &opts)?;
    let mut corpus = Corpus::new(vocab.clone());
    corpus.add_news(&train_news, true);
    let mut test_logs = Vec::new();
    if let Some(dir) = &cfg.paths.test_dir {
        let (news, _, w, logs) = load_split(dir, &VocabPolicy::Fixed(vocab), &opts)?;
        corpus.add_news(&news, true);
        json_warnings += w;
        test_logs = logs;
    }
    let (all_train, train_stats) = corpus.resolve(&train_logs, cfg.model.m);
    let (train, val) = split_validation(&all_train, cfg.val_fraction);
    let (test, test_stats) = corpus.resolve(&test_logs, cfg.model.m);
    let (entity_vectors, kg_warnings) = match (&cfg.paths.entity_vectors, &cfg.paths.triples) {
        (Some(p), _) => (Some(EntityTable::load(p)?), 0),
        (None, Some(p)) => {
            let (t, w) = kg_vectors(cfg, p)?;
            (Some(t), w)
        }
        (None, None) => (None, 0),
    };
    if let Some(t) = &entity_vectors {
        if t.dim() != cfg.model.d_e {
            return Err(RunError::Config(format!("entity vectors have {} dims, d_e = {}", t.dim(), cfg.model.d_e)));
        }
    }
    let word_vectors = cfg.paths.word_vectors.as_deref().map(VectorTable::load).transpose()?;
    if let Some(t) = &word_vectors {
        if t.dim() != cfg.model.d_w {
            return Err(RunError::Config(format!("word vectors have {} dims, d_w = {}", t.dim(), cfg.model.d_w)));
        }
    }
    Ok(Prepared {
        corpus,
        train,
        val,
        test,
        entity_vectors,
        word_vectors,
        train_stats,
        test_stats,
        entity_json_warnings: json_warnings,
        kg_warnings,
    })
}

/// A freshly initialized model for `variant`, with pretrained vectors copied
/// into the embedding tables.
pub fn build_model<S: Scalar>(cfg: &RunConfig, prep: &Prepared, variant: Variant, seed: u64) -> Result<Model<S>> {
    let config = ModelConfig {
        vocab_size: prep.corpus.vocab.len(),
        entity_rows: prep.corpus.entities.len(),
        flags: variant.flags(),
        ..cfg.model.clone()
    };
    let mut model = Model::<S>::new(config, substream(seed, Stream::Init).random())?;
    let cast = |v: &[f64]| v.iter().map(|&x| S::lit(x)).collect::<Vec<S>>();
    if let Some(t) = &prep.entity_vectors {
        let rows: Vec<(usize, Vec<S>)> = prep
            .corpus
            .entities
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(r, id)| t.get(id).map(|v| (r, cast(v))))
            .collect();
        model.set_entity_rows(rows.iter().map(|(r, v)| (*r, v.as_slice())))?;
    }
    if let Some(t) = &prep.word_vectors {
        let rows: Vec<(usize, Vec<S>)> = (2..prep.corpus.vocab.len())
            .filter_map(|i| {
                let tok = prep.corpus.vocab.token(i)?;
                t.get(tok).map(|v| (i, cast(v)))
            })
            .collect();
        model.set_word_rows(rows.iter().map(|(r, v)| (*r, v.as_slice())))?;
    }
    Ok(model)
}

pub fn train_variant<S: Scalar>(cfg: &RunConfig, prep: &Prepared, variant: Variant, seed: u64) -> Result<TrainOutcome<S>> {
    let model = build_model(cfg, prep, variant, seed)?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    Ok(train(model, &prep.corpus, &prep.train, &prep.val, &tc)?)
}

/// Held-out impressions: the test split when present, else validation.
pub fn held_out(prep: &Prepared) -> &[Impression] {
    if prep.test.is_empty() {
        &prep.val
    } else {
        &prep.test
    }
}

/// Writes `checkpoint/`, `history.txt` and, with held-out data,
/// `metrics.txt` under the configured output directory.
pub fn run_train<S: Scalar>(cfg: &RunConfig, prep: &Prepared) -> Result<(TrainOutcome<S>, Option<MetricsReport>)> {
    let out = cfg.require_out()?.to_path_buf();
    let outcome = train_variant::<S>(cfg, prep, cfg.variants[0], cfg.train.seed)?;
    save_checkpoint(
        &out.join("checkpoint"),
        &outcome.model,
        &prep.corpus.vocab,
        &prep.corpus.entities,
        &cfg.to_text(),
    )?;
    write_file(&out.join("history.txt"), &outcome.history_text())?;
    let held = held_out(prep);
    let report = if held.is_empty() {
        None
    } else {
        let r = evaluate(&outcome.model, &prep.corpus, held, false)?;
        write_file(&out.join("metrics.txt"), &format!("{}\n", r.to_kv()))?;
        Some(r)
    };
    Ok((outcome, report))
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

/// Trains every configured variant under every seed and evaluates on
/// held-out data.
pub fn run_ablation_config<S: Scalar>(cfg: &RunConfig, prep: &Prepared) -> Result<AblationTable> {
    run_ablation(&cfg.variants, &cfg.seeds, |v, seed| {
        log::info!("training variant {v} with seed {seed}");
        let outcome = train_variant::<S>(cfg, prep, v, seed)?;
        Ok(evaluate(&outcome.model, &prep.corpus, held_out(prep), false)?)
    })
}

/// One row per head count: `(value, metrics)`. Every value is validated
/// before any training starts.
pub fn run_sweep<S: Scalar>(cfg: &RunConfig, prep: &Prepared, param: &str, values: &[usize]) -> Result<Vec<(usize, MetricsReport)>> {
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match param {
                "lambda1" => c.model.lambda1 = v,
                "lambda2" => c.model.lambda2 = v,
                _ => return Err(RunError::Config(format!("cannot sweep `{param}`"))),
            }
            c.model.validate()?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .into_iter()
        .map(|(v, c)| {
            let outcome = train_variant::<S>(&c, prep, c.variants[0], c.train.seed)?;
            Ok((v, evaluate(&outcome.model, &prep.corpus, held_out(prep), false)?))
        })
        .collect()
}

/// Plot-ready columns `value auc mrr ndcg5 ndcg10`.
pub fn sweep_table(rows: &[(usize, MetricsReport)]) -> String {
    let mut s = String::from("value\tauc\tmrr\tndcg5\tndcg10\n");
    for (v, r) in rows {
        let _ = writeln!(s, "{v}\t{}\t{}\t{}\t{}", r.auc, r.mrr, r.ndcg5, r.ndcg10);
    }
    s
}

/// Scores a MIND-layout directory with a saved checkpoint.
pub fn eval_checkpoint<S: Scalar>(checkpoint: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let ck = load_checkpoint::<S>(checkpoint)?;
    let opts = parse_options(&ck.model.config);
    let (news, _, _, logs) = load_split(data_dir, &VocabPolicy::Fixed(ck.vocab.clone()), &opts)?;
    let mut corpus = Corpus::with_entities(ck.vocab, ck.entities);
    corpus.add_news(&news, false);
    let (imps, _) = corpus.resolve(&logs, ck.model.config.m);
    Ok(evaluate(&ck.model, &corpus, &imps, false)?)
}

/// Small configuration for gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        entity_rows: 10,
        d_w: 16,
        d_e: 8,
        d: 8,
        g: 1,
        l: 4,
        m: 2,
        entities_clicked: 2,
        entities_candidate: 2,
        lambda1: 2,
        lambda2: 2,
        text_heads: 2,
        dropout: 0.0,
        finetune_entities: true,
        ..Default::default()
    }
}

/// Reads overrides of [`gradcheck_config`] plus `seed` and `ablation`.
pub fn parse_gradcheck_config(text: &str) -> Result<(ModelConfig, u64)> {
    let allowed: Vec<&str> = ModelConfig::KEYS.iter().copied().chain(["seed", "ablation"]).collect();
    let kv = KvFile::parse(text, &allowed)?;
    let mut c = gradcheck_config();
    if let Some(v) = kv.get::<Variant>("ablation")? {
        c.flags = v.flags();
    }
    c.apply_kv(&kv)?;
    c.validate()?;
    Ok((c, kv.get_or("seed", 0)?))
}

/// Finite-difference check of the pairwise loss of one random impression
/// (two candidates: one clicked, one not) over every parameter block.
pub fn model_gradcheck(config: ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(config, seed)?;
    let c = model.config.clone();
    let mut rng = substream(seed, Stream::Sampling);
    let news = |rng: &mut rand_chacha::ChaCha8Rng| NewsInput {
        tokens: (0..c.g)
            .map(|_| (0..rng.random_range(1..=c.l)).map(|_| rng.random_range(2..c.vocab_size)).collect())
            .collect(),
        entities: (0..rng.random_range(1..=c.entities_clicked.max(c.entities_candidate)))
            .map(|_| rng.random_range(1..c.entity_rows))
            .collect(),
    };
    let history: Vec<NewsInput> = (0..c.m).map(|_| news(&mut rng)).collect();
    let cands: Vec<NewsInput> = (0..2).map(|_| news(&mut rng)).collect();
    let hist: Vec<&NewsInput> = history.iter().collect();
    let cand: Vec<&NewsInput> = cands.iter().collect();
    // The tape reads parameters from the store it borrows, so scoring goes
    // through a model shell without its own parameters.
    let shell = Model {
        config: c,
        params: ParamStore::new(),
    };
    let report = finite_difference_check::<f64, ModelError, _>(&mut model.params, opts, |tape| {
        let ys = shell.score_candidates(tape, &hist, &cand, &mut Dropout::off())?;
        let d = tape.sub(ys[0], ys[1])?;
        Ok(pair_loss_sum(tape, d, LossMode::LogBpr)?)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_and_invalid_keys_are_usage_errors() {
        let e = RunConfig::parse("bogus=1", None).unwrap_err();
        assert!(e.is_usage());
        let e = RunConfig::parse("d_w=30\nlambda2=4", None).unwrap_err();
        assert!(e.is_usage(), "{e}");
        let e = RunConfig::parse("ablation=full,zz", None).unwrap_err();
        assert!(e.is_usage());
    }

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("", None).unwrap();
        assert_eq!((c.train.epochs, c.train.batch, c.train.negatives), (5, 64, 4));
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.model.dropout, 0.2);
        let mut c = RunConfig::parse("ablation=c,full\nseed=3\ntrain_dir=data/train", Some(Path::new("/x"))).unwrap();
        assert_eq!(c.variants, vec![Variant::C, Variant::Full]);
        assert!(!c.model.flags.any_aware());
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.paths.train_dir.as_deref(), Some(Path::new("/x/data/train")));
        c.set_seed(9);
        assert_eq!((c.train.seed, c.seeds.clone()), (9, vec![9]));
        assert!(c.to_text().contains("seed=9"));
    }

    #[test]
    fn toy_gradcheck_passes_and_corruption_fails() {
        let opts = GradCheckOptions {
            samples_per_block: 4,
            ..Default::default()
        };
        let r = model_gradcheck(gradcheck_config(), 1, &opts).unwrap();
        assert!(r.passed(1e-3), "{r:?}");
        let bad = GradCheckOptions { corrupt: true, ..opts };
        assert!(!model_gradcheck(gradcheck_config(), 1, &bad).unwrap().passed(1e-3));
    }

    #[test]
    fn missing_train_dir_names_the_key() {
        let c = RunConfig::parse("", None).unwrap();
        let e = prepare(&c).unwrap_err();
        assert!(e.to_string().contains("train_dir"), "{e}");
        assert!(e.is_usage());
    }
}
