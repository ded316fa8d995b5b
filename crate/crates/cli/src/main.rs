use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgca_core::data::{generate_synthetic, SynthSpec};
use mgca_core::model::Variant;
use mgca_core::pipeline::{
    eval_checkpoint, model_gradcheck, parse_gradcheck_config, prepare, run_ablation_config, run_sweep, run_train,
    sweep_table, write_file, RunConfig, RunError,
};
use mgca_core::tensor::GradCheckOptions;
use mgca_core::train::MetricsReport;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "mgca", version, about = "Candidate-aware news recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted click rules.
    Synth(Common),
    /// Train a model and write a checkpoint and loss history.
    Train(Common),
    /// Score a data directory with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding news.tsv and behaviors.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several variants over several seeds and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (overrides `ablation`).
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Train once per head count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda1 or lambda2 (overrides `sweep_param`).
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated head counts (overrides `sweep_values`).
        #[arg(long)]
        values: Option<String>,
    },
    /// Compare analytic and finite-difference gradients of every block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates checked per block.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

enum Failure {
    Usage(String),
    Run(String),
    Check,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_config(path: &Option<PathBuf>) -> Result<(String, Option<PathBuf>), Failure> {
    match path {
        None => Ok((String::new(), None)),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            Ok((text, p.parent().map(Path::to_path_buf)))
        }
    }
}

fn load_run(c: &Common) -> Result<RunConfig, Failure> {
    let (text, base) = read_config(&c.config)?;
    let mut cfg = RunConfig::parse(&text, base.as_deref())?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.set_out(o.clone());
    }
    if cfg.threads > 0 {
        // Fails only when the global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Failure::Usage(format!("invalid {what} `{x}`"))))
        .collect()
}

fn metrics_table(r: &MetricsReport) -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4}\n({} impressions, {} skipped)\n",
        "auc", "mrr", "ndcg5", "ndcg10", r.auc, r.mrr, r.ndcg5, r.ndcg10, r.count, r.skipped
    )
}

fn synth(c: &Common) -> Outcome {
    let (text, _) = read_config(&c.config)?;
    let mut spec = SynthSpec::from_kv(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let out = c.out.clone().ok_or_else(|| Failure::Usage("synth needs --out".into()))?;
    let data = generate_synthetic(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    data.write_dir(&out).map_err(|e| Failure::Run(e.to_string()))?;
    println!(
        "news={} train_impressions={} test_impressions={} triples={} topics={}",
        data.news.len(),
        data.train.len(),
        data.test.len(),
        data.triples.len(),
        data.clusters.len()
    );
    Ok(())
}

fn train(c: &Common) -> Outcome {
    let cfg = load_run(c)?;
    cfg.require_out()?;
    let prep = prepare(&cfg)?;
    log::info!(
        "{} train, {} validation, {} test impressions; {} news, {} entities",
        prep.train.len(),
        prep.val.len(),
        prep.test.len(),
        prep.corpus.news.len(),
        prep.corpus.entities.len() - 1
    );
    let (outcome, report) = run_train::<f64>(&cfg, &prep)?;
    print!("{}", outcome.history_text());
    println!("best_epoch={} skipped_pairs={}", outcome.best_epoch, outcome.skipped_pairs);
    if let Some(r) = report {
        println!("{}", r.to_kv());
        eprint!("{}", metrics_table(&r));
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Outcome {
    let r = eval_checkpoint::<f64>(checkpoint, data)?;
    println!("{}", r.to_kv());
    eprint!("{}", metrics_table(&r));
    if let Some(o) = out {
        write_file(&o.join("metrics.txt"), &format!("{}\n", r.to_kv()))?;
    }
    Ok(())
}

fn ablate(c: &Common, variants: Option<&str>, seeds: Option<&str>) -> Outcome {
    let mut cfg = load_run(c)?;
    if let Some(v) = variants {
        cfg.variants = parse_list::<Variant>(v, "variant")?;
    }
    if let Some(s) = seeds {
        cfg.seeds = parse_list(s, "seed")?;
    }
    cfg.validate()?;
    let prep = prepare(&cfg)?;
    let table = run_ablation_config::<f64>(&cfg, &prep)?;
    print!("{}", table.to_kv());
    eprint!("{}", table.to_table());
    if let (Some(full), Some(c)) = (table.row(Variant::Full), table.row(Variant::C)) {
        println!("auc_gap_full_minus_c={}", full.mean[0] - c.mean[0]);
    }
    if let Some(o) = &cfg.paths.out {
        write_file(&o.join("ablation.txt"), &table.to_kv())?;
        write_file(&o.join("ablation_table.txt"), &table.to_table())?;
    }
    Ok(())
}

fn sweep(c: &Common, param: Option<String>, values: Option<&str>) -> Outcome {
    let cfg = load_run(c)?;
    let param = param
        .or_else(|| cfg.sweep_param.clone())
        .ok_or_else(|| Failure::Usage("missing required key `sweep_param`".into()))?;
    let values = match values {
        Some(v) => parse_list(v, "value")?,
        None => cfg.sweep_values.clone(),
    };
    if values.is_empty() {
        return Err(Failure::Usage("missing required key `sweep_values`".into()));
    }
    // Validate every value before loading data.
    for &v in &values {
        let mut m = cfg.model.clone();
        match param.as_str() {
            "lambda1" => m.lambda1 = v,
            "lambda2" => m.lambda2 = v,
            _ => return Err(Failure::Usage(format!("cannot sweep `{param}`; use lambda1 or lambda2"))),
        }
        m.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let prep = prepare(&cfg)?;
    let rows = run_sweep::<f64>(&cfg, &prep, &param, &values)?;
    for (v, r) in &rows {
        println!("param={param} value={v} {}", r.to_kv());
    }
    let table = sweep_table(&rows);
    eprint!("{table}");
    if let Some(o) = &cfg.paths.out {
        write_file(&o.join(format!("sweep_{param}.tsv")), &table)?;
    }
    Ok(())
}

fn gradcheck(c: &Common, samples: usize, corrupt: bool) -> Outcome {
    let (text, _) = read_config(&c.config)?;
    let (config, seed) = parse_gradcheck_config(&text)?;
    let opts = GradCheckOptions {
        samples_per_block: samples,
        corrupt,
        ..Default::default()
    };
    let report = model_gradcheck(config, c.seed.unwrap_or(seed), &opts)?;
    for b in &report.blocks {
        println!("block={} max_rel_err={:e} checked={}", b.name, b.max_rel_err, b.checked);
    }
    let ok = report.passed(GRADCHECK_TOL);
    println!("max_rel_err={:e} blocks={} passed={ok}", report.worst(), report.blocks.len());
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Train(c) => train(c),
        Command::Eval { checkpoint, data, out } => eval(checkpoint, data, out.as_deref()),
        Command::Ablate {
            common,
            variants,
            seeds,
        } => ablate(common, variants.as_deref(), seeds.as_deref()),
        Command::Sweep { common, param, values } => sweep(common, param.clone(), values.as_deref()),
        Command::Gradcheck {
            common,
            samples,
            corrupt_gradient,
        } => gradcheck(common, *samples, *corrupt_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
