//! `case`: one binary, subcommand per pipeline stage.
//!
//! Every subcommand reads an optional TOML run config (`--config`), applies
//! `--set key.path=value` overrides (flag wins), derives all randomness from
//! the single root seed, and writes a fully resolved copy of the config next
//! to whatever artifact it produces. Exit codes: 0 success, 1 runtime/data
//! error, 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;

use clap::{Parser, Subcommand, ValueEnum};

use case_core::autodiff::rng::{derive_seed, Rng};
use case_core::autodiff::{Tape, Tensor};
use case_core::baselines::{bench_csv, bench_inference, BenchRow, PersonalTop, TifuKnn};
use case_core::checkpoint::{self, CheckpointManifest};
use case_core::config::RunConfig;
use case_core::ingest::{
    ingest_csv, parse_day, read_history_file, split_users, write_history_file, CsvSchema,
    UserHistory, Vocab,
};
use case_core::metrics::{evaluate, EvalReport, Ranker};
use case_core::model::{
    case_forward, prepare_example, rank_candidates, score_example, CaseParams, CaseRanker,
};
use case_core::scalar::Scalar;
use case_core::signal::{build_examples, query_example, Example};
use case_core::synth::{generate, SynthSpec};
use case_core::train::train;
use case_core::{CaseError, Result};

#[derive(Parser)]
#[command(
    name = "case",
    version,
    about = "Cadence-aware set encoding for next-basket repurchase recommendation"
)]
struct Cli {
    /// TOML run config; every key has a default, flags override the file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Root seed; all per-module randomness is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Global cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    /// `day` column holds absolute integer days or calendar dates.
    Absolute,
    /// `days_since_prior_order` gaps per user order sequence.
    Gaps,
}

impl From<SchemaArg> for CsvSchema {
    fn from(s: SchemaArg) -> CsvSchema {
        match s {
            SchemaArg::Absolute => CsvSchema::Absolute,
            SchemaArg::Gaps => CsvSchema::Gaps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    PersonalTop,
    TifuKnn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    /// Every user in the data file, ignoring the split.
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a transaction CSV into the canonical history file.
    Ingest {
        /// Raw CSV path.
        #[arg(long)]
        input: PathBuf,
        /// Day encoding of the CSV (defaults to the config's data.csv.schema).
        #[arg(long, value_enum)]
        schema: Option<SchemaArg>,
        /// Canonical history file to write.
        #[arg(long)]
        out: PathBuf,
    },

    /// Train the scorer; writes per-epoch checkpoints, best.ckpt and the
    /// training log into --out.
    Train {
        /// Canonical history file.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Ablation: zero the cadence encodings (model.use_cnn=false).
        #[arg(long)]
        no_cnn: bool,
        /// Ablation: bypass the set encoder (model.use_set_encoder=false).
        #[arg(long)]
        no_set_encoder: bool,
        /// Ablation: zero the item embeddings (model.use_item_embedding=false).
        #[arg(long)]
        no_item_embedding: bool,
        /// Set-encoder variant (model.set_encoder).
        #[arg(long, value_enum)]
        set_encoder: Option<EncoderArg>,
    },

    /// Evaluate a checkpoint or a baseline under leave-one-out ranking.
    Eval {
        /// Canonical history file.
        #[arg(long)]
        data: PathBuf,
        /// Trained model to evaluate.
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Baseline ranker to evaluate instead of a checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Ranking cutoffs (defaults to eval.ks from the config).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// User split to evaluate on.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the report CSV here (stdout always gets it).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Rank one user's repurchase candidates as of an arbitrary day.
    Predict {
        /// Canonical history file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        /// Query day: integer day index or calendar date. Only purchases
        /// strictly before this day are visible.
        #[arg(long)]
        as_of_day: String,
        /// How many items to print.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },

    /// Generate the planted-cadence synthetic corpus.
    Synth {
        /// Standalone spec file (TOML, same keys as the synth.* config
        /// section); defaults to that section.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory (history.tsv + truth.csv).
        #[arg(long)]
        out: PathBuf,
    },

    /// Export per-candidate cadence encodings and set-contextualized rows
    /// as labeled CSVs (for external PCA/plotting).
    ExportEmb {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Canonical history file.
        #[arg(long)]
        data: PathBuf,
        /// Path prefix: writes {out}.c.csv and {out}.z.csv.
        #[arg(long)]
        out: PathBuf,
    },

    /// Time per-query inference of the scorer and TIFUKNN across growing
    /// neighbor-pool sizes on a synthetic corpus.
    Bench {
        /// Ascending train-population sizes.
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000")]
        populations: Vec<usize>,
        /// Number of query users timed per population.
        #[arg(long, default_value_t = 32)]
        queries: usize,
        /// Timing repeats per population (fastest wins).
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        /// Also write the timing CSV here (stdout always gets it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Isab,
    PermEqMean,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Cmd::Train {
        no_cnn,
        no_set_encoder,
        no_item_embedding,
        set_encoder,
        ..
    } = &cli.cmd
    {
        if *no_cnn {
            cfg.model.use_cnn = false;
        }
        if *no_set_encoder {
            cfg.model.use_set_encoder = false;
        }
        if *no_item_embedding {
            cfg.model.use_item_embedding = false;
        }
        if let Some(enc) = set_encoder {
            cfg.model.set_encoder = match enc {
                EncoderArg::Isab => case_core::model::SetEncoderKind::Isab,
                EncoderArg::PermEqMean => case_core::model::SetEncoderKind::PermEqMean,
            };
        }
    }
    if let (Cmd::Eval { ks: Some(ks), .. }, ks_slot) = (&cli.cmd, &mut cfg.eval.ks) {
        *ks_slot = ks.clone();
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    eprintln!("seed tree: root = {}", cfg.seed);
    for (label, s) in cfg.seed_tree() {
        eprintln!("  {label:<12} -> {s:016x}");
    }

    match cli.cmd {
        Cmd::Ingest { input, schema, out } => cmd_ingest(&mut cfg, &input, schema, &out),
        Cmd::Train { data, out, .. } => match cfg.precision.as_str() {
            "f64" => cmd_train::<f64>(&cfg, &data, &out),
            _ => cmd_train::<f32>(&cfg, &data, &out),
        },
        Cmd::Eval {
            data,
            checkpoint,
            baseline,
            split,
            out,
            ..
        } => cmd_eval(&cfg, &data, checkpoint.as_deref(), baseline, split, out.as_deref()),
        Cmd::Predict {
            data,
            checkpoint,
            user,
            as_of_day,
            k,
        } => cmd_predict(&cfg, &data, &checkpoint, &user, &as_of_day, k),
        Cmd::Synth { spec, out } => cmd_synth(&mut cfg, spec.as_deref(), &out),
        Cmd::ExportEmb {
            checkpoint,
            data,
            out,
        } => cmd_export_emb(&cfg, &checkpoint, &data, &out),
        Cmd::Bench {
            populations,
            queries,
            repeats,
            out,
        } => match cfg.precision.as_str() {
            "f64" => cmd_bench::<f64>(&cfg, &populations, queries, repeats, out.as_deref()),
            _ => cmd_bench::<f32>(&cfg, &populations, queries, repeats, out.as_deref()),
        },
    }
}

fn write_resolved_next_to(cfg: &RunConfig, artifact: &Path) -> Result<()> {
    let dir = artifact.parent().filter(|p| !p.as_os_str().is_empty());
    cfg.write_resolved(dir.unwrap_or(Path::new(".")))
}

fn cmd_ingest(
    cfg: &mut RunConfig,
    input: &Path,
    schema: Option<SchemaArg>,
    out: &Path,
) -> Result<()> {
    if let Some(s) = schema {
        cfg.data.csv.schema = s.into();
    }
    let (histories, summary) = ingest_csv(input, &cfg.data.csv)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_history_file(out, &histories)?;
    let summary_path = out.with_extension("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    write_resolved_next_to(cfg, out)?;
    println!("{summary}");
    eprintln!("wrote {} and {}", out.display(), summary_path.display());
    Ok(())
}

/// Splits users, builds leave-one-out examples per split. The vocabulary
/// covers the whole data file so evaluation-only items still have rows
/// (their embeddings simply stay at initialization).
struct LoadedData {
    vocab: Vocab,
    train: Vec<UserHistory>,
    val: Vec<UserHistory>,
    test: Vec<UserHistory>,
    all: Vec<UserHistory>,
}

fn load_and_split(cfg: &RunConfig, data: &Path) -> Result<LoadedData> {
    let histories = read_history_file(data)?;
    let vocab = Vocab::build(&histories);
    let mut split_rng = Rng::new(cfg.seed).fork("data.split");
    let (train, val, test) = split_users(
        histories.clone(),
        cfg.data.train_frac,
        cfg.data.val_frac,
        &mut split_rng,
    )?;
    eprintln!(
        "{}: {} users ({} train / {} val / {} test), {} items",
        data.display(),
        histories.len(),
        train.len(),
        val.len(),
        test.len(),
        vocab.len()
    );
    Ok(LoadedData {
        vocab,
        train,
        val,
        test,
        all: histories,
    })
}

fn examples_for(split: &[UserHistory], t: usize, cap_n: usize, what: &str) -> Vec<Example> {
    let (examples, stats) = build_examples(split, t, cap_n);
    if stats.skipped_no_candidates > 0 {
        eprintln!(
            "{what}: skipped {} of {} users without prior purchases",
            stats.skipped_no_candidates,
            split.len()
        );
    }
    examples
}

fn cmd_train<F: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let loaded = load_and_split(cfg, data)?;
    let train_ex = examples_for(&loaded.train, cfg.model.t, cfg.data.cap_n, "train split");
    let val_ex = examples_for(&loaded.val, cfg.model.t, cfg.data.cap_n, "val split");
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.fork("model.init");
    let mut params: CaseParams<F> =
        CaseParams::init(cfg.model.clone(), loaded.vocab.len(), &mut init_rng)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let outcome = train(
        &mut params,
        &train_ex,
        &val_ex,
        &loaded.vocab,
        &cfg.train,
        &root.fork("train"),
        Some(out),
    )?;
    println!(
        "best epoch {} ({} = {:.6}); checkpoints and log in {}",
        outcome.best_epoch,
        cfg.train.selection_metric,
        outcome.best_metric,
        out.display()
    );
    Ok(())
}

fn manifest_vocab_check(manifest: &CheckpointManifest, vocab: &Vocab) -> Result<()> {
    let got = format!("{:016x}", vocab.hash());
    if manifest.vocab_hash != got {
        return Err(CaseError::data(format!(
            "checkpoint was trained on vocabulary {} but this data file yields {} — wrong --data?",
            manifest.vocab_hash, got
        )));
    }
    Ok(())
}

fn eval_checkpoint_report<F: Scalar>(
    ckpt: &Path,
    vocab: &Vocab,
    examples: &[Example],
    ks: &[usize],
) -> Result<EvalReport> {
    let (params, _manifest) = checkpoint::load::<F>(ckpt)?;
    let ranker = CaseRanker::<F> { params: &params, vocab };
    evaluate(&ranker, examples, ks)
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    ckpt: Option<&Path>,
    baseline: Option<BaselineArg>,
    split: SplitArg,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_and_split(cfg, data)?;
    // Examples must match the window length the scorer was trained with.
    let t = match ckpt {
        Some(p) => checkpoint::peek_manifest(p)?.model.t,
        None => cfg.model.t,
    };
    let eval_split: &[UserHistory] = match split {
        SplitArg::Train => &loaded.train,
        SplitArg::Val => &loaded.val,
        SplitArg::Test => &loaded.test,
        SplitArg::All => &loaded.all,
    };
    let examples = examples_for(eval_split, t, cfg.data.cap_n, "eval split");
    let report = match (ckpt, baseline) {
        (Some(path), None) => {
            let manifest = checkpoint::peek_manifest(path)?;
            manifest_vocab_check(&manifest, &loaded.vocab)?;
            match manifest.dtype.as_str() {
                "f64" => eval_checkpoint_report::<f64>(path, &loaded.vocab, &examples, &cfg.eval.ks)?,
                "f32" => eval_checkpoint_report::<f32>(path, &loaded.vocab, &examples, &cfg.eval.ks)?,
                other => {
                    return Err(CaseError::data(format!(
                        "checkpoint dtype `{other}` is not supported"
                    )))
                }
            }
        }
        (None, Some(BaselineArg::PersonalTop)) => evaluate(&PersonalTop, &examples, &cfg.eval.ks)?,
        (None, Some(BaselineArg::TifuKnn)) => {
            let tifu = TifuKnn::fit(&loaded.train, eval_split, &loaded.vocab, cfg.tifu.clone())?;
            evaluate(&tifu, &examples, &cfg.eval.ks)?
        }
        _ => {
            return Err(CaseError::config(
                "eval needs exactly one of --checkpoint or --baseline",
            ))
        }
    };
    eprintln!("{report}");
    print!("{}", report.to_csv());
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, report.to_csv())?;
        write_resolved_next_to(cfg, path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn predict_scores<F: Scalar>(ckpt: &Path, vocab: &Vocab, ex: &Example) -> Result<Vec<f64>> {
    let (params, _) = checkpoint::load::<F>(ckpt)?;
    let prep = prepare_example::<F>(ex, vocab, &params.config, None)?;
    score_example(&params, &prep)
}

fn cmd_predict(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    user: &str,
    as_of_day: &str,
    k: usize,
) -> Result<()> {
    let histories = read_history_file(data)?;
    let vocab = Vocab::build(&histories);
    let manifest = checkpoint::peek_manifest(ckpt)?;
    manifest_vocab_check(&manifest, &vocab)?;
    let history = histories
        .iter()
        .find(|h| h.user == user)
        .ok_or_else(|| CaseError::data(format!("user `{user}` not in {}", data.display())))?;
    let day = parse_day(as_of_day).ok_or_else(|| {
        CaseError::config(format!(
            "--as-of-day `{as_of_day}` is neither an integer day nor a calendar date"
        ))
    })?;
    let ex = query_example(history, day, manifest.model.t, cfg.data.cap_n)?;
    let scores = match manifest.dtype.as_str() {
        "f64" => predict_scores::<f64>(ckpt, &vocab, &ex)?,
        "f32" => predict_scores::<f32>(ckpt, &vocab, &ex)?,
        other => {
            return Err(CaseError::data(format!(
                "checkpoint dtype `{other}` is not supported"
            )))
        }
    };
    eprintln!(
        "user {user}, day {day}: {} candidates from the trailing {}-day window",
        ex.n_candidates(),
        manifest.model.t
    );
    for (rank, idx) in rank_candidates(&ex, &scores, k).into_iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, ex.candidates[idx], scores[idx]);
    }
    Ok(())
}

fn cmd_synth(cfg: &mut RunConfig, spec_path: Option<&Path>, out: &Path) -> Result<()> {
    if let Some(p) = spec_path {
        cfg.synth = SynthSpec::load(p)?;
        cfg.synth.validate()?;
    }
    let (histories, truth) = generate(&cfg.synth, derive_seed(cfg.seed, "synth", &[]))?;
    std::fs::create_dir_all(out)?;
    let history_path = out.join("history.tsv");
    let truth_path = out.join("truth.csv");
    write_history_file(&history_path, &histories)?;
    truth.write_csv(&truth_path)?;
    cfg.write_resolved(out)?;
    let baskets: usize = histories.iter().map(|h| h.baskets.len()).sum();
    println!(
        "{} users, {} baskets over {} days -> {} and {}",
        histories.len(),
        baskets,
        cfg.synth.horizon_days,
        history_path.display(),
        truth_path.display()
    );
    Ok(())
}

fn export_rows<F: Scalar>(
    ckpt: &Path,
    vocab: &Vocab,
    examples: &[Example],
    out: &Path,
) -> Result<()> {
    use std::io::Write;
    let (params, _) = checkpoint::load::<F>(ckpt)?;
    let c_path = PathBuf::from(format!("{}.c.csv", out.display()));
    let z_path = PathBuf::from(format!("{}.z.csv", out.display()));
    let d_c = params.config.d_c;
    let d_h = params.config.d_h;
    let mut c_file = if params.config.use_cnn {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&c_path)?);
        write!(f, "user,item,label")?;
        for j in 0..d_c {
            write!(f, ",c{j}")?;
        }
        writeln!(f)?;
        Some(f)
    } else {
        eprintln!("cadence branch is ablated in this checkpoint; skipping {}", c_path.display());
        None
    };
    let mut z_file = std::io::BufWriter::new(std::fs::File::create(&z_path)?);
    write!(z_file, "user,item,label")?;
    for j in 0..d_h {
        write!(z_file, ",z{j}")?;
    }
    writeln!(z_file)?;

    let write_vec = |f: &mut std::io::BufWriter<std::fs::File>,
                     ex: &Example,
                     i: usize,
                     row: &[F]|
     -> Result<()> {
        write!(f, "{},{},{}", ex.user, ex.candidates[i], ex.labels[i])?;
        for v in row {
            write!(f, ",{:.6}", v.as_f64())?;
        }
        writeln!(f)?;
        Ok(())
    };

    for ex in examples {
        let prep = prepare_example::<F>(ex, vocab, &params.config, None)?;
        let tape: Tape<F> = Tape::new();
        let staged = params.stage(&tape)?;
        let art = case_forward(&tape, &staged, &params.config, &prep, 0.0, None, false)?;
        let encoded: Rc<Tensor<F>> = tape.value(art.encoded);
        let cadence = art.cadence.map(|id| tape.value(id));
        for i in 0..ex.n_candidates() {
            if let (Some(f), Some(c)) = (c_file.as_mut(), cadence.as_ref()) {
                write_vec(f, ex, i, &c.data()[i * d_c..(i + 1) * d_c])?;
            }
            write_vec(&mut z_file, ex, i, &encoded.data()[i * d_h..(i + 1) * d_h])?;
        }
    }
    if c_file.is_some() {
        eprintln!("wrote {}", c_path.display());
    }
    eprintln!("wrote {}", z_path.display());
    Ok(())
}

fn cmd_export_emb(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let histories = read_history_file(data)?;
    let vocab = Vocab::build(&histories);
    let manifest = checkpoint::peek_manifest(ckpt)?;
    manifest_vocab_check(&manifest, &vocab)?;
    let examples = examples_for(&histories, manifest.model.t, cfg.data.cap_n, "export");
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    match manifest.dtype.as_str() {
        "f64" => export_rows::<f64>(ckpt, &vocab, &examples, out)?,
        "f32" => export_rows::<f32>(ckpt, &vocab, &examples, out)?,
        other => {
            return Err(CaseError::data(format!(
                "checkpoint dtype `{other}` is not supported"
            )))
        }
    }
    write_resolved_next_to(cfg, out)?;
    Ok(())
}

fn cmd_bench<F: Scalar>(
    cfg: &RunConfig,
    populations: &[usize],
    queries: usize,
    repeats: usize,
    out: Option<&Path>,
) -> Result<()> {
    if queries == 0 {
        return Err(CaseError::config("bench needs at least one query user"));
    }
    let max_pop = *populations
        .iter()
        .max()
        .ok_or_else(|| CaseError::config("bench needs at least one population size"))?;
    let mut spec = cfg.synth.clone();
    spec.n_users = max_pop + queries;
    eprintln!(
        "generating {} synthetic users ({} pool + {} queries)",
        spec.n_users, max_pop, queries
    );
    let (histories, _truth) = generate(&spec, derive_seed(cfg.seed, "synth", &[]))?;
    let vocab = Vocab::build(&histories);
    let pool = &histories[..max_pop];
    let query_histories = &histories[max_pop..];
    let query_examples = examples_for(query_histories, cfg.model.t, cfg.data.cap_n, "bench queries");
    if query_examples.is_empty() {
        return Err(CaseError::data("no usable bench query examples"));
    }

    // An untrained scorer does exactly the same per-query work as a trained
    // one, and its cost is what the benchmark measures.
    let mut init_rng = Rng::new(cfg.seed).fork("model.init");
    let params: CaseParams<F> = CaseParams::init(cfg.model.clone(), vocab.len(), &mut init_rng)?;
    let k = 10;
    let mut rows: Vec<BenchRow> = bench_inference(
        "case",
        |_| {
            Ok(Box::new(CaseRanker::<F> {
                params: &params,
                vocab: &vocab,
            }) as Box<dyn Ranker>)
        },
        &query_examples,
        populations,
        k,
        repeats,
    )?;
    rows.extend(bench_inference(
        "tifu_knn",
        |p| {
            Ok(Box::new(TifuKnn::fit(
                &pool[..p],
                query_histories,
                &vocab,
                cfg.tifu.clone(),
            )?) as Box<dyn Ranker>)
        },
        &query_examples,
        populations,
        k,
        repeats,
    )?);
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &csv)?;
        write_resolved_next_to(cfg, path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
