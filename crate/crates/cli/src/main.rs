//! `nqa`: train, predict, evaluate, generate synthetic data, check gradients.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nqa_core::dataset::{
    corpus_tokens, generate_synthetic, load_features, load_qa_records, predict_records,
    split_by_agreement, training_sequences, write_qa_records, FeatureStore, QaRecord,
    SyntheticConfig,
};
use nqa_core::metrics::{Agreement, AnswerSet, ConsensusReferences, Taxonomy};
use nqa_core::qa_model::{AnswerMode, GradCheckCase, ModelConfig, QaModel, Trainer};
use nqa_core::text::Vocabulary;

use report::{EvalReport, GradCheckSummary, SplitReport};

#[derive(Parser, Debug)]
#[command(
    name = "nqa",
    version,
    about = "Recurrent question answering over image features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Answer every question of a corpus with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against the answers stored in a corpus.
    Eval(EvalArgs),
    /// Write a synthetic corpus, feature table and taxonomy.
    GenSynthetic(GenArgs),
    /// Compare analytic and finite-difference gradients on random tiny models.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Machine,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Feature table; required unless --language-only.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss log path (default: checkpoint path + ".loss.tsv").
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    language_only: bool,
    /// multi | single
    #[arg(long, default_value = "multi")]
    mode: AnswerMode,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    forbid_repeats: bool,
    /// Words seen fewer times map to the unknown token.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Ignored for language-only checkpoints.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions, one `id<TAB>word,word` per line.
    #[arg(long)]
    predictions: PathBuf,
    /// Corpus whose answers serve as references.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, requires = "lexicon")]
    taxonomy: Option<PathBuf>,
    #[arg(long, requires = "taxonomy")]
    lexicon: Option<PathBuf>,
    /// WUPS threshold; repeatable.
    #[arg(long = "threshold", default_values_t = [0.9, 0.0])]
    thresholds: Vec<f64>,
    /// Also report each agreement class separately.
    #[arg(long)]
    split_by_agreement: bool,
    /// Leave the canonical answer out of the consensus references.
    #[arg(long)]
    exclude_canonical: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    report: ReportFormat,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    num_records: usize,
    #[arg(long)]
    num_object_types: Option<usize>,
    #[arg(long)]
    num_colors: Option<usize>,
    #[arg(long)]
    max_count: Option<usize>,
    #[arg(long)]
    multi_color_prob: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of random configurations, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 10)]
    cases: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    report: ReportFormat,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<nqa_core::Error> for CliError {
    fn from(e: nqa_core::Error) -> Self {
        match e {
            nqa_core::Error::Training { .. } | nqa_core::Error::Oracle(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Input(m) => eprintln!("error: {m}"),
                CliError::Numeric(m) => eprintln!("numeric failure: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{what} {} is not a readable file",
            path.display()
        )))
    }
}

fn require_parent_dir(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::Input(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    require_file(&a.corpus, "corpus")?;
    let features_path = match (&a.features, a.language_only) {
        (_, true) => None,
        (Some(p), false) => {
            require_file(p, "feature table")?;
            Some(p)
        }
        (None, false) => {
            return Err(CliError::Input(
                "--features is required unless --language-only".into(),
            ))
        }
    };
    require_parent_dir(&a.checkpoint)?;
    let loss_log = a.loss_log.clone().unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(".loss.tsv");
        p.into()
    });
    require_parent_dir(&loss_log)?;

    let corpus = load_qa_records(&a.corpus)?;
    if corpus.records.is_empty() {
        return Err(CliError::Input(format!(
            "corpus {} has no records",
            a.corpus.display()
        )));
    }
    let features = features_path.map(|p| load_features(p)).transpose()?;
    let vocab = Vocabulary::build(&corpus_tokens(&corpus.records), a.min_count)?;

    let d = ModelConfig::default();
    let config = ModelConfig {
        embedding_dim: a.embedding_dim.unwrap_or(d.embedding_dim),
        hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
        feature_dim: features.as_ref().map_or(0, |f| f.dim()),
        mode: a.mode,
        use_image: features.is_some(),
        max_decode_len: a.max_decode_len.unwrap_or(d.max_decode_len),
        forbid_repeats: a.forbid_repeats,
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        momentum: a.momentum.unwrap_or(d.momentum),
        grad_clip: a.grad_clip.unwrap_or(d.grad_clip),
        init_scale: a.init_scale.unwrap_or(d.init_scale),
        seed: a.seed.unwrap_or(d.seed),
    };
    let sequences = training_sequences(&corpus.records, features.as_ref(), &vocab, a.mode)?;
    let mut model = QaModel::new(config, vocab)?;
    let mut trainer = Trainer::new(&model);

    let mut log = String::from("epoch\tmean_loss\texamples\tclipped\n");
    for _ in 0..a.epochs {
        let stats = trainer.train_epoch(&mut model, &sequences)?;
        eprintln!("epoch {:>4}  loss {:.6}", stats.epoch, stats.mean_loss);
        log.push_str(&format!(
            "{}\t{:e}\t{}\t{}\n",
            stats.epoch, stats.mean_loss, stats.examples, stats.clipped
        ));
    }
    model.save_checkpoint(&a.checkpoint)?;
    fs::write(&loss_log, log)?;
    if corpus.appended_question_marks > 0 {
        eprintln!(
            "note: appended \"?\" to {} questions",
            corpus.appended_question_marks
        );
    }
    Ok(())
}

/// `id<TAB>w1,w2` per record, in corpus order.
fn predictions_text(
    model: &QaModel,
    records: &[QaRecord],
    features: Option<&FeatureStore>,
) -> CliResult<String> {
    let mut out = String::new();
    for (r, words) in records
        .iter()
        .zip(predict_records(model, records, features)?)
    {
        out.push_str(&r.id);
        out.push('\t');
        out.push_str(&words.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn predict(a: PredictArgs) -> CliResult<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.corpus, "corpus")?;
    if let Some(out) = &a.out {
        require_parent_dir(out)?;
    }
    let model = QaModel::load_checkpoint(&a.checkpoint)?;
    let features = if model.config().use_image {
        let p = a.features.as_ref().ok_or_else(|| {
            CliError::Input("checkpoint uses image features; pass --features".into())
        })?;
        require_file(p, "feature table")?;
        Some(load_features(p)?)
    } else {
        None
    };
    let corpus = load_qa_records(&a.corpus)?;
    let text = predictions_text(&model, &corpus.records, features.as_ref())?;
    write_output(a.out.as_deref(), &text)
}

fn parse_predictions(text: &str, source: &str) -> CliResult<BTreeMap<String, AnswerSet>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = line.split_once('\t').ok_or_else(|| {
            CliError::Input(format!("{source}:{}: expected `id<TAB>answer`", i + 1))
        })?;
        if out
            .insert(id.to_string(), AnswerSet::parse(words))
            .is_some()
        {
            return Err(CliError::Input(format!(
                "{source}:{}: duplicate prediction id {id:?}",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn list_ids<'a>(ids: impl Iterator<Item = &'a String>) -> String {
    const SHOWN: usize = 20;
    let ids: Vec<&String> = ids.collect();
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", ... ({} in total)", ids.len()));
    }
    s
}

fn eval(a: EvalArgs) -> CliResult<()> {
    require_file(&a.predictions, "predictions")?;
    require_file(&a.corpus, "corpus")?;
    if let (Some(t), Some(l)) = (&a.taxonomy, &a.lexicon) {
        require_file(t, "taxonomy")?;
        require_file(l, "lexicon")?;
    }
    if let Some(out) = &a.out {
        require_parent_dir(out)?;
    }
    if let Some(t) = a.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::Input(format!("threshold {t} outside [0, 1]")));
    }
    let taxonomy = match (&a.taxonomy, &a.lexicon) {
        (Some(t), Some(l)) => Some(Taxonomy::load(t, l)?),
        _ => None,
    };
    let predictions = parse_predictions(
        &fs::read_to_string(&a.predictions)?,
        &a.predictions.display().to_string(),
    )?;
    let corpus = load_qa_records(&a.corpus)?;

    let reference_ids: BTreeSet<&String> = corpus.records.iter().map(|r| &r.id).collect();
    let missing: Vec<&String> = corpus
        .records
        .iter()
        .map(|r| &r.id)
        .filter(|id| !predictions.contains_key(*id))
        .collect();
    let unknown: Vec<&String> = predictions
        .keys()
        .filter(|id| !reference_ids.contains(id))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("prediction ids do not match reference ids");
        if !missing.is_empty() {
            msg.push_str(&format!(
                "\n  missing predictions: {}",
                list_ids(missing.into_iter())
            ));
        }
        if !unknown.is_empty() {
            msg.push_str(&format!(
                "\n  unknown prediction ids: {}",
                list_ids(unknown.into_iter())
            ));
        }
        return Err(CliError::Input(msg));
    }

    let score = |records: &[QaRecord]| -> CliResult<SplitReport> {
        if records.is_empty() {
            return Ok(SplitReport::empty());
        }
        let preds: Vec<AnswerSet> = records.iter().map(|r| predictions[&r.id].clone()).collect();
        let refs = ConsensusReferences::new(records.iter().map(QaRecord::answer_sets).collect())?;
        let consensus = if a.exclude_canonical {
            refs.excluding_canonical()
        } else {
            refs.clone()
        };
        Ok(SplitReport::evaluate(
            &preds,
            &refs,
            &consensus,
            taxonomy.as_ref(),
            &a.thresholds,
        )?)
    };

    let overall = score(&corpus.records)?;
    let splits = if a.split_by_agreement {
        let split = split_by_agreement(&corpus.records)?;
        Agreement::ALL
            .iter()
            .map(|&c| Ok((c, score(split.part(c))?)))
            .collect::<CliResult<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let report = EvalReport::new(a.thresholds.clone(), overall, splits);
    let text = match a.report {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Machine => report.to_json()?,
    };
    print!("{text}");
    if let Some(out) = &a.out {
        write_output(Some(out), &text)?;
    }
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> CliResult<()> {
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        num_records: a.num_records,
        num_object_types: a.num_object_types.unwrap_or(d.num_object_types),
        num_colors: a.num_colors.unwrap_or(d.num_colors),
        max_count: a.max_count.unwrap_or(d.max_count),
        multi_color_prob: a.multi_color_prob.unwrap_or(d.multi_color_prob),
        noise: a.noise,
        seed: a.seed,
        ..d
    };
    let data = generate_synthetic(&config)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let (taxonomy, lexicon) = data.taxonomy.to_text();
    let files = [
        ("corpus.jsonl", write_qa_records(&data.records)?),
        ("features.txt", data.features.to_text()),
        ("taxonomy.txt", taxonomy),
        ("lexicon.txt", lexicon),
    ];
    for (name, text) in files {
        let path = a.out.join(name);
        let mut f = BufWriter::new(
            fs::File::create(&path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        );
        f.write_all(text.as_bytes())?;
        f.flush()?;
    }
    eprintln!(
        "wrote {} records, {}-dimensional features to {}",
        data.records.len(),
        data.features.dim(),
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if a.cases == 0 {
        return Err(CliError::Input("--cases must be at least 1".into()));
    }
    let mut summary = GradCheckSummary::new(a.epsilon, a.tolerance);
    for seed in a.seed..a.seed + a.cases {
        let case = GradCheckCase::random(seed);
        let report = case.run(a.epsilon, a.tolerance)?;
        summary.push(case, &report);
    }
    let text = match a.report {
        ReportFormat::Table => summary.to_table(),
        ReportFormat::Machine => summary.to_json()?,
    };
    print!("{text}");
    if summary.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(summary.failure_message()))
    }
}
