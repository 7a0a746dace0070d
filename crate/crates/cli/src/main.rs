use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvqa_core::data::{
    load_checkpoint, load_dataset, make_synthetic_corpus, parse_record, read_records, save_checkpoint, FeatureStore,
    SynthSpec, Tagging,
};
use tvqa_core::gradcheck::{gradcheck, GradcheckShape};
use tvqa_core::model::GroupInput;
use tvqa_core::session::{train, TrainingData};
use tvqa_core::tape::OpTag;
use tvqa_core::text::PosCategory;
use tvqa_core::training::evaluate;
use tvqa_core::{Model, RunConfig};

#[derive(Parser)]
#[command(name = "tvqa", version, about = "Triplet-attention multiple-choice VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score one group read from standard input.
    Predict(PredictArgs),
    /// Write attention maps of one group as CSV and PGM files.
    AttnDump(AttnDumpArgs),
    /// Generate the planted synthetic corpus.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; defaults to the synthetic preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Validation groups; without it the tail of --data is held out.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Tag untagged tokens with the built-in lexicon tagger.
    #[arg(long)]
    lexicon_tagger: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    lexicon_tagger: bool,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Group `id`, or `line<N>` for records without one.
    #[arg(long)]
    group_id: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    lexicon_tagger: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 400)]
    groups: usize,
    /// Leading groups written to train.jsonl; the rest go to val.jsonl.
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    answers: usize,
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Break the backward rule of one operation (negative control).
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

enum Failure {
    Core(tvqa_core::Error),
    Usage(String),
    Check(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Usage(_) => "usage",
            Failure::Check(_) => "check",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl From<tvqa_core::Error> for Failure {
    fn from(e: tvqa_core::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(tvqa_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn tagging(lexicon: bool) -> Tagging {
    if lexicon {
        Tagging::Lexicon
    } else {
        Tagging::Given
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::synthetic(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_seed_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    cfg.data = Some(path_str(&a.data));
    cfg.features = Some(path_str(&a.features));
    if let Some(v) = &a.val_data {
        cfg.val_data = Some(path_str(v));
    }
    if let Some(e) = &a.embeddings {
        cfg.embeddings = Some(path_str(e));
    }
    let data = TrainingData::load(&cfg)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_fail(&log_path, e))?);
    let outcome = train(&cfg, &data, a.jobs, &mut log)?;
    log.flush().map_err(|e| io_fail(&log_path, e))?;
    save_checkpoint(&a.out, &outcome.best, Some(&outcome.best_adam))?;
    println!(
        "best_epoch\t{}\nval_accuracy\t{:.4}\nepochs\t{}\ncheckpoint\t{}\nlog\t{}",
        outcome.best_epoch,
        outcome.best_val_acc,
        outcome.history.len(),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?.model;
    let features = FeatureStore::load(&a.features)?;
    let groups = load_dataset(&a.data, &model.vocab, tagging(a.lexicon_tagger))?;
    let ev = evaluate(&model, &groups, &features, a.jobs)?;
    println!("accuracy\t{:.4}\t{}/{}", ev.accuracy(), ev.correct, ev.total);
    for (size, (correct, total)) in &ev.by_size {
        println!(
            "answers={size}\t{:.4}\t{correct}/{total}",
            *correct as f64 / *total as f64
        );
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let features = FeatureStore::load(&a.features)?;
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| io_fail(Path::new("<stdin>"), e))?;
    let record = parse_record(&text, "<stdin>")?;
    let (question, answers) = record.sentences(&model.vocab, tagging(a.lexicon_tagger))?;
    let scores = model.score(&GroupInput {
        grid: features.get(&record.image_id)?,
        question: &question,
        answers: &answers,
    })?;
    println!("choice\t{}", scores.choice);
    for (i, p) in scores.probs.iter().enumerate() {
        println!("{i}\t{p:.9}");
    }
    Ok(())
}

/// Binary greymap scaled so the largest weight is white.
fn pgm(values: &[f64], (rows, cols): (usize, usize)) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.12}")
    }
}

fn cmd_attn_dump(a: AttnDumpArgs) -> CliResult<()> {
    let model: Model = load_checkpoint(&a.checkpoint)?.model;
    let features = FeatureStore::load(&a.features)?;
    let record = read_records(&a.data)?
        .into_iter()
        .find(|(line, r)| r.id.clone().unwrap_or_else(|| format!("line{line}")) == a.group_id)
        .map(|(_, r)| r)
        .ok_or_else(|| Failure::Usage(format!("no group with id '{}' in {}", a.group_id, a.data.display())))?;
    let (question, answers) = record.sentences(&model.vocab, tagging(a.lexicon_tagger))?;
    let grid = features.get(&record.image_id)?;
    let (scores, maps) = model.inspect(&GroupInput {
        grid,
        question: &question,
        answers: &answers,
    })?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_fail(&a.out_dir, e))?;
    let (_, cols) = grid.grid_hw;
    for (i, m) in maps.iter().enumerate() {
        let mut csv = String::from("region_row,region_col,att_q,att_a,att_combined\n");
        for r in 0..m.combined.len() {
            csv += &format!(
                "{},{},{},{},{}\n",
                r / cols,
                r % cols,
                cell(m.att_q[r]),
                cell(m.att_a[r]),
                cell(m.combined[r])
            );
        }
        write_file(&a.out_dir.join(format!("candidate{i}.csv")), csv.as_bytes())?;
        for (suffix, values) in [("q", &m.att_q), ("a", &m.att_a), ("combined", &m.combined)] {
            if values.iter().all(|v| !v.is_nan()) {
                let path = a.out_dir.join(format!("candidate{i}_{suffix}.pgm"));
                write_file(&path, &pgm(values, grid.grid_hw))?;
            }
        }
    }
    let mut pos = String::from("category,weight\n");
    for (c, w) in PosCategory::ALL.iter().zip(model.params.pos_weights.data()) {
        pos += &format!("{},{w:.12}\n", c.name());
    }
    write_file(&a.out_dir.join("pos_weights.csv"), pos.as_bytes())?;
    println!("choice\t{}", scores.choice);
    for (i, p) in scores.probs.iter().enumerate() {
        println!("{i}\t{p:.9}");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if a.train >= a.groups {
        return Err(Failure::Usage(
            "--train must leave at least one validation group".into(),
        ));
    }
    let spec = SynthSpec {
        groups: a.groups,
        answers: a.answers,
        vocab_size: a.vocab,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let corpus = make_synthetic_corpus(&spec)?;
    corpus.write(&a.out_dir, a.train)?;
    let dir = std::fs::canonicalize(&a.out_dir).map_err(|e| io_fail(&a.out_dir, e))?;
    let cfg = format!(
        "preset=synthetic\nd_word={}\ndata={}\nval_data={}\nfeatures={}\nembeddings={}\n",
        spec.d_word,
        dir.join("train.jsonl").display(),
        dir.join("val.jsonl").display(),
        dir.join("features.fgrd").display(),
        dir.join("embeddings.txt").display()
    );
    write_file(&dir.join("synthetic.cfg"), cfg.as_bytes())?;
    println!(
        "groups\t{}\ntrain\t{}\nval\t{}\ndir\t{}",
        a.groups,
        a.train,
        a.groups - a.train,
        dir.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref(), &[])?;
    let fault = match &a.corrupt_op {
        Some(name) => Some(OpTag::parse(name).ok_or_else(|| Failure::Usage(format!("unknown operation '{name}'")))?),
        None => None,
    };
    let report = gradcheck(&cfg, a.seed.unwrap_or(cfg.seed), GradcheckShape::default(), fault)?;
    print!("{}", report.table());
    let failed = report.blocks.iter().filter(|b| !b.pass).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} parameter blocks failed",
            report.blocks.len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's message spans several lines; keep everything before the
            // usage block on one line.
            let rendered = e.to_string();
            let message: Vec<&str> = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("tvqa-error: usage: {}", message.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.to_string().replace('\n', " ");
            eprintln!("tvqa-error: {}: {msg}", f.kind());
            ExitCode::from(if matches!(f, Failure::Usage(_)) { 2 } else { 1 })
        }
    }
}
