use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kbqa_core::bfs::{bfs_search, SuccessReport};
use kbqa_core::kb::{load_kb_files, KnowledgeBase};
use kbqa_core::linker::InvertedIndex;
use kbqa_core::pipeline::config::Config;
use kbqa_core::pipeline::corpus::generate;
use kbqa_core::pipeline::dataset::{build_questions, entry_pools, load_dialogs, write_dialogs, Dialog};
use kbqa_core::pipeline::experiment::{predict, score_predictions, train_system, System};
use kbqa_core::pipeline::repl::Session;
use kbqa_core::scalar::Scalar;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "kbqa",
    version,
    about = "Conversational question answering over a knowledge base"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set experiment.train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic KB and train/test dialogs to the configured paths.
    GenCorpus,
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Build the entity index and report its size and ambiguity.
    BuildIndex {
        #[arg(long)]
        threshold: Option<usize>,
    },
    /// Recover gold programs for a dialog file from its answers alone.
    BfsSearch {
        #[arg(long)]
        buffer: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        /// Dialogs to search; defaults to the training file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output records; defaults to `<out_dir>/programs.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a system on the training dialogs and save a checkpoint.
    Train {
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Score a checkpoint on the test dialogs.
    Eval {
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        no_type_filter: bool,
    },
    /// Answer one question and list the ranked logical forms.
    Parse {
        question: String,
        /// Earlier utterances, oldest first.
        #[arg(long)]
        context: Vec<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        no_type_filter: bool,
    },
    /// Interactive session on standard input.
    Repl {
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        no_type_filter: bool,
    },
}

fn load_kb(cfg: &Config) -> Result<KnowledgeBase> {
    let d = &cfg.data;
    load_kb_files(&d.triples, &d.catalog)
        .with_context(|| format!("loading KB from {} and {}", d.triples.display(), d.catalog.display()))
}

fn read_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_dialogs(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_system(cfg: &Config, beam: Option<usize>, no_type_filter: bool) -> Result<System<f32>> {
    let path = &cfg.data.checkpoint;
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut sys = System::<f32>::load(BufReader::new(f))?;
    if let Some(b) = beam {
        sys.settings.beam.beam_size = b;
    }
    if no_type_filter {
        sys.settings.mode = sys.settings.mode.without_type_filter();
    }
    Ok(sys)
}

fn success_table(r: &SuccessReport) -> String {
    let width = r
        .per_type
        .keys()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max("Overall".len());
    let mut s = format!(
        "{:<width$}  {:>6}  {:>6}  {:>7}\n",
        "Question type", "found", "total", "ratio"
    );
    for (name, t) in r.per_type.iter().chain([(&"Overall".to_string(), &r.overall)]) {
        s += &format!("{:<width$}  {:>6}  {:>6}  {:>7.4}\n", name, t.found, t.total, t.ratio());
    }
    s
}

fn gen_corpus(cfg: &Config) -> Result<()> {
    let corpus = generate(&cfg.corpus)?;
    let d = &cfg.data;
    corpus.kb.write_triples(create(&d.triples)?)?;
    corpus.kb.write_catalog(create(&d.catalog)?)?;
    write_dialogs(create(&d.train)?, &corpus.train)?;
    write_dialogs(create(&d.test)?, &corpus.test)?;
    println!(
        "{} entities, {} triples, {} train dialogs, {} test dialogs",
        corpus.kb.num_entities(),
        corpus.kb.triples().len(),
        corpus.train.len(),
        corpus.test.len()
    );
    Ok(())
}

fn build_index(cfg: &Config, threshold: Option<usize>) -> Result<()> {
    let kb = load_kb(cfg)?;
    let threshold = threshold.unwrap_or(cfg.experiment.index_threshold);
    let t = Instant::now();
    let index = InvertedIndex::build(&kb, threshold);
    let stats = index.stats();
    println!("threshold         {threshold}");
    println!("entities          {}", kb.num_entities());
    println!("keys              {}", stats.keys);
    println!("entries           {}", stats.entries);
    println!("ambiguous keys    {}", stats.ambiguous_keys);
    println!("max candidates    {}", stats.max_candidates);
    println!("mean candidates   {:.3}", stats.mean_candidates);
    println!("built in          {:.2?}", t.elapsed());
    write_json(
        &cfg.data.out_dir.join("index_stats.json"),
        &json!({ "threshold": threshold, "entities": kb.num_entities(), "stats": stats }),
    )
}

fn search(cfg: &Config, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let kb = load_kb(cfg)?;
    let input = input.unwrap_or_else(|| cfg.data.train.clone());
    let output = output.unwrap_or_else(|| cfg.data.out_dir.join("programs.jsonl"));
    let dialogs = read_dialogs(&input)?;
    let qs = build_questions(&dialogs, &kb, &cfg.experiment.questions)?;
    let search = &cfg.experiment.search;
    let t = Instant::now();
    let mut w = create(&output)?;
    let mut outcomes = Vec::new();
    for q in qs.iter().filter(|q| q.answer.is_some()) {
        let res = bfs_search(&entry_pools(q, &kb), q.answer.as_ref().unwrap(), &kb, search);
        outcomes.push((q.question_type.clone(), res.best().is_some()));
        let record = json!({
            "id": q.id,
            "question_type": q.question_type,
            "program": res.best().map(|p| p.resolved.render(&kb)),
            "pointed": res.best().map(|p| p.pointed.render(&kb)),
            "alternatives": res.programs.len().saturating_sub(1),
            "spurious_risk": res.is_ambiguous(),
            "failure": res.failure,
            "work": res.work,
        });
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    w.flush()?;
    let report = SuccessReport::from_outcomes(outcomes);
    print!("{}", success_table(&report));
    println!("searched {} questions in {:.2?}", report.overall.total, t.elapsed());
    log::info!("wrote {}", output.display());
    write_json(&cfg.data.out_dir.join("search_report.json"), &report)
}

fn train_with<T: Scalar>(cfg: &Config) -> Result<()> {
    let kb = load_kb(cfg)?;
    let dialogs = read_dialogs(&cfg.data.train)?;
    let t = Instant::now();
    let (sys, report) = train_system::<T>(&dialogs, &kb, &cfg.experiment)?;
    println!(
        "mode {}, {} questions, search success {:.4}",
        cfg.experiment.mode.name(),
        report.questions,
        report.search.overall.ratio()
    );
    for (i, e) in report.parser.epochs.iter().enumerate() {
        println!("epoch {:>3}  loss {:.5}", i + 1, e.loss.total);
    }
    println!("trained in {:.1?}", t.elapsed());
    let mut w = create(&cfg.data.checkpoint)?;
    sys.save(&mut w)?;
    w.flush()?;
    println!("checkpoint {}", cfg.data.checkpoint.display());
    write_json(&cfg.data.out_dir.join("train_report.json"), &report)
}

fn eval(cfg: &Config, beam: Option<usize>, no_type_filter: bool) -> Result<()> {
    let kb = load_kb(cfg)?;
    let sys = load_system(cfg, beam, no_type_filter)?;
    let dialogs = read_dialogs(&cfg.data.test)?;
    let index = InvertedIndex::build(&kb, sys.settings.index_threshold);
    let t = Instant::now();
    let preds = predict(&sys, &kb, &index, &dialogs)?;
    let metrics = score_predictions(&preds);
    println!(
        "mode {}, beam {}",
        sys.settings.mode.name(),
        sys.settings.beam.beam_size
    );
    print!("{}", metrics.table());
    println!("evaluated {} questions in {:.1?}", preds.len(), t.elapsed());
    let mut w = create(&cfg.data.out_dir.join("predictions.jsonl"))?;
    for p in &preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w)?;
    }
    w.flush()?;
    write_json(
        &cfg.data.out_dir.join("metrics.json"),
        &json!({
            "mode": sys.settings.mode,
            "beam": sys.settings.beam.beam_size,
            "metrics": metrics,
        }),
    )
}

fn parse(cfg: &Config, question: &str, context: &[String], beam: Option<usize>, no_type_filter: bool) -> Result<()> {
    let kb = load_kb(cfg)?;
    let sys = load_system(cfg, beam, no_type_filter)?;
    let index = InvertedIndex::build(&kb, sys.settings.index_threshold);
    let q = &sys.settings.questions;
    let mut session = Session::new(sys.answerer(&kb, &index), &sys.vocab, q.history, q.max_input_len);
    for u in context {
        session.remember(u);
    }
    let r = session.ask(question);
    for (rank, h) in r.provenance.hypotheses.iter().enumerate() {
        let mark = if r.provenance.chosen == Some(rank) { "*" } else { " " };
        println!("{mark}{:>2}  {:>10.4}  {}", rank + 1, h.score, h.form);
    }
    print!("{}", session.describe(&r));
    Ok(())
}

fn repl(cfg: &Config, beam: Option<usize>, no_type_filter: bool) -> Result<()> {
    let kb = load_kb(cfg)?;
    let sys = load_system(cfg, beam, no_type_filter)?;
    let index = InvertedIndex::build(&kb, sys.settings.index_threshold);
    let q = &sys.settings.questions;
    let mut session = Session::new(sys.answerer(&kb, &index), &sys.vocab, q.history, q.max_input_len);
    eprintln!(
        "{} entities loaded; :reset clears history, :quit exits",
        kb.num_entities()
    );
    session.run(io::stdin().lock(), io::stdout().lock())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenCorpus => gen_corpus(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::BuildIndex { threshold } => build_index(&cfg, threshold),
        Command::BfsSearch {
            buffer,
            max_depth,
            input,
            output,
        } => {
            let mut cfg = cfg;
            if let Some(b) = buffer {
                cfg.experiment.search.buffer_size = b;
            }
            if let Some(d) = max_depth {
                cfg.experiment.search.max_depth = d;
            }
            search(&cfg, input, output)
        }
        Command::Train { precision } => match precision {
            Precision::F32 => train_with::<f32>(&cfg),
            Precision::F64 => train_with::<f64>(&cfg),
        },
        Command::Eval { beam, no_type_filter } => eval(&cfg, beam, no_type_filter),
        Command::Parse {
            question,
            context,
            beam,
            no_type_filter,
        } => {
            if question.trim().is_empty() {
                bail!("empty question");
            }
            parse(&cfg, &question, &context, beam, no_type_filter)
        }
        Command::Repl { beam, no_type_filter } => repl(&cfg, beam, no_type_filter),
    }
}
