//! `tmhfs` command-line tool: synthetic data generation, meta-training,
//! target-domain evaluation and report comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tmhfs::checkpoint;
use tmhfs::config::Config;
use tmhfs::episodes::{gen_synthetic, load_dataset, Dataset};
use tmhfs::eval::{compare, evaluate, write_records, EvalReport, Method};
use tmhfs::pipeline::{meta_train, ModelState};
use tmhfs::Error;

#[derive(Parser)]
#[command(name = "tmhfs", version, about = "Cross-domain few-shot learning with transductive multi-head prototypes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config with sections data, train, finetune, eval, augment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Derives every seed in the config from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output path (dataset root, checkpoint, report or comparison file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source and target datasets.
    GenData {
        /// Domain shift of the target dataset, in [0, 1].
        #[arg(long, value_parser = parse_shift)]
        shift: Option<f32>,
    },
    /// Meta-train on the source dataset and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on target-domain episodes.
    Eval {
        /// Skip fine-tuning and predict with the meta-trained model.
        #[arg(long)]
        no_finetune: bool,
        /// Fine-tune on augmented support sets and average branch predictions.
        #[arg(long)]
        augment: bool,
        /// Transduction iterations at test time.
        #[arg(long)]
        t_test: Option<usize>,
        /// Method name recorded in the report.
        #[arg(long, default_value = "tmhfs")]
        name: String,
    },
    /// Compare two reports over the same episodes.
    Compare { report_a: PathBuf, report_b: PathBuf },
}

fn parse_shift(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("shift {v} is outside [0, 1]"))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Corrupt { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn load_config(g: &Global) -> tmhfs::Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = g.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn require_dataset(root: &Path, what: &str) -> tmhfs::Result<Dataset> {
    if !root.join("meta.json").is_file() {
        return Err(Error::Config(format!(
            "{what} dataset not found at {} (run gen-data first)",
            root.display()
        )));
    }
    load_dataset(root)
}

fn gen_data(g: &Global, shift: Option<f32>) -> tmhfs::Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(s) = shift {
        cfg.data.target.domain_shift = s;
    }
    let (src_dir, tgt_dir) = match &g.out {
        Some(root) => (root.join("source"), root.join("target")),
        None => (cfg.data.source_dir.clone(), cfg.data.target_dir.clone()),
    };
    for (spec, dir) in [(&cfg.data.source, &src_dir), (&cfg.data.target, &tgt_dir)] {
        let ds = gen_synthetic(spec, dir)?;
        println!(
            "{}: {} classes, {} images -> {}",
            ds.name,
            ds.num_classes(),
            ds.num_samples(),
            dir.display()
        );
    }
    Ok(())
}

fn train(g: &Global) -> tmhfs::Result<()> {
    let cfg = load_config(g)?;
    let source = require_dataset(&cfg.data.source_dir, "source")?;
    let ckpt = g.out.clone().unwrap_or_else(|| cfg.eval.checkpoint.clone());
    let log_path = ckpt.with_extension("log.jsonl");
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut log = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log_err = None;
    let start = Instant::now();
    let model = ModelState::new(cfg.train.backbone, source.num_classes(), cfg.train.seed)?;
    let (model, _) = meta_train(model, &source, &cfg.train, |line| {
        eprintln!(
            "episode {:>6}  loss {:.4}  lr {}  ({:.0}s)",
            line.episode,
            line.mean_loss,
            line.lr,
            start.elapsed().as_secs_f64()
        );
        let json = serde_json::to_string(line).expect("log line serializes");
        if let Err(e) = writeln!(log, "{json}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e));
    }
    checkpoint::save(&model, &ckpt)?;
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn eval(g: &Global, no_finetune: bool, augment: bool, t_test: Option<usize>, name: &str) -> tmhfs::Result<()> {
    let mut cfg = load_config(g)?;
    if no_finetune {
        cfg.eval.finetune = false;
    }
    if augment {
        cfg.finetune.use_augmentation = true;
    }
    if let Some(t) = t_test {
        cfg.eval.t_test = t;
    }
    if let Some(out) = &g.out {
        cfg.eval.report = out.clone();
        cfg.eval.records = out.with_extension("jsonl");
    }
    let target = require_dataset(&cfg.data.target_dir, "target")?;
    let model = checkpoint::load(&cfg.eval.checkpoint)?;
    let method = Method {
        name: name.to_string(),
        finetune: cfg.eval.finetune,
        augment: cfg.finetune.use_augmentation,
        t: cfg.eval.t_test,
    };
    let jobs = g
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let records = evaluate(
        &model,
        &target,
        &cfg.eval,
        &cfg.finetune,
        &cfg.pipelines()?,
        std::slice::from_ref(&method),
        jobs,
    )?
    .remove(0);
    write_records(&cfg.eval.records, &records)?;
    let report = EvalReport::from_records(&method.name, &records, &cfg.hash())?;
    report.save(&cfg.eval.report)?;
    println!("{}: {}", report.method, report.summary());
    Ok(())
}

fn compare_reports(g: &Global, a: &Path, b: &Path) -> tmhfs::Result<()> {
    let ra = EvalReport::load(a)?;
    let rb = EvalReport::load(b)?;
    let cmp = compare(&ra, &rb)?;
    println!("{}: {}", ra.method, ra.summary());
    println!("{}: {}", rb.method, rb.summary());
    println!("delta: {}", cmp.summary());
    if let Some(out) = &g.out {
        let json = serde_json::to_string_pretty(&cmp)? + "\n";
        fs::write(out, json).map_err(|e| io_error(out, e))?;
    }
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn run(cli: Cli) -> tmhfs::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { shift } => gen_data(g, *shift),
        Command::Train => train(g),
        Command::Eval {
            no_finetune,
            augment,
            t_test,
            name,
        } => eval(g, *no_finetune, *augment, *t_test, name),
        Command::Compare { report_a, report_b } => compare_reports(g, report_a, report_b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
