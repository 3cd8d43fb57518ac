use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use wavekit::config::{FusionStrategy, RunConfig};
use wavekit::data::{generate_dataset, generate_eval_split, Dataset, EvalSplit, LatentSpec, SourceTag};
use wavekit::eval::{
    demo_inputs, evaluate_all, prompt_aware_demo, run_fusion_ablation, write_demo_csv, Direction, PromptMode,
    DEMO_PROMPTS, DEMO_TEXTS,
};
use wavekit::model::WaveModel;
use wavekit::train::{train, write_loss_trace};
use wavekit::WaveError;

/// Train and evaluate a tiny multimodal embedding model on synthetic data.
#[derive(Parser)]
#[command(name = "wavekit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record count override, e.g. `qa=512` or `retrieval=0`. Repeatable.
    #[arg(long = "count", value_name = "KEY=N", global = true)]
    counts: Vec<String>,
    /// Overrides `train.steps`.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Generate,
    /// Train a model; writes the checkpoint and loss trace.
    Train,
    /// Evaluate a checkpoint on the held-out pools.
    Eval {
        /// Checkpoint to evaluate [default: <out>/model.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every fusion strategy and tabulate V vs A+V retrieval.
    Ablate,
    /// Prompt-by-text similarity matrix for one held-out clip.
    Demo {
        /// Checkpoint to use [default: <out>/model.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the held-out QA clips.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(out) = &common.out {
        run.out_dir = out.clone();
    }
    if let Some(steps) = common.steps {
        run.train.steps = steps;
    }
    for spec in &common.counts {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| WaveError::Argument(format!("--count expects KEY=N, got `{spec}`")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| WaveError::Argument(format!("--count {key}: `{value}` is not a count")))?;
        run.data.counts.set(key.trim(), value)?;
    }
    run.validate()?;
    Ok(run)
}

fn io_err(path: &Path, source: std::io::Error) -> WaveError {
    WaveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates the run directory and writes the resolved config into it.
fn prepare_out(run: &RunConfig) -> Result<()> {
    let dir = &run.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, run.to_toml_string()).map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

fn load_or_generate(run: &RunConfig, spec: &LatentSpec) -> Result<Dataset> {
    match &run.data_path {
        Some(path) => {
            let d = Dataset::load(path)?;
            if d.header.seed != run.seed || d.header.data != run.data {
                bail!(WaveError::Argument(format!(
                    "{} was generated with a different seed or data config",
                    path.display()
                )));
            }
            Ok(d)
        }
        None => Ok(generate_dataset(spec, &run.data, run.objective.distractors, run.seed)?),
    }
}

fn eval_split(run: &RunConfig, spec: &LatentSpec) -> Result<EvalSplit> {
    Ok(generate_eval_split(spec, &run.data, run.objective.distractors, run.seed)?)
}

fn load_model(run: &RunConfig, checkpoint: Option<&Path>) -> Result<WaveModel> {
    let default = run.out_dir.join("model.ckpt");
    let path = checkpoint.unwrap_or(&default);
    let mut model = WaveModel::new(run.model.clone(), run.lora.clone(), run.seed)?;
    model.load(path)?;
    Ok(model)
}

fn cmd_generate(run: &RunConfig) -> Result<()> {
    let spec = LatentSpec::new(&run.data, run.seed)?;
    let dataset = generate_dataset(&spec, &run.data, run.objective.distractors, run.seed)?;
    prepare_out(run)?;
    let path = run.out_dir.join("dataset.jsonl");
    dataset.save(&path)?;
    for tag in SourceTag::RETRIEVAL.into_iter().chain([SourceTag::Qa]) {
        let n = dataset.count(tag);
        if n > 0 {
            println!("{:<10} {n}", tag.as_str());
        }
    }
    println!("wrote {} records to {}", dataset.records.len(), path.display());
    Ok(())
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let spec = LatentSpec::new(&run.data, run.seed)?;
    let dataset = load_or_generate(run, &spec)?;
    prepare_out(run)?;
    let out = train(run, &dataset, Some(&run.out_dir))?;
    let ckpt = run.out_dir.join("model.ckpt");
    out.model.save(&ckpt)?;
    let trace_path = run.out_dir.join("loss_trace.csv");
    write_loss_trace(&out.trace, create(&trace_path)?).map_err(|e| io_err(&trace_path, e))?;
    if let Some(last) = out.trace.last() {
        println!("step {} loss {:.4}", last.step, last.loss);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_eval(run: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(run, checkpoint)?;
    let spec = LatentSpec::new(&run.data, run.seed)?;
    let split = eval_split(run, &spec)?;
    let report = evaluate_all(&model, &split, run)?;
    prepare_out(run)?;
    let path = run.out_dir.join("report.json");
    fs::write(&path, report.to_json()).map_err(|e| io_err(&path, e))?;
    for dir in Direction::ALL {
        if let Some(m) = report.retrieval(dir) {
            println!(
                "{:<16} R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  (pool {}, chance {:.4})",
                dir.name(),
                m.r_at_1,
                m.r_at_5,
                m.r_at_10,
                m.pool_size,
                m.chance
            );
        }
    }
    for mode in [PromptMode::PerQuestion, PromptMode::CommonPrompt] {
        if let Some(q) = report.qa(mode) {
            println!("qa {:<14} accuracy {:.3}", format!("{mode:?}"), q.accuracy);
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(run: &RunConfig) -> Result<()> {
    let spec = LatentSpec::new(&run.data, run.seed)?;
    let dataset = load_or_generate(run, &spec)?;
    let split = eval_split(run, &spec)?;
    prepare_out(run)?;
    let table = run_fusion_ablation(run, &dataset, &split, &FusionStrategy::ALL)?;
    let path = run.out_dir.join("ablation.csv");
    table.write_csv(create(&path)?).map_err(|e| io_err(&path, e))?;
    for row in &table.rows {
        println!(
            "{:<14} {:<4} R@1 {:.3}  p = {:.2e}",
            row.strategy.name(),
            row.setting.name(),
            row.r_at_1,
            row.p_value
        );
    }
    for note in &table.notes {
        println!("note: {note}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_demo(run: &RunConfig, checkpoint: Option<&Path>, clip: usize) -> Result<()> {
    let model = load_model(run, checkpoint)?;
    let spec = LatentSpec::new(&run.data, run.seed)?;
    let split = eval_split(run, &spec)?;
    let record = split.qa.get(clip).ok_or_else(|| {
        WaveError::Argument(format!("--clip {clip} out of range ({} held-out clips)", split.qa.len()))
    })?;
    let (prompts, texts) = demo_inputs(&record.attrs, run.data.classes);
    let sim = prompt_aware_demo(&model, &record.source, &prompts, &texts)?;
    prepare_out(run)?;
    let path = run.out_dir.join("demo.csv");
    write_demo_csv(&sim, &DEMO_PROMPTS, &DEMO_TEXTS, create(&path)?).map_err(|e| io_err(&path, e))?;
    write_demo_csv(&sim, &DEMO_PROMPTS, &DEMO_TEXTS, std::io::stdout().lock())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let run = resolve(&cli.common)?;
    match cli.command {
        Command::Generate => cmd_generate(&run),
        Command::Train => cmd_train(&run),
        Command::Eval { checkpoint } => cmd_eval(&run, checkpoint.as_deref()),
        Command::Ablate => cmd_ablate(&run),
        Command::Demo { checkpoint, clip } => cmd_demo(&run, checkpoint.as_deref(), clip),
    }
}

/// 1 validation, 2 I/O, 3 numerical divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<WaveError>() {
            return match e {
                WaveError::Io { .. } => 2,
                WaveError::Divergence { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let _ = std::io::stderr().flush();
            ExitCode::from(exit_code(&err))
        }
    }
}

