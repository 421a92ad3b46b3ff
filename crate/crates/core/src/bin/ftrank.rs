use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ftrank::corpus::{self, Dataset, LabelSchema, Ratio, SamplerConfig};
use ftrank::filtering::{self, Difficulty, ScoreTable};
use ftrank::pipeline::{self, BackendKind, DemoStrategy, Inputs, MockKind, Mode, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "ftrank", version, about = "Adaptive filter-then-rerank for few-shot information extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build few-shot training splits or downsampled test sets.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Validate (and optionally ensemble) filter score files.
    Ingest(IngestArgs),
    /// Pick the routing threshold on the validation set.
    Tune(ConfigArgs),
    /// Run the configured mode and write reports.
    Run(ConfigArgs),
    /// Rebuild report files from a finished run's decisions.
    Report(ReportArgs),
    /// Run the cumulative ablation ladder.
    Ablate(ConfigArgs),
}

#[derive(Subcommand)]
enum SampleCmd {
    /// Greedy K-shot sampling with negative balancing and a validation split.
    Kshot(KshotArgs),
    /// Downsample a test set while keeping every label present.
    Test(TestArgs),
}

#[derive(Args)]
struct KshotArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative sentences per positive sentence, e.g. `1:1`.
    #[arg(long, default_value = "1:1")]
    negative_ratio: String,
    /// Skip adding negative sentences.
    #[arg(long)]
    no_negatives: bool,
    #[arg(long)]
    out_train: PathBuf,
    /// Also carve out a validation split.
    #[arg(long)]
    out_valid: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    target: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Further score files to average with `--scores`.
    #[arg(long, num_args = 1..)]
    ensemble_with: Vec<PathBuf>,
    /// Threshold used for the hard-sample count.
    #[arg(long, default_value_t = 0.6)]
    tau: f64,
    /// Write the validated (or ensembled) table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `paths.output`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

/// Command-line overrides of config keys.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    demo_count: Option<usize>,
    #[arg(long, value_parser = ["random", "embedding"])]
    demo_strategy: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Use the mock backend with this policy.
    #[arg(long, value_parser = ["oracle", "first_choice", "fixed_text", "noisy"])]
    mock: Option<String>,
    #[arg(long)]
    no_cot: bool,
    #[arg(long)]
    no_demo: bool,
    #[arg(long)]
    no_label_filter: bool,
    #[arg(long)]
    no_adaptive: bool,
    /// Tune with a gold-answer reranker instead of the LLM.
    #[arg(long)]
    tune_oracle: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), PipelineError> {
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>()?;
        }
        if let Some(t) = self.tau {
            cfg.router.tau = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.demo_count {
            cfg.demo_count = k;
        }
        if let Some(s) = &self.demo_strategy {
            cfg.demo_strategy = if s == "embedding" {
                DemoStrategy::Embedding
            } else {
                DemoStrategy::Random
            };
        }
        if let Some(o) = &self.output {
            cfg.paths.output = Some(o.clone());
        }
        if let Some(m) = &self.mock {
            cfg.llm.backend = BackendKind::Mock;
            cfg.llm.mock.policy = serde_json::from_value::<MockKind>(serde_json::Value::String(m.clone()))
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        cfg.ablations.cot &= !self.no_cot;
        cfg.ablations.demo &= !self.no_demo;
        cfg.ablations.label_filter &= !self.no_label_filter;
        cfg.ablations.adaptive &= !self.no_adaptive;
        cfg.tune_oracle |= self.tune_oracle;
        cfg.validate()
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(path)?;
    o.apply(&mut cfg)?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    cfg.paths
        .output
        .clone()
        .ok_or_else(|| PipelineError::Config("paths.output (or --output) is required".into()))
}

fn sample_kshot(a: &KshotArgs) -> Result<(), PipelineError> {
    let schema = LabelSchema::load(&a.schema)?;
    let full = Dataset::load(&a.dataset, &schema)?;
    let cfg = SamplerConfig {
        negative_ratio: a.negative_ratio.parse::<Ratio>()?,
        ..SamplerConfig::new(a.k, a.seed)
    };
    let mut sampled = corpus::greedy_kshot_sample(&full, &cfg)?;
    if !a.no_negatives {
        sampled = corpus::balance_negatives(&sampled, &full, &cfg)?;
    }
    let train = match &a.out_valid {
        Some(v) => {
            let (train, valid) = corpus::split_train_valid(&sampled, &cfg);
            valid.save(v)?;
            println!("valid: {} sentences -> {}", valid.len(), v.display());
            train
        }
        None => sampled,
    };
    train.save(&a.out_train)?;
    println!("train: {} sentences -> {}", train.len(), a.out_train.display());
    for (label, n) in train.label_counts() {
        println!("  {label}\t{n}");
    }
    Ok(())
}

fn sample_test(a: &TestArgs) -> Result<(), PipelineError> {
    let schema = LabelSchema::load(&a.schema)?;
    let full = Dataset::load(&a.dataset, &schema)?;
    let out = corpus::downsample_test(&full, a.target, a.seed)?;
    out.save(&a.out)?;
    println!("test: {} of {} sentences -> {}", out.len(), full.len(), a.out.display());
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<(), PipelineError> {
    let schema = LabelSchema::load(&a.schema)?;
    let mut tables = vec![filtering::ingest_scores(&a.scores, &schema)?];
    for p in &a.ensemble_with {
        tables.push(filtering::ingest_scores(p, &schema)?);
    }
    let table: ScoreTable = if tables.len() == 1 {
        tables.pop().expect("one table")
    } else {
        filtering::ensemble(&tables)?
    };
    let n = table.len();
    let confs: Vec<f64> = table.records.values().map(filtering::confidence).collect();
    let hard = confs
        .iter()
        .filter(|c| filtering::difficulty_at(**c, a.tau) == Difficulty::Hard)
        .count();
    let mean = if n == 0 { 0.0 } else { confs.iter().sum::<f64>() / n as f64 };
    println!("records: {n}");
    println!("mean confidence: {mean:.4}");
    println!(
        "hard at tau={}: {hard} ({})",
        a.tau,
        ftrank::metrics::format_ratio(if n == 0 { 0.0 } else { hard as f64 / n as f64 })
    );
    if let Some(out) = &a.out {
        table.save(out)?;
        println!("written: {}", out.display());
    }
    Ok(())
}

fn tune(a: &ConfigArgs) -> Result<(), PipelineError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let inputs = Inputs::load(&cfg)?;
    let client = pipeline::build_client(&cfg, &inputs)?;
    let t = pipeline::tune(&cfg, &inputs, &client)?;
    if t.oracle {
        println!("note: tuned with the gold oracle reranker, not the LLM");
    }
    println!("tau\tf1\thard");
    for p in &t.sweep {
        println!("{:.2}\t{:.4}\t{}", p.tau, p.f1, p.hard);
    }
    println!("best tau: {}", t.tau);
    if let Some(dir) = &cfg.paths.output {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = dir.join("tune.json");
        let text = serde_json::to_string_pretty(&t).map_err(|e| PipelineError::Data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|source| PipelineError::Io { path, source })?;
    }
    Ok(())
}

fn run(a: &ConfigArgs) -> Result<(), PipelineError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let dir = output_dir(&cfg)?;
    let inputs = Inputs::load(&cfg)?;
    let client = pipeline::build_client(&cfg, &inputs)?;
    let out = pipeline::run(&cfg, &inputs, &client)?;
    pipeline::write_reports(&dir, &cfg, &out)?;
    print!("{}", pipeline::summary(&out));
    println!("reports: {}", dir.display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<(), PipelineError> {
    let cfg = RunConfig::load(&a.config)?;
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => output_dir(&cfg)?,
    };
    let schema = LabelSchema::load(cfg.paths.schema.as_ref().expect("validated"))?;
    let gold = Dataset::load(cfg.paths.dataset.as_ref().expect("validated"), &schema)?;
    let out = pipeline::regenerate_reports(&dir, &cfg, &gold)?;
    print!("{}", pipeline::summary(&out));
    Ok(())
}

fn ablate(a: &ConfigArgs) -> Result<(), PipelineError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let inputs = Inputs::load(&cfg)?;
    let client = pipeline::build_client(&cfg, &inputs)?;
    let rows = pipeline::ablate(&cfg, &inputs, &client)?;
    let table = pipeline::ablation_table(&rows);
    print!("{table}");
    if let Some(dir) = &cfg.paths.output {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = dir.join("ablation.tsv");
        std::fs::write(&path, table).map_err(|source| PipelineError::Io { path, source })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sample(SampleCmd::Kshot(a)) => sample_kshot(a),
        Command::Sample(SampleCmd::Test(a)) => sample_test(a),
        Command::Ingest(a) => ingest(a),
        Command::Tune(a) => tune(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
