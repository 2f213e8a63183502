mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "clover-forge", version, about = "Build, check and score pathology VQA instruction data")]
pub struct Cli {
    /// TOML config file (overrides $CLOVER_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a caption manifest, merge captions and apply the length filter.
    Ingest(IngestArgs),
    /// One template instruction per corpus record.
    GenTemplate(GenTemplateArgs),
    /// Generation-based QA instructions through the configured backend.
    GenQa(GenQaArgs),
    /// Check QA text or an instruction file against the content rules.
    Lint(LintArgs),
    /// Union of a generation and a template dataset.
    Assemble(AssembleArgs),
    /// Disjoint equal-size subsets of a dataset.
    SplitSubsets(SplitArgs),
    /// Seeded sample of a dataset.
    SampleScale(SampleArgs),
    /// Score VQA predictions.
    EvalVqa(EvalArgs),
    /// Metric divided by log10 of trainable parameters in millions.
    CostRatio(CostRatioArgs),
    /// K-shot WSI-level splits of a patch manifest.
    FewshotSplit(FewshotArgs),
    /// Render patches as closed VQA items.
    ToVqa(ToVqaArgs),
    /// Run the loss and gradient property suite.
    KernelCheck(KernelCheckArgs),
    /// Projected generation cost for a corpus.
    CostEstimate(CostEstimateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub manifest: PathBuf,
    /// Defaults to the file extension.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, default_value_t = clover_core::corpus::DEFAULT_MIN_WORDS)]
    pub min_words: usize,
    /// Keep a seeded sample of this many records after filtering.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Defaults to `paths.corpus`, else `<out>/corpus.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTemplateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Defaults to `paths.templates`, else the bundled bank.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenQaArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Print prompt envelopes instead of calling the backend.
    #[arg(long)]
    pub dry_run: bool,
    /// Build the envelope for this caption (dry run only).
    #[arg(long, requires = "dry_run")]
    pub caption: Option<String>,
    /// Mock fixture directory; overrides `paths.fixtures`.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// JSONL of `{user, assistant}` examples; overrides `paths.fewshot`.
    #[arg(long)]
    pub fewshot: Option<PathBuf>,
    /// Overrides `budget_usd`.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,
    #[arg(long)]
    pub lenient: bool,
    /// Process only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LintArgs {
    /// QA text, or an instruction JSONL file.
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub generation: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolarityArg {
    YesNo,
    PositiveNegative,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of evaluation examples.
    pub examples: PathBuf,
    /// Overrides `metrics.polarity`.
    #[arg(long, value_enum)]
    pub polarity: Option<PolarityArg>,
    /// Trainable parameters; adds cost-effectiveness ratios.
    #[arg(long)]
    pub params: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CostRatioArgs {
    /// Metric in percent.
    #[arg(long, allow_negative_numbers = true)]
    pub metric: f64,
    /// Trainable parameter count.
    #[arg(long)]
    pub params: u64,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub patches: PathBuf,
    /// Text file of test WSI ids.
    #[arg(long)]
    pub test_wsis: PathBuf,
    #[arg(long)]
    pub organ: String,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = clover_core::clinical_fewshot::DEFAULT_REPLICATES)]
    pub replicates: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PartArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct ToVqaArgs {
    /// Patch manifest CSV or a split JSONL.
    pub input: PathBuf,
    /// Which side of a split file to render.
    #[arg(long, value_enum, default_value = "test")]
    pub part: PartArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KernelCheckArgs {
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CostEstimateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Mean completion tokens per request.
    #[arg(long, conflicts_with = "receipts")]
    pub completion_tokens: Option<u64>,
    /// Take the mean completion tokens from an earlier run's receipts.
    #[arg(long)]
    pub receipts: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// A problem with how the command was invoked rather than with its inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        config.paths.output_dir = Some(dir);
    }
    commands::dispatch(cli.command, &config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
