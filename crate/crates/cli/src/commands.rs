use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use clover_core::clinical_fewshot::{self, FewShotSplit, Organ, PatchRecord};
use clover_core::corpus::{self, Corpus, ManifestFormat};
use clover_core::gen_forge::{
    self, build_prompt, default_system_prompt, estimate_prompt_tokens, load_fewshot, CompletionBackend,
    CostMeter, FewShotExample, GenerationOptions, GenerationReceipt, LiveBackend, MockBackend, QaPair,
    RetryPolicy,
};
use clover_core::instruction_store::{self, InstructionDataset};
use clover_core::template_forge::{self, Instruction, TemplateBank};
use clover_core::vqa_metrics::{self, EvalExample, Polarity};
use clover_core::{digest, jsonl, loss_kernel};

use crate::config::{BackendMode, Config, ConfigError};
use crate::{
    AssembleArgs, Command, CostEstimateArgs, CostRatioArgs, EvalArgs, FewshotArgs, FormatArg, GenQaArgs,
    GenTemplateArgs, IngestArgs, KernelCheckArgs, LintArgs, PartArg, PolarityArg, SampleArgs, SplitArgs,
    ToVqaArgs, UsageError,
};

pub fn dispatch(command: Command, config: &Config) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a, config),
        Command::GenTemplate(a) => gen_template(a, config),
        Command::GenQa(a) => gen_qa(a, config),
        Command::Lint(a) => lint(a, config),
        Command::Assemble(a) => assemble(a, config),
        Command::SplitSubsets(a) => split_subsets(a, config),
        Command::SampleScale(a) => sample_scale(a, config),
        Command::EvalVqa(a) => eval_vqa(a, config),
        Command::CostRatio(a) => cost_ratio(a),
        Command::FewshotSplit(a) => fewshot_split(a, config),
        Command::ToVqa(a) => to_vqa(a, config),
        Command::KernelCheck(a) => kernel_check(a, config),
        Command::CostEstimate(a) => cost_estimate(a, config),
    }
}

fn out_file(explicit: Option<PathBuf>, config: &Config, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| config.output_dir().join(name))
}

fn corpus_path(flag: Option<PathBuf>, config: &Config) -> Result<PathBuf> {
    Ok(flag
        .or_else(|| config.paths.corpus.clone())
        .ok_or(ConfigError::Missing("paths.corpus"))?)
}

fn load_corpus(path: &Path) -> Result<(Corpus, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let corpus = corpus::read_corpus(path)?;
    Ok((corpus, digest::sha256_hex(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    jsonl::write_atomic(path, format!("{text}\n").as_bytes())?;
    Ok(())
}

fn ingest(a: IngestArgs, config: &Config) -> Result<()> {
    let format = match a.format {
        Some(FormatArg::Jsonl) => ManifestFormat::Jsonl,
        Some(FormatArg::Csv) => ManifestFormat::Csv,
        None => ManifestFormat::from_path(&a.manifest),
    };
    if a.min_words == 0 {
        return Err(UsageError("--min-words must be at least 1".into()).into());
    }
    let (raw, stats) = corpus::ingest_manifest(&a.manifest, format)?;
    let mut kept = corpus::merge_and_filter(&raw, a.min_words)?;
    if let Some(size) = a.sample {
        kept = corpus::sample(&kept, size, config.seed)?;
    }
    let out = a.out.or_else(|| config.paths.corpus.clone());
    let out = out_file(out, config, "corpus.jsonl");
    corpus::write_corpus(&out, &kept)?;
    println!(
        "ingest: {} rows -> {} images ({} duplicate captions dropped), {} kept with >= {} words -> {}",
        stats.rows,
        raw.records.len(),
        stats.duplicate_captions_dropped,
        kept.records.len(),
        a.min_words,
        out.display()
    );
    Ok(())
}

fn gen_template(a: GenTemplateArgs, config: &Config) -> Result<()> {
    let (corpus, corpus_digest) = load_corpus(&corpus_path(a.corpus, config)?)?;
    let bank = match a.templates.or_else(|| config.paths.templates.clone()) {
        Some(path) => TemplateBank::from_file(&path)?,
        None => TemplateBank::default(),
    };
    let items = template_forge::build_template_instructions(&corpus, &bank, config.seed, &config.created_at)?;
    let mut ds = InstructionDataset::new(items)?.with_source_corpus(corpus_digest);
    ds.manifest.seed = Some(config.seed);
    let out = out_file(a.out, config, "template.jsonl");
    instruction_store::write_dataset(&out, &ds)?;
    println!(
        "gen-template: {} instructions from a bank of {} -> {}",
        ds.len(),
        bank.len(),
        out.display()
    );
    Ok(())
}

fn system_prompt(config: &Config) -> Result<String> {
    match &config.paths.system_prompt {
        Some(path) => Ok(std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .trim_end_matches(['\n', '\r'])
            .to_string()),
        None => Ok(default_system_prompt().to_string()),
    }
}

fn fewshot(flag: Option<PathBuf>, config: &Config) -> Result<Vec<FewShotExample>> {
    match flag.or_else(|| config.paths.fewshot.clone()) {
        Some(path) => Ok(load_fewshot(&path)?),
        None => Ok(Vec::new()),
    }
}

fn limited(mut corpus: Corpus, limit: Option<usize>) -> Corpus {
    if let Some(n) = limit {
        corpus.records.truncate(n);
    }
    corpus
}

fn gen_qa(a: GenQaArgs, config: &Config) -> Result<()> {
    let system = system_prompt(config)?;
    let examples = fewshot(a.fewshot, config)?;

    if a.dry_run {
        if let Some(caption) = &a.caption {
            if caption.trim().is_empty() {
                return Err(UsageError("--caption is empty".into()).into());
            }
            let envelope = build_prompt(&system, caption, &examples);
            println!("{}", serde_json::to_string_pretty(&envelope)?);
            return Ok(());
        }
        let (corpus, _) = load_corpus(&corpus_path(a.corpus, config)?)?;
        for record in limited(corpus, a.limit).records {
            let envelope = build_prompt(&system, &record.merged_caption, &examples);
            println!("{}", serde_json::to_string(&envelope)?);
        }
        return Ok(());
    }

    let (corpus, corpus_digest) = load_corpus(&corpus_path(a.corpus, config)?)?;
    let corpus = limited(corpus, a.limit);
    let rates = config.rates()?;
    let budget = a
        .budget
        .or(config.budget_usd)
        .ok_or(ConfigError::Missing("budget_usd"))?;
    let strict = if a.strict {
        true
    } else if a.lenient {
        false
    } else {
        config.strict_parse
    };

    let backend: Box<dyn CompletionBackend> = match config.backend.mode {
        BackendMode::Mock => {
            let dir = a
                .fixtures
                .or_else(|| config.paths.fixtures.clone())
                .ok_or(ConfigError::Missing("paths.fixtures"))?;
            if !dir.is_dir() {
                bail!("fixture directory {} does not exist", dir.display());
            }
            Box::new(MockBackend::from_dir(dir))
        }
        BackendMode::Live => Box::new(LiveBackend::from_env(
            &config.backend.endpoint,
            &config.backend.model,
            &config.backend.dialect,
        )?),
    };

    let out = out_file(a.out, config, "generation.jsonl");
    let stem = out.with_extension("");
    let opts = GenerationOptions {
        system_prompt: system,
        fewshot: examples,
        retry: RetryPolicy {
            max_retries: config.backend.max_retries,
            base_delay: std::time::Duration::from_millis(config.backend.base_delay_ms),
            max_delay: std::time::Duration::from_millis(config.backend.max_delay_ms),
        },
        strict,
        max_concurrency: config.backend.max_concurrency,
        model: Some(config.backend.model.clone()),
        created_at: config.created_at.clone(),
        checkpoint: Some(PathBuf::from(format!("{}.checkpoint.jsonl", stem.display()))),
        skip_log: Some(PathBuf::from(format!("{}.skips.jsonl", stem.display()))),
    };
    let meter = CostMeter::new(rates, budget, config.backend.max_completion_tokens)
        .with_prompt_margin(config.backend.prompt_margin);
    let run = gen_forge::generate_instructions(&corpus, backend.as_ref(), &meter, &opts)?;

    let ds = InstructionDataset::new(run.instructions.clone())?.with_source_corpus(corpus_digest);
    instruction_store::write_dataset(&out, &ds)?;
    let receipts_path = PathBuf::from(format!("{}.receipts.jsonl", stem.display()));
    jsonl::write(&receipts_path, &run.receipts)?;
    for w in &run.warnings {
        log::warn!("{w}");
    }
    let halt = match &run.halted {
        Some(h) => format!(
            "; halted at {} with {} records left (rerun to resume)",
            h.image_id, h.remaining
        ),
        None => String::new(),
    };
    println!(
        "gen-qa: {} instructions, {} skipped, ${:.4} of ${:.2} budget -> {}{}",
        ds.len(),
        run.skipped.len(),
        run.total_cost_usd(),
        budget,
        out.display(),
        halt
    );
    Ok(())
}

#[derive(Serialize)]
struct LintLine<'a> {
    source: String,
    #[serde(flatten)]
    violation: &'a gen_forge::Violation,
}

fn lint(a: LintArgs, config: &Config) -> Result<()> {
    let groups: Vec<(String, Vec<QaPair>)> = if a.input.extension().is_some_and(|e| e == "jsonl") {
        let items: Vec<Instruction> = jsonl::read(&a.input)?;
        items
            .into_iter()
            .map(|i| {
                let pairs = i
                    .turns
                    .into_iter()
                    .map(|t| QaPair {
                        question: t.question,
                        answer: t.answer,
                    })
                    .collect();
                (i.instruction_id, pairs)
            })
            .collect()
    } else {
        let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let parsed = gen_forge::parse_qa(&text, false)?;
        vec![(a.input.display().to_string(), parsed.pairs)]
    };
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for (source, pairs) in &groups {
        reports.push((source.clone(), gen_forge::lint_qa(pairs)));
    }
    for (source, report) in &reports {
        for v in &report.violations {
            lines.push(LintLine {
                source: source.clone(),
                violation: v,
            });
        }
    }
    let out = config.output_dir().join("lint.jsonl");
    jsonl::write(&out, &lines)?;
    let dirty = reports.iter().filter(|(_, r)| !r.is_clean()).count();
    println!(
        "lint: {} violations in {} of {} inputs -> {}",
        lines.len(),
        dirty,
        groups.len(),
        out.display()
    );
    Ok(())
}

fn assemble(a: AssembleArgs, config: &Config) -> Result<()> {
    let generation = instruction_store::read_dataset(&a.generation)?;
    let template = instruction_store::read_dataset(&a.template)?;
    let ds = instruction_store::assemble_hybrid(&generation, &template)?;
    let out = out_file(a.out, config, "hybrid.jsonl");
    instruction_store::write_dataset(&out, &ds)?;
    println!(
        "assemble: {} + {} -> {} instructions -> {}",
        generation.len(),
        template.len(),
        ds.len(),
        out.display()
    );
    Ok(())
}

fn split_subsets(a: SplitArgs, config: &Config) -> Result<()> {
    let ds = instruction_store::read_dataset(&a.dataset)?;
    if a.k == 0 {
        return Err(UsageError("--k must be at least 1".into()).into());
    }
    let subsets = instruction_store::split_subsets(&ds, a.k, config.seed)?;
    let dir = config.output_dir();
    let mut sizes = Vec::new();
    for (i, s) in subsets.iter().enumerate() {
        instruction_store::write_dataset(&dir.join(format!("subset_{}.jsonl", i + 1)), s)?;
        sizes.push(s.len().to_string());
    }
    println!(
        "split-subsets: {} items -> {} subsets of [{}] in {}",
        ds.len(),
        subsets.len(),
        sizes.join(", "),
        dir.display()
    );
    Ok(())
}

fn sample_scale(a: SampleArgs, config: &Config) -> Result<()> {
    let ds = instruction_store::read_dataset(&a.dataset)?;
    let sample = instruction_store::sample_scale(&ds, a.size, config.seed)?;
    let out = out_file(a.out, config, &format!("sample_{}.jsonl", a.size));
    instruction_store::write_dataset(&out, &sample)?;
    println!("sample-scale: {} of {} -> {}", sample.len(), ds.len(), out.display());
    Ok(())
}

fn polarity(flag: Option<PolarityArg>, config: &Config) -> Result<Polarity> {
    Ok(match flag {
        Some(PolarityArg::YesNo) => Polarity::yes_no(),
        Some(PolarityArg::PositiveNegative) => Polarity::positive_negative(),
        None => match config.metrics.polarity.as_str() {
            "yes-no" => Polarity::yes_no(),
            "positive-negative" => Polarity::positive_negative(),
            other => {
                return Err(ConfigError::Invalid {
                    key: "metrics.polarity",
                    message: format!("'{other}' is not yes-no or positive-negative"),
                }
                .into())
            }
        },
    })
}

#[derive(Serialize)]
struct Ratios {
    trainable_params: u64,
    closed_accuracy: Option<f64>,
    open_recall: Option<f64>,
    precision: Option<f64>,
    f1: Option<f64>,
}

fn eval_vqa(a: EvalArgs, config: &Config) -> Result<()> {
    let examples: Vec<EvalExample> = jsonl::read(&a.examples)?;
    let report = vqa_metrics::evaluate(&examples, &polarity(a.polarity, config)?)?;
    print!("{}", vqa_metrics::render_table(&report));
    let ratios = match a.params {
        Some(params) => {
            let r = |v: Option<f64>| -> Result<Option<f64>> {
                Ok(match v {
                    Some(x) => Some(vqa_metrics::cost_ratio(x, params)?),
                    None => None,
                })
            };
            let ratios = Ratios {
                trainable_params: params,
                closed_accuracy: r(report.closed_accuracy_pct)?,
                open_recall: r(report.open_recall_pct)?,
                precision: r(report.precision_pct)?,
                f1: r(report.f1_pct)?,
            };
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
            println!(
                "cost ratios: closed {} open {} precision {} f1 {}",
                fmt(ratios.closed_accuracy),
                fmt(ratios.open_recall),
                fmt(ratios.precision),
                fmt(ratios.f1)
            );
            Some(ratios)
        }
        None => None,
    };
    let out = config.output_dir().join("metrics.json");
    write_json(
        &out,
        &serde_json::json!({ "report": report, "cost_ratios": ratios }),
    )?;
    println!("eval-vqa: {} examples scored -> {}", examples.len(), out.display());
    Ok(())
}

fn cost_ratio(a: CostRatioArgs) -> Result<()> {
    let r = vqa_metrics::cost_ratio(a.metric, a.params).map_err(|e| UsageError(e.to_string()))?;
    println!("{r:.2}");
    Ok(())
}

fn fewshot_split(a: FewshotArgs, config: &Config) -> Result<()> {
    let organ: Organ = a.organ.parse().map_err(UsageError)?;
    if a.k == 0 || a.replicates == 0 {
        return Err(UsageError("--k and --replicates must be at least 1".into()).into());
    }
    let patches = clinical_fewshot::ingest_patches(&a.patches)?;
    let tests = clinical_fewshot::read_test_manifest(&a.test_wsis)?;
    let splits = clinical_fewshot::make_kshot(&patches, organ, a.k, &tests, config.seed, a.replicates)?;
    let dir = config.output_dir().join("fewshot");
    let written = clinical_fewshot::write_splits(&dir, &splits)?;
    println!(
        "fewshot-split: {organ} k={} x{} replicates, {} test WSIs / {} test patches -> {} files in {}",
        a.k,
        splits.len(),
        splits[0].test_wsis.len(),
        splits[0].test_patches.len(),
        written.len(),
        dir.display()
    );
    Ok(())
}

fn to_vqa(a: ToVqaArgs, config: &Config) -> Result<()> {
    let patches: Vec<PatchRecord> = if a.input.extension().is_some_and(|e| e == "jsonl") {
        let splits: Vec<FewShotSplit> = jsonl::read(&a.input)?;
        splits
            .into_iter()
            .flat_map(|s| match a.part {
                PartArg::Train => s.train_patches,
                PartArg::Test => s.test_patches,
            })
            .collect()
    } else {
        clinical_fewshot::ingest_patches(&a.input)?
    };
    let records = clinical_fewshot::to_vqa(&patches);
    let out = out_file(a.out, config, "vqa.jsonl");
    jsonl::write(&out, &records)?;
    println!("to-vqa: {} records -> {}", records.len(), out.display());
    Ok(())
}

fn kernel_check(a: KernelCheckArgs, config: &Config) -> Result<()> {
    let report = loss_kernel::kernel_check(config.seed);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            println!(
                "{} {:<42} cases={:<5} max_err={:.3e} tol={:.0e}{}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.max_error,
                c.tolerance,
                c.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
            );
        }
    }
    let out = config.output_dir().join("kernel_check.json");
    write_json(&out, &report)?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("kernel-check: {failed} of {} checks failed", report.checks.len());
    }
    println!("kernel-check: all {} checks passed", report.checks.len());
    Ok(())
}

#[derive(Serialize)]
struct Estimate {
    records: usize,
    prompt_tokens: u64,
    mean_completion_tokens: f64,
    expected_usd: f64,
    worst_case_usd: f64,
    budget_usd: Option<f64>,
}

fn cost_estimate(a: CostEstimateArgs, config: &Config) -> Result<()> {
    let (corpus, _) = load_corpus(&corpus_path(a.corpus, config)?)?;
    let corpus = limited(corpus, a.limit);
    let rates = config.rates()?;
    let system = system_prompt(config)?;
    let examples = fewshot(None, config)?;
    let max_out = config.backend.max_completion_tokens;
    let mean_completion = match (&a.completion_tokens, &a.receipts) {
        (Some(n), _) => *n as f64,
        (None, Some(path)) => {
            let receipts: Vec<GenerationReceipt> = jsonl::read(path)?;
            if receipts.is_empty() {
                bail!("{} holds no receipts", path.display());
            }
            receipts.iter().map(|r| r.completion_tokens as f64).sum::<f64>() / receipts.len() as f64
        }
        (None, None) => max_out as f64,
    };
    let prompt_tokens: u64 = corpus
        .records
        .iter()
        .map(|r| estimate_prompt_tokens(&build_prompt(&system, &r.merged_caption, &examples)))
        .sum();
    let n = corpus.records.len() as f64;
    let expected = prompt_tokens as f64 * rates.in_per_1k / 1000.0 + n * mean_completion * rates.out_per_1k / 1000.0;
    let worst = rates.cost(prompt_tokens, 0) + n * rates.cost(0, max_out);
    let budget = a.budget.or(config.budget_usd);
    let est = Estimate {
        records: corpus.records.len(),
        prompt_tokens,
        mean_completion_tokens: mean_completion,
        expected_usd: expected,
        worst_case_usd: worst,
        budget_usd: budget,
    };
    let out = config.output_dir().join("cost_estimate.json");
    write_json(&out, &est)?;
    let verdict = match budget {
        Some(b) if expected <= b => format!(", within ${b:.2}"),
        Some(b) => format!(", over ${b:.2}"),
        None => String::new(),
    };
    println!(
        "cost-estimate: {} records, expected ${:.4} (worst case ${:.4}){}",
        est.records, expected, worst, verdict
    );
    Ok(())
}
