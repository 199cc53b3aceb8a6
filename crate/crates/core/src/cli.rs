//! Command-line interface. The `qmbias` binary is a thin wrapper around [`main_with`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gateway::{GenerationGateway, RecordCache};
use crate::orchestrator::{
    check_paraphrase_set, generate_paraphrases, load_paraphrase_file, plan_from_config, run,
    statement_of, write_paraphrase_file, BackendKind, Condition, ParaphraseRequest, ResultSet,
    RunConfig, RunDir, RunOptions, RunStatus,
};
use crate::prompt::{render_raw, ConversationTurn};
use crate::report::{correlate_reports, emit_reports, ReportOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INCOMPLETE: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "qmbias", version, about = "Measure political-question bias of language models by questionnaire modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Master seed; replaces every per-condition seed with a derived one.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the backend kind from the config (openai, synthetic, stub, replay).
    #[arg(long)]
    backend: Option<BackendKind>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.override_seed(seed);
        }
        if let Some(kind) = self.backend {
            config.backend.kind = kind;
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the corpus and print counts, yes-means and majority baselines.
    ValidateData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Build the query manifest without contacting a backend.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write every rendered prompt to this JSON file.
        #[arg(long)]
        dump_prompts: Option<PathBuf>,
    },
    /// Execute a run, resuming from any checkpoint in the run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Shared query cache; defaults to <run-dir>/cache.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Stop after this many newly resolved queries.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Skip writing reports after a complete run.
        #[arg(long)]
        no_report: bool,
    },
    /// Generate or validate paraphrase sets.
    Paraphrase {
        #[command(subcommand)]
        action: ParaphraseAction,
    },
    /// Write metric tables and plot data for a completed run.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory; defaults to <run-dir>/reports.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail when a target has no leaning annotation.
        #[arg(long)]
        require_axis: bool,
    },
    /// Correlate absolute bias with PA over targets pooled from several reports.
    Correlate {
        #[arg(long, default_value = "qm")]
        condition: Condition,
        /// metrics.json files, typically one per model.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ParaphraseAction {
    /// Ask the configured chat backend for paraphrases of each target statement.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to paraphrase.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Check that each target has a duplicate-free set of the configured size.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Exit status for an error: configuration and usage problems get their own code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MissingLeaning(_) => EXIT_USAGE,
        Error::Incomplete { .. } => EXIT_INCOMPLETE,
        _ => EXIT_ERROR,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::ValidateData { config } => validate_data(&config.load()?, out),
        Command::Plan {
            config,
            dump_prompts,
        } => plan_cmd(&config.load()?, dump_prompts.as_deref(), out),
        Command::Run {
            config,
            run_dir,
            parallelism,
            cache_dir,
            stop_after,
            no_report,
        } => {
            let config = config.load()?;
            let options = RunOptions {
                parallelism,
                cache_dir,
                stop_after,
            };
            run_cmd(&config, &run_dir, &options, !no_report, out)
        }
        Command::Paraphrase { action } => match action {
            ParaphraseAction::Generate {
                config,
                out: dir,
                cache_dir,
            } => {
                let seed = config.seed;
                paraphrase_generate(&config.load()?, seed, dir, cache_dir, out)
            }
            ParaphraseAction::Validate { config } => paraphrase_validate(&config.load()?, out),
        },
        Command::Report {
            config,
            run_dir,
            out: dir,
            require_axis,
        } => {
            let config = config.load()?;
            let dir = dir.unwrap_or_else(|| RunDir::open(&run_dir).reports());
            report_cmd(&config, &run_dir, &dir, require_axis, out)
        }
        Command::Correlate { condition, metrics } => {
            let c = correlate_reports(&metrics, condition)?;
            writeln!(
                out,
                "n={} r={:.4} df={} t={:.4} p={:.4e}",
                c.n, c.r, c.df, c.t_statistic, c.p_value
            )
            .map_err(stdout_err)?;
            Ok(EXIT_OK)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn validate_data(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (matrix, report) = config.load_corpus()?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(stdout_err);
    w(
        out,
        format!(
            "{} respondents ({} filtered), {} questions, {} missing cells",
            report.respondents, report.filtered_respondents, report.questions, report.missing_cells
        ),
    )?;
    w(out, "target_id,n,human_yes_mean,majority_baseline".into())?;
    for id in config.target_ids(&matrix)? {
        let mean = matrix.human_yes_mean(&id)?;
        let base = matrix.majority_baseline(&id)?;
        w(
            out,
            format!("{id},{},{:.4},{:.4}", mean.n, mean.mean, base.accuracy),
        )?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DumpedPrompt<'a> {
    index: usize,
    condition: Condition,
    #[serde(skip_serializing_if = "Option::is_none")]
    respondent_id: Option<&'a str>,
    target_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<usize>,
    canonical_hash: &'a str,
    turns: &'a [ConversationTurn],
    #[serde(skip_serializing_if = "Option::is_none")]
    raw: Option<String>,
}

fn plan_cmd(config: &RunConfig, dump: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let plan = plan_from_config(config)?;
    let m = &plan.manifest;
    writeln!(out, "run {}: {} entries", m.header.run_id, m.entries.len()).map_err(stdout_err)?;
    let pairs = plan.matrix().respondents().len() * m.header.targets.len();
    writeln!(out, "{pairs} respondent-target pairs before dropping missing gold answers")
        .map_err(stdout_err)?;
    for (condition, target, n) in m.counts() {
        writeln!(out, "  {condition} {target}: {n}").map_err(stdout_err)?;
    }
    if let Some(path) = dump {
        let rendered = m
            .entries
            .iter()
            .map(|e| plan.render(e))
            .collect::<Result<Vec<_>>>()?;
        let dumped = m
            .entries
            .iter()
            .zip(&rendered)
            .map(|(e, p)| {
                Ok(DumpedPrompt {
                    index: e.index,
                    condition: e.condition,
                    respondent_id: e.respondent_id.as_deref(),
                    target_id: &e.target_id,
                    variant: e.variant,
                    canonical_hash: p.canonical_hash(),
                    turns: p.turns(),
                    raw: p.template_id().map(|t| render_raw(p, t)).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bytes = serde_json::to_vec_pretty(&dumped)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        writeln!(out, "prompts written to {}", path.display()).map_err(stdout_err)?;
    }
    Ok(EXIT_OK)
}

fn run_cmd(
    config: &RunConfig,
    run_dir: &Path,
    options: &RunOptions,
    with_report: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    match run(config, run_dir, options)? {
        RunStatus::Complete(results) => {
            writeln!(out, "complete: {} results", results.entries.len()).map_err(stdout_err)?;
            if with_report {
                let (matrix, _) = config.load_corpus()?;
                let dir = RunDir::open(run_dir).reports();
                emit_reports(&results, &matrix, &dir, &ReportOptions::default())?;
                writeln!(out, "reports written to {}", dir.display()).map_err(stdout_err)?;
            }
            Ok(EXIT_OK)
        }
        RunStatus::Incomplete(rem) => {
            writeln!(
                out,
                "incomplete: {} of {} queries unresolved ({} errors); rerun to resume",
                rem.unresolved.len(),
                rem.total,
                rem.errors.len()
            )
            .map_err(stdout_err)?;
            Ok(EXIT_INCOMPLETE)
        }
    }
}

fn report_cmd(
    config: &RunConfig,
    run_dir: &Path,
    out_dir: &Path,
    require_axis: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let results = ResultSet::read(&RunDir::open(run_dir).results())?;
    let (matrix, _) = config.load_corpus()?;
    let bundle = emit_reports(&results, &matrix, out_dir, &ReportOptions { require_axis })?;
    writeln!(
        out,
        "{} results over {} condition(s); reports written to {}",
        bundle.entries,
        bundle.conditions.len(),
        out_dir.display()
    )
    .map_err(stdout_err)?;
    Ok(EXIT_OK)
}

fn paraphrase_dir(config: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| config.paraphrase.dir.as_ref().map(|d| config.resolve_path(d)))
        .ok_or_else(|| Error::Config("no paraphrase directory: pass --out or set paraphrase.dir".into()))
}

fn paraphrase_generate(
    config: &RunConfig,
    seed: Option<u64>,
    dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<i32> {
    let dir = paraphrase_dir(config, dir)?;
    let seed = seed
        .or_else(|| config.seeds.get(&Condition::ParaphraseStudy).copied())
        .ok_or_else(|| Error::Config("paraphrase generation needs --seed or seeds.paraphrase_study".into()))?;
    let (matrix, _) = config.load_corpus()?;
    let mut gateway = GenerationGateway::new(config.backend.build_generator()?)
        .with_retry(config.backend.retry);
    if let Some(c) = cache_dir {
        gateway = gateway.with_cache(RecordCache::open(c)?);
    }
    for target in config.target_ids(&matrix)? {
        let statement = statement_of(&matrix.question(&target)?.text).to_string();
        let request = ParaphraseRequest {
            count: config.paraphrase.count,
            seed: crate::seeding::derive_seed(seed, &["paraphrase", &target]),
            ..Default::default()
        };
        let set = generate_paraphrases(&gateway, &statement, &request)?;
        let path = dir.join(format!("{target}.txt"));
        write_paraphrase_file(&path, &set.paraphrases)?;
        writeln!(
            out,
            "{target}: {} generated, {} unique, {} kept -> {}",
            set.generated,
            set.survivors,
            set.paraphrases.len(),
            path.display()
        )
        .map_err(stdout_err)?;
    }
    Ok(EXIT_OK)
}

fn paraphrase_validate(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let dir = paraphrase_dir(config, None)?;
    let (matrix, _) = config.load_corpus()?;
    let mut ok = true;
    for target in config.target_ids(&matrix)? {
        let path = dir.join(format!("{target}.txt"));
        let check = match load_paraphrase_file(&path) {
            Ok(set) => check_paraphrase_set(&target, &set, Some(config.paraphrase.count)),
            Err(e) => {
                ok = false;
                writeln!(out, "{target}: {e}").map_err(stdout_err)?;
                continue;
            }
        };
        ok &= check.ok();
        let status = if check.ok() { "ok".to_string() } else { check.problems.join("; ") };
        writeln!(out, "{target}: {} paraphrases, {status}", check.count).map_err(stdout_err)?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_ERROR })
}
