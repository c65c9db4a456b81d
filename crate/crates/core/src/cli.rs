//! Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage
//! error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analytics::report::emit_report;
use crate::analytics::TestRegistry;
use crate::perplexity::ContextualMode;
use crate::pipeline::{self, LoopKind, Role, Session};
use crate::prompting::{Condition, ExpressionKind};
use crate::run::{Config, Overrides, RunLayout};

#[derive(Debug, Parser)]
#[command(
    name = "storysense",
    version,
    about = "Story and rule elicitation, perplexity reduction, QA and self-training"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory holding manifest.json, cache/, artifacts/ and report/.
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    /// Endpoint id serving this command's model role.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stories or rules generated per question [default: 5].
    #[arg(long, global = true)]
    pub n_stories: Option<usize>,
    /// Word shuffles averaged per perplexity reduction [default: 10].
    #[arg(long, global = true)]
    pub n_shuffles: Option<usize>,
    /// Percentage of helpful stories kept per iteration [default: 50].
    #[arg(long, global = true)]
    pub k: Option<f64>,
    /// Self-training iterations [default: 3].
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Answering temperature [default: 0].
    #[arg(long, global = true)]
    pub temperature_answer: Option<f64>,
    /// Directory with mock fixtures and script.json.
    #[arg(long, global = true)]
    pub mock_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a dataset file into the unified question format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// unified-jsonl, csqa-source, arc-source or copa-source.
        #[arg(long, default_value = "unified-jsonl")]
        format: String,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Draw a seeded sample of questions.
    Sample {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Generate stories or rules for every question.
    Elicit {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        kind: ExpressionKind,
    },
    /// Judge one expression per question for commonsense.
    Judge {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        kind: ExpressionKind,
    },
    /// Perplexity reduction of each expression.
    Pr {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        kind: ExpressionKind,
    },
    /// Perplexity reduction with only the context shuffled.
    ContextualPr {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        kind: ExpressionKind,
        /// literal or conditional; defaults to the config value.
        #[arg(long)]
        mode: Option<ContextualMode>,
    },
    /// Answer questions under one condition.
    Answer {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        condition: Condition,
    },
    /// Commonsense and similarity scores for every story.
    Score {
        #[arg(long)]
        dataset: String,
    },
    /// Iterative self-training.
    Selfsft {
        #[command(subcommand)]
        action: SelfSftCommand,
    },
    /// Write report tables from the run directory.
    Report {
        /// paired-t or wilcoxon; defaults to the config value.
        #[arg(long)]
        test: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SelfSftCommand {
    /// Top-K% filtered loop.
    Run {
        /// Seen dataset; repeat for several. Defaults to selfsft.seen_datasets.
        #[arg(long)]
        dataset: Vec<String>,
    },
    /// One round keeping every helpful story.
    Naive {
        #[arg(long)]
        dataset: Vec<String>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            n_stories: self.n_stories,
            n_shuffles: self.n_shuffles,
            k: self.k,
            iterations: self.iterations,
            temperature_answer: self.temperature_answer,
            mock_dir: self.mock_dir.clone(),
        }
    }

    pub fn resolve_config(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command {
    fn role(&self) -> Option<Role> {
        match self {
            Self::Elicit { .. } | Self::Selfsft { .. } => Some(Role::Generator),
            Self::Judge { .. } => Some(Role::Judge),
            Self::Pr { .. } | Self::ContextualPr { .. } => Some(Role::Lm),
            Self::Answer { .. } => Some(Role::Answerer),
            Self::Score { .. } => Some(Role::Scorer),
            Self::Ingest { .. } | Self::Sample { .. } | Self::Report { .. } => None,
        }
    }
}

fn show(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let run = g
        .run
        .clone()
        .ok_or_else(|| UsageError("--run <DIR> is required".into()))?;
    let layout = RunLayout::new(run);
    let config = g.resolve_config()?;

    if let Command::Report { test } = &cli.command {
        let name = test.clone().unwrap_or_else(|| config.paired_test.clone());
        let registry = TestRegistry::default();
        let t = registry.get(&name)?;
        let mut s = Session::open(layout, config)?;
        let written = emit_report(&s.layout, t)?;
        s.record("report", serde_json::json!({"test": name}), &[], &written, None)?;
        show(&written);
        return Ok(());
    }

    let mut s = Session::open(layout, config)?;
    if let Some(id) = &g.endpoint {
        match cli.command.role() {
            Some(role) => s.override_role(role, id)?,
            None => log::warn!("--endpoint has no effect on this command"),
        }
    }
    match cli.command {
        Command::Ingest { input, format, dataset } => {
            show(&pipeline::ingest(&mut s, &input, &format, dataset.as_deref())?)
        }
        Command::Sample { dataset, n } => show(&[pipeline::sample(&mut s, &dataset, n)?]),
        Command::Elicit { dataset, kind } => show(&pipeline::elicit(&mut s, &dataset, kind)?),
        Command::Judge { dataset, kind } => show(&[pipeline::judge(&mut s, &dataset, kind)?]),
        Command::Pr { dataset, kind } => show(&[pipeline::pr(&mut s, &dataset, kind)?]),
        Command::ContextualPr { dataset, kind, mode } => {
            let mode = mode.unwrap_or(s.config.contextual_mode);
            show(&[pipeline::contextual(&mut s, &dataset, kind, mode)?])
        }
        Command::Answer { dataset, condition } => show(&[pipeline::answer_stage(&mut s, &dataset, condition)?]),
        Command::Score { dataset } => show(&[pipeline::score(&mut s, &dataset)?]),
        Command::Selfsft { action } => {
            let (kind, datasets) = match action {
                SelfSftCommand::Run { dataset } => (LoopKind::Ranked, dataset),
                SelfSftCommand::Naive { dataset } => (LoopKind::Naive, dataset),
            };
            for st in pipeline::selfsft(&mut s, kind, &datasets)? {
                println!(
                    "iteration {}: model {} examples {} train {:.4} eval {:.4}",
                    st.iteration,
                    st.model_ref,
                    st.train_example_count,
                    st.mean_total_score_train,
                    st.mean_total_score_eval
                );
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    log::info!("backend calls: {}", s.backend_calls());
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!(
                "error: {e}\n\n{}",
                <Cli as clap::CommandFactory>::command().render_usage()
            );
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(dispatch(["storysense", "frobnicate"]), 2);
        assert_eq!(
            dispatch([
                "storysense",
                "answer",
                "--dataset",
                "x",
                "--condition",
                "base",
                "--bogus"
            ]),
            2
        );
        assert_eq!(
            dispatch([
                "storysense",
                "answer",
                "--dataset",
                "x",
                "--condition",
                "sideways",
                "--run",
                "r"
            ]),
            2
        );
        assert_eq!(dispatch(["storysense", "sample", "--dataset", "x"]), 2);
    }

    #[test]
    fn domain_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        let run = run.to_str().unwrap();
        assert_eq!(
            dispatch(["storysense", "pr", "--run", run, "--dataset", "csqa", "--kind", "story"]),
            1
        );
        assert_eq!(dispatch(["storysense", "report", "--run", run, "--k", "0"]), 1);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(dispatch(["storysense", "--help"]), 0);
    }
}
