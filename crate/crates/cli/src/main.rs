//! `xref`: synthetic data, reader training and evaluation, memory profiling,
//! finite-difference checks, relation extraction and chart building.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use xref_core::harness::commands as cmd;
use xref_core::harness::config::RunConfig;
use xref_core::harness::error_json;
use xref_core::Error;

#[derive(Parser, Debug)]
#[command(name = "xref", version, about = "Explicit-reference reader and PSPP chart pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set reader_train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-hop question set.
    GenWikihop {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        hops: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one reader variant (full, independent, oracle, naive).
    TrainReader {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Dev accuracy of a trained reader variant.
    EvalReader {
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Peak retained scalars of two-pass and naive training per paragraph count.
    Memprofile {
        /// Comma-separated paragraph counts, e.g. `1,2,4,8`.
        #[arg(long)]
        paragraphs: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Central-difference checks of every op and both tiny models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic materials corpus, lexicon and charts.
    GenReCorpus {
        #[arg(long)]
        signal_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Label sentence sets from the training charts.
    WeakLabel {
        #[command(flatten)]
        common: Common,
    },
    /// Train the relation CNN on weakly labeled sentences.
    TrainRe {
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every pair, write the PR curve over test-chart pairs.
    EvalRe {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy chart for target properties from the scored graph.
    BuildChart {
        /// Comma-separated target properties; all properties when omitted.
        #[arg(long)]
        properties: Option<String>,
        #[arg(short = 'n', long = "processes")]
        n: Option<usize>,
        #[arg(short = 'm', long = "structures")]
        m: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Corpus through chart; `--with-reader` also runs the reader chain.
    Pipeline {
        #[arg(long)]
        with_reader: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenWikihop { common, .. }
            | Command::TrainReader { common, .. }
            | Command::EvalReader { common, .. }
            | Command::Memprofile { common, .. }
            | Command::Gradcheck { common }
            | Command::GenReCorpus { common, .. }
            | Command::WeakLabel { common }
            | Command::TrainRe { common, .. }
            | Command::EvalRe { common }
            | Command::BuildChart { common, .. }
            | Command::Pipeline { common, .. } => common,
        }
    }

    /// Command-specific flags as `key=value` overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        match self {
            Command::GenWikihop { count, hops, .. } => {
                push("wikihop.count", count.map(|v| v.to_string()));
                push("wikihop.hops", hops.map(|v| v.to_string()));
            }
            Command::TrainReader { variant, epochs, .. } => {
                push("reader_train.variant", variant.as_deref().map(toml_string));
                push("reader_train.epochs", epochs.map(|v| v.to_string()));
            }
            Command::EvalReader { variant, .. } => {
                push("reader_train.variant", variant.as_deref().map(toml_string));
            }
            Command::Memprofile { paragraphs, .. } => {
                push("memprofile.paragraphs", paragraphs.as_ref().map(|p| format!("[{p}]")));
            }
            Command::GenReCorpus { signal_rate, .. } => {
                push("re_corpus.signal_rate", signal_rate.map(|v| format!("{v:?}")));
            }
            Command::TrainRe { epochs, .. } => {
                push("re_train.epochs", epochs.map(|v| v.to_string()));
            }
            Command::BuildChart { properties, n, m, .. } => {
                let list = properties.as_ref().map(|p| {
                    let items: Vec<String> = p
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(toml_string)
                        .collect();
                    format!("[{}]", items.join(", "))
                });
                push("chart.properties", list);
                push("chart.n", n.map(|v| v.to_string()));
                push("chart.m", m.map(|v| v.to_string()));
            }
            Command::Gradcheck { .. } | Command::WeakLabel { .. } | Command::EvalRe { .. } | Command::Pipeline { .. } => {}
        }
        o
    }
}

fn resolve(command: &Command) -> Result<RunConfig, Error> {
    let c = command.common();
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(out) = &c.out {
        overrides.push(format!("out_dir={}", toml_string(&out.display().to_string())));
    }
    overrides.extend(command.flag_overrides());
    match &c.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::parse("", &PathBuf::from("<defaults>"), &overrides),
    }
}

fn report<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn run(command: &Command) -> Result<(), Error> {
    let cfg = resolve(command)?;
    cmd::record_config(&cfg)?;
    match command {
        Command::GenWikihop { .. } => report(&cmd::cmd_gen_wikihop(&cfg)?),
        Command::TrainReader { .. } => report(&cmd::cmd_train_reader(&cfg)?),
        Command::EvalReader { .. } => report(&cmd::cmd_eval_reader(&cfg)?),
        Command::Memprofile { .. } => report(&cmd::cmd_memprofile(&cfg)?.rows),
        Command::Gradcheck { .. } => report(&cmd::cmd_gradcheck(&cfg)?),
        Command::GenReCorpus { .. } => report(&cmd::cmd_gen_re_corpus(&cfg)?),
        Command::WeakLabel { .. } => report(&cmd::cmd_weak_label(&cfg)?),
        Command::TrainRe { .. } => report(&cmd::cmd_train_re(&cfg)?),
        Command::EvalRe { .. } => report(&cmd::cmd_eval_re(&cfg)?),
        Command::BuildChart { .. } => report(&cmd::cmd_build_chart(&cfg)?),
        Command::Pipeline { with_reader, .. } => report(&cmd::cmd_pipeline(&cfg, *with_reader)?),
    }
    info!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

/// Command-line mistakes in the same one-line shape as every other error.
fn usage_error_json(e: &clap::Error) -> String {
    use clap::error::{ContextKind, ContextValue};
    let field = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => Some(s.clone()),
        _ => None,
    };
    let rendered = e.render().to_string();
    let message = rendered.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
    serde_json::json!({
        "error": "usage",
        "file": null,
        "line": null,
        "field": field,
        "message": message,
    })
    .to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", usage_error_json(&e));
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
