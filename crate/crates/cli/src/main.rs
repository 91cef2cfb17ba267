//! Command-line driver for the domain-privacy experiment lab.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use domainpriv_cli::config::{ExperimentConfig, PolicyChoice};
use domainpriv_cli::runner;

#[derive(Parser)]
#[command(
    name = "domainpriv",
    about = "Train multi-domain language models under redaction/DP recipes and measure cross-domain leakage",
    version
)]
struct Cli {
    /// Config file (sectioned key=value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (falls back to $DOMAINPRIV_OUT, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Drop the <DOMAIN> control tokens from all datasets and policies.
    #[arg(long, global = true)]
    no_domain_tokens: bool,

    /// Restrict to one policy family.
    #[arg(long, global = true, value_parser = ["keyword", "classifier"])]
    policy: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and lexicon files.
    GenCorpus,
    /// Write redacted corpora (and the classifier snapshot).
    Redact,
    /// Train target models.
    Train {
        /// Model alias (public, domain-only, private, pub-redacted, jft,
        /// jft-half, rs, ref_no_<DOMAIN>) or "all".
        #[arg(long, default_value = "all")]
        plan: String,
    },
    /// Evaluate test perplexity of trained models.
    Eval,
    /// Run the leakage attacks against trained models.
    Attack {
        /// Attack a single target alias instead of the full matrix.
        #[arg(long)]
        target: Option<String>,
    },
    /// Assemble results.csv, plot data, and the manifest inputs.
    Report {
        /// Print the fully resolved config and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// The whole pipeline: corpus, training matrix, attacks, reports.
    RunAll,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if cli.no_domain_tokens {
        cfg.no_domain_tokens = true;
    }
    if let Some(policy) = &cli.policy {
        cfg.policy = PolicyChoice::parse(policy)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("DOMAINPRIV_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    let out = resolve_out(&cli);
    match &cli.command {
        Command::GenCorpus => runner::gen_corpus(&cfg, &out),
        Command::Redact => runner::redact_cmd(&cfg, &out),
        Command::Train { plan } => runner::train_cmd(&cfg, &out, plan),
        Command::Eval => runner::eval_cmd(&cfg, &out),
        Command::Attack { target } => runner::attack_cmd(&cfg, &out, target.as_deref()),
        Command::Report { dump_config } => {
            if *dump_config {
                print!("{}", cfg.dump());
                Ok(())
            } else {
                runner::report_cmd(&cfg, &out)
            }
        }
        Command::RunAll => runner::run_all(&cfg, &out),
    }
}
