// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use edgetrust::cluster::PolicyRule;
use edgetrust::scenario::{
    default_role_rules, emit_report, run_scenario, ReportFormat, ScenarioConfig, ScenarioKind, TransportMode,
};

#[derive(Parser)]
#[command(name = "edgetrust", version, about = "Attested edge-worker enrollment scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write a report. Exits 0 iff every run passed.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    HappyPath,
    BadInitialBoot,
    CompromiseAfterAttest,
    Benchmark,
}

impl From<Scenario> for ScenarioKind {
    fn from(s: Scenario) -> Self {
        match s {
            Scenario::HappyPath => ScenarioKind::HappyPath,
            Scenario::BadInitialBoot => ScenarioKind::BadInitialBoot,
            Scenario::CompromiseAfterAttest => ScenarioKind::CompromiseAfterAttest,
            Scenario::Benchmark => ScenarioKind::Benchmark,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Tcp,
    InProcess,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// Verifier poll interval in milliseconds.
    #[arg(long, default_value_t = 2000)]
    poll_interval: u64,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Artificial worker startup delay in milliseconds.
    #[arg(long, default_value_t = 0)]
    worker_startup_delay: u64,
    /// Per-run timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    #[arg(long, value_enum, default_value_t = Transport::Tcp)]
    transport: Transport,
    /// Number of runs executed at once.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// Also POST revocations to this URL.
    #[arg(long)]
    webhook_url: Option<String>,
    /// Role rule as verb:resource; repeatable. Defaults to create:node, get:pod, list:configmap.
    #[arg(long = "rule", value_parser = parse_rule)]
    rules: Vec<PolicyRule>,
}

fn parse_rule(s: &str) -> Result<PolicyRule, String> {
    let (verb, resource) = s.split_once(':').ok_or_else(|| format!("expected verb:resource, got {s:?}"))?;
    if verb.is_empty() || resource.is_empty() {
        return Err(format!("expected verb:resource, got {s:?}"));
    }
    Ok(PolicyRule::new(verb, resource))
}

fn run(args: RunArgs) -> anyhow::Result<bool> {
    let config = ScenarioConfig {
        scenario: args.scenario.into(),
        devices: args.devices,
        poll_interval: Duration::from_millis(args.poll_interval),
        worker_startup_delay: Duration::from_millis(args.worker_startup_delay),
        repetitions: args.repetitions,
        seed: args.seed,
        run_timeout: Duration::from_secs(args.timeout),
        transport: match args.transport {
            Transport::Tcp => TransportMode::Tcp,
            Transport::InProcess => TransportMode::InProcess,
        },
        concurrency: args.concurrency,
        role_rules: if args.rules.is_empty() { default_role_rules() } else { args.rules },
        webhook_url: args.webhook_url,
    };
    let report = run_scenario(&config)?;
    let format = match args.format {
        Format::Json => ReportFormat::Json,
        Format::Table => ReportFormat::Table,
    };
    let bytes = emit_report(&report, format);
    match &args.report {
        Some(path) => std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    log::info!("{}: {}/{} runs passed", report.config.scenario.as_str(), report.runs_passed, report.runs.len());
    Ok(report.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run(args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}
