//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crowdgraph_core::config::{RunConfig, ScenarioSource};
use crowdgraph_core::metrics::Variant;

use crate::checkpoint;
use crate::commands::{self, ExportFormat, SampleRequest};
use crate::config::load_config;
use crate::embed::encoder_for;
use crate::error::{CliError, Result};
use crate::io::{atomic_write, Manifest};
use crate::llm::{HttpTransport, LlmClient};

#[derive(Parser, Debug)]
#[command(
    name = "crowdgraph",
    version,
    about = "Crowd scenario graph synthesis, training and evaluation"
)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SourceArg {
    Offline,
    Llm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Dot,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    GenC,
    NoCanonical,
    SingleLatent,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::GenC => Variant::GenC,
            VariantArg::NoCanonical => Variant::NoCanonical,
            VariantArg::SingleLatent => Variant::SingleLatent,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate scenarios, simulate them and write the subgraph dataset.
    GenData {
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long)]
        variants: Option<usize>,
        #[arg(long)]
        sims_per_scenario: Option<usize>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        /// Seed sentences, one per line (defaults to the bundled list).
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model on a dataset's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss history.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate scenario groups for a sentence and write their agent plans.
    Sample {
        #[arg(long)]
        text: String,
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated and held-out graph statistics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the histograms as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train and evaluate the ablation variants under one budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [VariantArg::GenC, VariantArg::NoCanonical, VariantArg::SingleLatent])]
        variants: Vec<VariantArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export graphs from a dataset or a sample file.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Dot)]
        format: FormatArg,
        /// Line to export (all lines when absent).
        #[arg(long)]
        index: Option<usize>,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Result<RunConfig> {
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Usage(problems.join("; ")))
    }
}

/// Config for commands reading a dataset: `--config` if given, otherwise
/// the one recorded in the dataset's manifest.
fn dataset_config(cli: &Cli, data: &Path) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => Manifest::read_for(data)?.config,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn progress(quiet: bool) -> impl FnMut(&crowdgraph_core::vgae::EpochLog) {
    move |log| {
        if !quiet {
            let val = log
                .val
                .map_or(String::from("-"), |v| format!("{:.4}", v.weighted(1.0)));
            log::info!(
                "epoch {:>4} beta {:.2} L_S {:.4} L_F {:.4} KL_S {:.4} KL_F {:.4} val {val}",
                log.epoch,
                log.beta,
                log.train.structure,
                log.train.features,
                log.train.kl_s,
                log.train.kl_f
            );
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let http_timeout = 60;
    match &cli.command {
        Command::GenData {
            scenarios,
            variants,
            sims_per_scenario,
            source,
            sentences,
            out,
        } => {
            let mut cfg = base_config(&cli)?;
            if let Some(v) = scenarios {
                cfg.data.scenarios = *v;
            }
            if let Some(v) = variants {
                cfg.data.variants = *v;
            }
            if let Some(v) = sims_per_scenario {
                cfg.data.sims_per_scenario = *v;
            }
            if let Some(s) = source {
                cfg.source = match s {
                    SourceArg::Offline => ScenarioSource::Offline,
                    SourceArg::Llm => ScenarioSource::Llm,
                };
            }
            let cfg = checked(cfg)?;
            let http = HttpTransport::new(cfg.llm.timeout_secs);
            let client = match cfg.source {
                ScenarioSource::Llm => {
                    Some(LlmClient::from_env(&http, cfg.llm.clone()).map_err(CliError::Usage)?)
                }
                ScenarioSource::Offline => None,
            };
            let s = commands::gen_data(&cfg, out, sentences.as_deref(), client.as_ref())?;
            println!("{}", serde_json::to_string(&s).unwrap_or_default());
        }
        Command::Train { data, out, epochs } => {
            let mut cfg = dataset_config(&cli, data)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let cfg = checked(cfg)?;
            let http = HttpTransport::new(http_timeout);
            let mut enc = encoder_for(&cfg, &http)?;
            let s = commands::train_cmd(&cfg, data, out, &mut enc, &mut progress(cli.quiet))?;
            println!("{}", serde_json::to_string(&s).unwrap_or_default());
        }
        Command::Sample {
            text,
            agents,
            n,
            ckpt,
            tau,
            out,
        } => {
            let (header, mut model) = checkpoint::load(ckpt)?;
            let given = cli.config.as_deref().map(load_config).transpose()?;
            let mut cfg = commands::resolve_config(&header, given, cli.seed)?;
            if let Some(t) = tau {
                cfg.tau = *t;
            }
            let cfg = checked(cfg)?;
            let http = HttpTransport::new(http_timeout);
            let mut enc = encoder_for(&cfg, &http)?;
            let req = SampleRequest {
                text,
                agents: *agents,
                n: *n,
                tau: cfg.tau,
            };
            let groups = commands::sample_cmd(&cfg, ckpt, &mut model, &req, out, &mut enc)?;
            log::info!("wrote {} plan groups to {}", groups.len(), out.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            csv,
            tau,
        } => {
            let (header, mut model) = checkpoint::load(ckpt)?;
            let given = cli.config.as_deref().map(load_config).transpose()?;
            let mut cfg = commands::resolve_config(&header, given, cli.seed)?;
            if let Some(t) = tau {
                cfg.tau = *t;
            }
            let cfg = checked(cfg)?;
            let http = HttpTransport::new(http_timeout);
            let mut enc = encoder_for(&cfg, &http)?;
            let r = commands::eval_cmd(
                &cfg,
                &header,
                &mut model,
                data,
                out,
                csv.as_deref(),
                &mut enc,
            )?;
            for m in &r.report.metrics {
                println!("{:<16} {:.4}", m.metric.name(), m.kld);
            }
        }
        Command::Ablate {
            data,
            out,
            variants,
            epochs,
        } => {
            let mut cfg = dataset_config(&cli, data)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let cfg = checked(cfg)?;
            let http = HttpTransport::new(http_timeout);
            let mut enc = encoder_for(&cfg, &http)?;
            let variants: Vec<Variant> = variants.iter().map(|&v| v.into()).collect();
            let mut p = progress(cli.quiet);
            let r =
                commands::ablate_cmd(&cfg, data, out, &variants, &mut enc, &mut |_, log| p(log))?;
            print!("{:<16}", "metric");
            for v in &r.table.variants {
                print!(" {:>14}", v.name());
            }
            println!();
            for row in &r.table.rows {
                print!("{:<16}", row.metric.name());
                for k in &row.kld {
                    print!(" {k:>14.4}");
                }
                println!();
            }
            print!("{:<16}", "failed draws");
            for f in &r.table.failures {
                print!(" {f:>14}");
            }
            println!();
        }
        Command::Export {
            input,
            format,
            index,
            out,
        } => {
            let graphs = commands::read_graphs(input)?;
            let fmt = match format {
                FormatArg::Dot => ExportFormat::Dot,
                FormatArg::Json => ExportFormat::Json,
            };
            let text = commands::export_graphs(&graphs, *index, fmt)?;
            match out {
                Some(p) => {
                    atomic_write(p, text.as_bytes())?;
                    let cfg = base_config(&cli)?;
                    let mut m = Manifest::new("export", &cfg)?;
                    m.inputs = vec![crate::io::InputRef::of(input)?];
                    m.details = serde_json::json!({ "graphs": if index.is_some() { 1 } else { graphs.len() } });
                    m.write_for(p)?;
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
/// Help and version requests print and return 0; parse errors return 1.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
